//! Synthetic video tasks, segment sampling and dataset files.
//!
//! Two tasks:
//! - `motion`: a bright square translates left, right, up or down over a
//!   static blocky background. Any single frame has the same distribution for
//!   every class, so only temporal order carries the label.
//! - `appearance`: a static shape (square, disc, bar, cross) sits on the same
//!   kind of background; one frame is enough to classify.
//!
//! Videos are `(C, F, H, W)` with values in `[0, 1]`, stored as f32.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tensor_io::{read_tensor, write_tensor};
use rayon::prelude::*;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Motion,
    Appearance,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "motion" => Ok(Task::Motion),
            "appearance" => Ok(Task::Appearance),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Motion => "motion",
            Task::Appearance => "appearance",
        })
    }
}

pub const MOTION_CLASSES: [&str; 4] = ["right", "left", "down", "up"];
pub const SHAPES: [&str; 4] = ["square", "disc", "bar", "cross"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub task: Task,
    pub num_class: usize,
    pub frames_total: usize,
    pub resolution: usize,
    pub channels: usize,
    pub object_size: usize,
    /// pixels per frame (motion task)
    pub speed: f64,
    pub noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// background block edge in pixels
    pub block: usize,
}

impl SynthConfig {
    pub fn motion(samples_per_class: usize, seed: u64) -> Self {
        SynthConfig {
            task: Task::Motion,
            num_class: 4,
            frames_total: 16,
            resolution: 56,
            channels: 3,
            object_size: 8,
            speed: 2.0,
            noise: 0.05,
            samples_per_class,
            seed,
            block: 8,
        }
    }

    pub fn appearance(samples_per_class: usize, seed: u64) -> Self {
        SynthConfig { task: Task::Appearance, object_size: 14, ..SynthConfig::motion(samples_per_class, seed) }
    }

    /// Extent of the sweep along the motion axis, end to end.
    fn travel(&self) -> f64 {
        self.speed * (self.frames_total - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let max_class = match self.task {
            Task::Motion => 4,
            Task::Appearance => 2 * SHAPES.len(),
        };
        if self.num_class < 2 || self.num_class > max_class {
            return bad(format!("{} task supports 2..={max_class} classes, got {}", self.task, self.num_class));
        }
        if self.frames_total == 0 || self.channels == 0 || self.samples_per_class == 0 || self.block == 0 {
            return bad("frames, channels, samples per class and block size must be positive".into());
        }
        if self.object_size < 3 || self.object_size > self.resolution {
            return bad(format!("object size {} does not fit {}²", self.object_size, self.resolution));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad("noise and speed must be finite and non-negative".into());
        }
        if self.task == Task::Motion {
            if self.speed == 0.0 {
                return bad("motion task needs a nonzero speed".into());
            }
            // the orthogonal coordinate is drawn from the same range, so one
            // check covers both axes
            if self.object_size as f64 + self.travel() >= self.resolution as f64 {
                return bad(format!(
                    "trajectory overflows the frame: size {} + travel {} ≥ {}",
                    self.object_size,
                    self.travel(),
                    self.resolution
                ));
            }
        }
        Ok(())
    }

    pub fn num_videos(&self) -> usize {
        self.num_class * self.samples_per_class
    }

    /// `key = value` lines describing the configuration.
    pub fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("task".into(), self.task.to_string()),
            ("num_class".into(), self.num_class.to_string()),
            ("frames_total".into(), self.frames_total.to_string()),
            ("resolution".into(), self.resolution.to_string()),
            ("channels".into(), self.channels.to_string()),
            ("object_size".into(), self.object_size.to_string()),
            ("speed".into(), self.speed.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("samples_per_class".into(), self.samples_per_class.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("block".into(), self.block.to_string()),
        ]
    }
}

/// One video `(C, F, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub label: usize,
}

impl Video {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.channels, self.frames, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("video dims are positive")
    }

    pub fn from_tensor(t: &Tensor, label: usize) -> Result<Self> {
        let d = t.dims();
        if d.len() != 4 {
            return Err(Error::ShapeMismatch(format!("video must be (C, F, H, W), got {d:?}")));
        }
        Ok(Video {
            channels: d[0],
            frames: d[1],
            height: d[2],
            width: d[3],
            data: t.data().iter().map(|&v| v as f32).collect(),
            label,
        })
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Frame `f` of every channel, concatenated `(C, H, W)`.
    pub fn frame(&self, f: usize) -> Vec<f32> {
        let plane = self.plane();
        (0..self.channels)
            .flat_map(|c| {
                let o = (c * self.frames + f) * plane;
                self.data[o..o + plane].iter().copied()
            })
            .collect()
    }

    /// Same video with frames in reverse order.
    pub fn reversed(&self) -> Video {
        let plane = self.plane();
        let mut data = self.data.clone();
        for c in 0..self.channels {
            for f in 0..self.frames {
                let src = (c * self.frames + f) * plane;
                let dst = (c * self.frames + self.frames - 1 - f) * plane;
                data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Video { data, ..self.clone() }
    }
}

/// Random draws fixing one motion video apart from its class and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionDraw {
    /// position along the motion axis at the centre time
    pub along: f64,
    /// centre-time position of the orthogonal coordinate
    pub across: f64,
    /// frame phase used for the orthogonal coordinate
    pub phase: usize,
    pub background: Vec<f64>,
}

fn background(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let cells = cfg.resolution.div_ceil(cfg.block);
    (0..cfg.channels * cells * cells).map(|_| rng.uniform(0.05, 0.45)).collect()
}

fn background_at(cfg: &SynthConfig, bg: &[f64], c: usize, y: usize, x: usize) -> f64 {
    let cells = cfg.resolution.div_ceil(cfg.block);
    bg[(c * cells + y / cfg.block) * cells + x / cfg.block]
}

/// Coverage of pixel `[i, i+1)` by the interval `[p, p+s)`.
fn coverage(i: usize, p: f64, s: f64) -> f64 {
    let lo = (i as f64).max(p);
    let hi = (i as f64 + 1.0).min(p + s);
    (hi - lo).max(0.0)
}

const OBJECT: f64 = 0.95;

fn centre_offset(cfg: &SynthConfig, t: usize) -> f64 {
    cfg.speed * (t as f64 - (cfg.frames_total - 1) as f64 / 2.0)
}

impl MotionDraw {
    pub fn sample(cfg: &SynthConfig, rng: &mut Rng) -> Self {
        let half = cfg.travel() / 2.0;
        let hi = cfg.resolution as f64 - cfg.object_size as f64 - half;
        let along = rng.uniform(half, hi);
        let across = rng.uniform(half, hi);
        let phase = rng.below(cfg.frames_total);
        MotionDraw { along, across, phase, background: background(cfg, rng) }
    }
}

/// Render a motion video; `noise` supplies the per-pixel Gaussian noise.
pub fn render_motion(cfg: &SynthConfig, class: usize, draw: &MotionDraw, noise: Option<&mut Rng>) -> Video {
    let (f, r, c) = (cfg.frames_total, cfg.resolution, cfg.channels);
    let s = cfg.object_size as f64;
    let dir = if class % 2 == 0 { 1.0 } else { -1.0 };
    let horizontal = class < 2;
    let cross = draw.across + centre_offset(cfg, draw.phase);
    let mut data = vec![0f32; c * f * r * r];
    let mut noise = noise;
    for t in 0..f {
        let pos = draw.along + dir * centre_offset(cfg, t);
        let (px, py) = if horizontal { (pos, cross) } else { (cross, pos) };
        for ch in 0..c {
            for y in 0..r {
                let cy = coverage(y, py, s);
                for x in 0..r {
                    let a = cy * coverage(x, px, s);
                    let bg = background_at(cfg, &draw.background, ch, y, x);
                    let mut v = bg + a * (OBJECT - bg);
                    if let Some(n) = noise.as_deref_mut() {
                        v += cfg.noise * n.normal();
                    }
                    data[((ch * f + t) * r + y) * r + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Video { channels: c, frames: f, height: r, width: r, data, label: class }
}

fn inside_shape(shape: usize, s: f64, dy: f64, dx: f64) -> bool {
    // (dy, dx) relative to the shape centre
    let h = s / 2.0;
    let third = s / 6.0;
    match shape {
        0 => dy.abs() < h && dx.abs() < h,
        1 => dy * dy + dx * dx < h * h,
        2 => dy.abs() < third && dx.abs() < h,
        _ => (dy.abs() < third && dx.abs() < h) || (dx.abs() < third && dy.abs() < h),
    }
}

/// Object colour per shape, one level per channel (channels cycle).
const TINTS: [[f64; 3]; 4] = [[0.95, 0.35, 0.35], [0.35, 0.95, 0.35], [0.35, 0.35, 0.95], [0.95, 0.95, 0.35]];

/// Appearance scenes are low-contrast so the object dominates.
fn flat_background(cfg: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let cells = cfg.resolution.div_ceil(cfg.block);
    (0..cfg.channels * cells * cells).map(|_| rng.uniform(0.27, 0.33)).collect()
}

fn render_appearance(cfg: &SynthConfig, class: usize, rng: &mut Rng) -> Video {
    let (f, r, c) = (cfg.frames_total, cfg.resolution, cfg.channels);
    let s = cfg.object_size as f64;
    let shape = class % SHAPES.len();
    // the second half of the classes repeats the shapes at lower contrast
    let dim = if class < SHAPES.len() { 1.0 } else { 0.5 };
    let cy = rng.uniform(s / 2.0, r as f64 - s / 2.0);
    let cx = rng.uniform(s / 2.0, r as f64 - s / 2.0);
    let bg = flat_background(cfg, rng);
    let mut data = vec![0f32; c * f * r * r];
    for t in 0..f {
        for ch in 0..c {
            let level = 0.3 + dim * (TINTS[shape][ch % 3] - 0.3);
            for y in 0..r {
                for x in 0..r {
                    let inside = inside_shape(shape, s, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let base = if inside { level } else { background_at(cfg, &bg, ch, y, x) };
                    let v = base + cfg.noise * rng.normal();
                    data[((ch * f + t) * r + y) * r + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Video { channels: c, frames: f, height: r, width: r, data, label: class }
}

/// All videos of a configuration, in class-interleaved order. Video `i` uses
/// its own stream derived from `(seed, i)`.
pub fn synth_videos(cfg: &SynthConfig) -> Result<Vec<Video>> {
    cfg.validate()?;
    Ok((0..cfg.num_videos())
        .into_par_iter()
        .map(|i| {
            let class = i % cfg.num_class;
            let mut rng = Rng::split(cfg.seed, i as u64);
            match cfg.task {
                Task::Motion => {
                    let draw = MotionDraw::sample(cfg, &mut rng);
                    render_motion(cfg, class, &draw, Some(&mut rng))
                }
                Task::Appearance => render_appearance(cfg, class, &mut rng),
            }
        })
        .collect())
}

/// In-memory labelled videos plus the per-channel mean used for centring.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
    pub num_class: usize,
    pub mean: Vec<f64>,
}

/// Per-channel mean over every pixel of every video.
pub fn channel_means(videos: &[Video]) -> Vec<f64> {
    let c = videos.first().map_or(0, |v| v.channels);
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for v in videos {
        let per = v.frames * v.height * v.width;
        for (ch, s) in sum.iter_mut().enumerate() {
            *s += v.data[ch * per..(ch + 1) * per].iter().map(|&x| x as f64).sum::<f64>();
        }
        count += per;
    }
    sum.iter().map(|s| s / count.max(1) as f64).collect()
}

/// How [`tsn_indices`] picks a frame inside each segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsnMode {
    /// uniform inside the segment
    Train,
    /// segment midpoint
    Test,
    /// clip `index` of `count` evenly placed inside each segment
    Clip { index: usize, count: usize },
}

/// Frame index per segment. Segment `s` is `[⌊sF/T⌋, ⌊(s+1)F/T⌋)`.
pub fn tsn_indices(frames: usize, segments: usize, mode: TsnMode, rng: &mut Rng) -> Result<Vec<usize>> {
    if segments == 0 || frames < segments {
        return Err(Error::InvalidArgument(format!("cannot take {segments} segments from {frames} frames")));
    }
    if let TsnMode::Clip { index, count } = mode {
        if count == 0 || index >= count {
            return Err(Error::InvalidArgument(format!("clip {index} of {count}")));
        }
    }
    Ok((0..segments)
        .map(|s| {
            let lo = s * frames / segments;
            let hi = (s + 1) * frames / segments;
            let len = hi - lo;
            match mode {
                TsnMode::Train => lo + rng.below(len),
                TsnMode::Test => (lo + hi) / 2,
                TsnMode::Clip { index, count } => lo + len * (2 * index + 1) / (2 * count),
            }
        })
        .collect())
}

/// Clip `(C, T, H, W)` of `video` `(C, F, H, W)`.
pub fn tsn_sample(video: &Tensor, segments: usize, mode: TsnMode, seed: u64) -> Result<Tensor> {
    let d = video.dims();
    if d.len() != 4 {
        return Err(Error::ShapeMismatch(format!("video must be (C, F, H, W), got {d:?}")));
    }
    let idx = tsn_indices(d[1], segments, mode, &mut Rng::new(seed))?;
    let plane = d[2] * d[3];
    let mut out = Vec::with_capacity(d[0] * segments * plane);
    for c in 0..d[0] {
        for &f in &idx {
            let o = (c * d[1] + f) * plane;
            out.extend_from_slice(&video.data()[o..o + plane]);
        }
    }
    Tensor::from_vec(&[d[0], segments, d[2], d[3]], out)
}

impl Dataset {
    pub fn new(videos: Vec<Video>, num_class: usize) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let first = &videos[0];
        for v in &videos {
            if (v.channels, v.frames, v.height, v.width) != (first.channels, first.frames, first.height, first.width) {
                return Err(Error::ShapeMismatch("videos in a dataset must share one shape".into()));
            }
            if v.label >= num_class {
                return Err(Error::InvalidArgument(format!("label {} ≥ {num_class} classes", v.label)));
            }
        }
        let mean = channel_means(&videos);
        Ok(Dataset { videos, num_class, mean })
    }

    pub fn synth(cfg: &SynthConfig) -> Result<Self> {
        Dataset::new(synth_videos(cfg)?, cfg.num_class)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.videos.iter().map(|v| v.label).collect()
    }

    /// Mean-centred batch `(N, C, T, H, W)` for the given videos. With
    /// [`TsnMode::Train`], video `i` draws its frames from `(seed, i)`.
    pub fn batch(&self, ids: &[usize], segments: usize, mode: TsnMode, seed: u64) -> Result<Tensor> {
        let first = &self.videos[0];
        let (c, h, w) = (first.channels, first.height, first.width);
        let plane = h * w;
        let mut out = Vec::with_capacity(ids.len() * c * segments * plane);
        for &i in ids {
            let v = self.videos.get(i).ok_or_else(|| Error::InvalidArgument(format!("video {i} out of range")))?;
            let idx = tsn_indices(v.frames, segments, mode, &mut Rng::split(seed, i as u64))?;
            for ch in 0..c {
                let m = self.mean.get(ch).copied().unwrap_or(0.0);
                for &f in &idx {
                    let o = (ch * v.frames + f) * plane;
                    out.extend(v.data[o..o + plane].iter().map(|&x| x as f64 - m));
                }
            }
        }
        Tensor::from_vec(&[ids.len(), c, segments, h, w], out)
    }
}

// ---------------------------------------------------------------------------
// Files.

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub relpath: String,
    pub label: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// directory the relative paths resolve against
    pub root: PathBuf,
    pub split: String,
    /// `key = value` header lines
    pub header: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn num_class(&self) -> Option<usize> {
        self.header_value("num_class").and_then(|v| v.parse().ok())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# split = {}\n", self.split));
        for (k, v) in &self.header {
            s.push_str(&format!("# {k} = {v}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.relpath, e.label, e.frames));
        }
        s
    }

    /// Read every referenced video.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let num_class = self
            .num_class()
            .or_else(|| self.entries.iter().map(|e| e.label + 1).max())
            .ok_or(Error::EmptyDataset)?;
        let videos = self
            .entries
            .iter()
            .map(|e| {
                let v = Video::from_tensor(&read_tensor(self.root.join(&e.relpath))?, e.label)?;
                if v.frames != e.frames {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: manifest says {} frames, file has {}",
                        e.relpath, e.frames, v.frames
                    )));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(videos, num_class)?;
        if let Some(mean) = self.header_value("mean") {
            let parsed: std::result::Result<Vec<f64>, _> = mean.split(',').map(|v| v.trim().parse::<f64>()).collect();
            if let Ok(m) = parsed {
                if m.len() == ds.mean.len() {
                    ds.mean = m;
                }
            }
        }
        Ok(ds)
    }
}

pub fn write_video(path: impl AsRef<Path>, video: &Tensor) -> Result<()> {
    if video.dims().len() != 4 {
        return Err(Error::ShapeMismatch(format!("video must be (C, F, H, W), got {:?}", video.dims())));
    }
    write_tensor(path, video)
}

pub fn read_video(path: impl AsRef<Path>) -> Result<Tensor> {
    let t = read_tensor(path.as_ref())?;
    if t.dims().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: video must be rank 4, got {:?}",
            path.as_ref().display(),
            t.dims()
        )));
    }
    Ok(t)
}

/// Parse a manifest and check that every referenced file exists and every
/// label is in range.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile { path: path.to_path_buf() }
        } else {
            Error::io(path, e)
        }
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut header = Vec::new();
    let mut split = String::new();
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let bad = |msg: String| Error::Config { line: no + 1, msg: format!("{}: {msg}", path.display()) };
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "split" {
                    split = v;
                } else {
                    header.push((k, v));
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected relpath<TAB>label<TAB>frames, got {line:?}")));
        }
        let label = parts[1].parse().map_err(|_| bad(format!("bad label {:?}", parts[1])))?;
        let frames = parts[2].parse().map_err(|_| bad(format!("bad frame count {:?}", parts[2])))?;
        entries.push(ManifestEntry { relpath: parts[0].to_string(), label, frames });
    }
    let m = DatasetManifest { root, split, header, entries };
    let missing: Vec<PathBuf> =
        m.entries.iter().map(|e| m.root.join(&e.relpath)).filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }
    if let Some(k) = m.num_class() {
        if let Some(e) = m.entries.iter().find(|e| e.label >= k) {
            return Err(Error::InvalidArgument(format!("{}: label {} ≥ num_class {k}", e.relpath, e.label)));
        }
    }
    Ok(m)
}

/// Write `videos` under `out_dir/<split>/` plus `out_dir/<split>.tsv`.
pub fn write_dataset(
    videos: &[Video],
    header: Vec<(String, String)>,
    out_dir: impl AsRef<Path>,
    split: &str,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let sub = out_dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let mut entries = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let rel = format!("{split}/{i:05}.stht");
        write_video(out_dir.join(&rel), &v.to_tensor())?;
        entries.push(ManifestEntry { relpath: rel, label: v.label, frames: v.frames });
    }
    let mut header = header;
    let mean = channel_means(videos);
    header.push(("mean".into(), mean.iter().map(|m| format!("{m:.9}")).collect::<Vec<_>>().join(",")));
    let m = DatasetManifest { root: out_dir.to_path_buf(), split: split.to_string(), header, entries };
    let path = out_dir.join(format!("{split}.tsv"));
    fs::write(&path, m.render()).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

fn gen_split(cfg: &SynthConfig, out_dir: &Path, split: &str) -> Result<DatasetManifest> {
    let videos = synth_videos(cfg)?;
    write_dataset(&videos, cfg.describe(), out_dir, split)
}

pub fn gen_motion_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>, split: &str) -> Result<DatasetManifest> {
    if cfg.task != Task::Motion {
        return Err(Error::InvalidArgument("gen_motion_dataset needs task = motion".into()));
    }
    gen_split(cfg, out_dir.as_ref(), split)
}

pub fn gen_appearance_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>, split: &str) -> Result<DatasetManifest> {
    if cfg.task != Task::Appearance {
        return Err(Error::InvalidArgument("gen_appearance_dataset needs task = appearance".into()));
    }
    gen_split(cfg, out_dir.as_ref(), split)
}

// ---------------------------------------------------------------------------
// Frame-level linear probe.

/// Softmax regression on single frames: trains on every frame of `train`
/// and reports accuracy on one random frame per video of `test`.
pub fn frame_probe_accuracy(train: &Dataset, test: &Dataset, epochs: usize, lr: f64, seed: u64) -> f64 {
    let k = train.num_class;
    let feats = |v: &Video, f: usize| -> Vec<f64> { v.frame(f).iter().map(|&x| x as f64).collect() };
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for v in &train.videos {
        for f in 0..v.frames {
            rows.push((feats(v, f), v.label));
        }
    }
    let d = rows[0].0.len();
    // standardize features with training statistics
    let mut mu = vec![0.0; d];
    for (x, _) in &rows {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= rows.len() as f64);
    let mut sd = vec![0.0; d];
    for (x, _) in &rows {
        for ((s, v), m) in sd.iter_mut().zip(x).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / rows.len() as f64).sqrt().max(1e-6));
    let norm = |x: &mut Vec<f64>| {
        for ((v, m), s) in x.iter_mut().zip(&mu).zip(&sd) {
            *v = (*v - m) / s;
        }
    };
    for (x, _) in rows.iter_mut() {
        norm(x);
    }
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let scores = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
    };
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let (x, y) = &rows[i];
            let s = scores(&w, &b, x);
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / z - if c == *y { 1.0 } else { 0.0 };
                b[c] -= lr * g;
                for (wv, xv) in w[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *wv -= lr * (g * xv + 1e-4 * *wv);
                }
            }
        }
    }
    let mut correct = 0usize;
    for v in &test.videos {
        let mut x = feats(v, rng.below(v.frames));
        norm(&mut x);
        let s = scores(&w, &b, &x);
        let pred = (0..k).max_by(|&a, &c| s[a].total_cmp(&s[c])).unwrap_or(0);
        correct += usize::from(pred == v.label);
    }
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_motion(spc: usize, seed: u64) -> SynthConfig {
        SynthConfig { resolution: 24, object_size: 4, speed: 1.0, frames_total: 8, ..SynthConfig::motion(spc, seed) }
    }

    #[test]
    fn midpoint_and_identity_sampling() {
        let mut rng = Rng::new(0);
        assert_eq!(tsn_indices(16, 8, TsnMode::Test, &mut rng).unwrap(), [1, 3, 5, 7, 9, 11, 13, 15]);
        for mode in [TsnMode::Train, TsnMode::Test] {
            assert_eq!(tsn_indices(5, 5, mode, &mut rng).unwrap(), [0, 1, 2, 3, 4]);
        }
        assert!(tsn_indices(4, 8, TsnMode::Test, &mut rng).is_err());
        let clips: Vec<Vec<usize>> =
            (0..2).map(|i| tsn_indices(16, 4, TsnMode::Clip { index: i, count: 2 }, &mut rng).unwrap()).collect();
        assert_eq!(clips, [vec![1, 5, 9, 13], vec![3, 7, 11, 15]]);
        assert_eq!(
            tsn_indices(16, 8, TsnMode::Clip { index: 0, count: 1 }, &mut rng).unwrap(),
            tsn_indices(16, 8, TsnMode::Test, &mut rng).unwrap()
        );
    }

    #[test]
    fn train_sampling_stays_in_segments() {
        let mut rng = Rng::new(1);
        for (f, t) in [(16, 8), (17, 5), (30, 7), (9, 9)] {
            for _ in 0..200 {
                let idx = tsn_indices(f, t, TsnMode::Train, &mut rng).unwrap();
                for (s, &i) in idx.iter().enumerate() {
                    assert!(i >= s * f / t && i < (s + 1) * f / t);
                }
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn sample_gathers_frames() {
        let v = Tensor::from_vec(&[1, 4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        assert_eq!(tsn_sample(&v, 2, TsnMode::Test, 0).unwrap().data(), [11.0, 13.0]);
    }

    #[test]
    fn reversal_swaps_direction() {
        let cfg = SynthConfig { noise: 0.0, ..small_motion(1, 2) };
        let draw = MotionDraw::sample(&cfg, &mut Rng::new(3));
        for (a, b) in [(0, 1), (2, 3)] {
            let fwd = render_motion(&cfg, a, &draw, None);
            let back = render_motion(&cfg, b, &draw, None);
            assert_eq!(fwd.reversed().data, back.data);
            assert_ne!(fwd.data, back.data);
        }
    }

    #[test]
    fn centre_offsets_are_symmetric() {
        let cfg = SynthConfig { noise: 0.0, ..small_motion(1, 4) };
        let offsets: Vec<f64> = (0..cfg.frames_total).map(|t| centre_offset(&cfg, t)).collect();
        let mut neg: Vec<f64> = offsets.iter().map(|o| -o).collect();
        neg.reverse();
        assert_eq!(offsets, neg);
    }

    #[test]
    fn rejects_overflowing_trajectories() {
        let cfg = SynthConfig { speed: 4.0, ..SynthConfig::motion(1, 0) };
        assert!(cfg.validate().is_err());
        assert!(SynthConfig { num_class: 5, ..SynthConfig::motion(1, 0) }.validate().is_err());
        assert!(SynthConfig::appearance(1, 0).validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_videos(&small_motion(2, 5)).unwrap();
        let b = synth_videos(&small_motion(2, 5)).unwrap();
        assert_eq!(a, b);
        let c = synth_videos(&small_motion(2, 6)).unwrap();
        assert_ne!(a[0].data, c[0].data);
        assert_eq!(a.iter().map(|v| v.label).collect::<Vec<_>>(), [0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(a.iter().all(|v| v.data.iter().all(|&x| (0.0..=1.0).contains(&x))));
    }

    #[test]
    fn appearance_seeds_differ_only_in_draws() {
        let cfg = SynthConfig { resolution: 24, object_size: 10, ..SynthConfig::appearance(1, 7) };
        let a = synth_videos(&cfg).unwrap();
        let b = synth_videos(&SynthConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_eq!(a.iter().map(|v| v.label).collect::<Vec<_>>(), b.iter().map(|v| v.label).collect::<Vec<_>>());
        assert_ne!(a[0].data, b[0].data);
    }

    #[test]
    fn batch_is_centred_clips() {
        let ds = Dataset::synth(&small_motion(2, 9)).unwrap();
        let b = ds.batch(&[1, 3], 4, TsnMode::Test, 0).unwrap();
        assert_eq!(b.dims(), [2, 3, 4, 24, 24]);
        let raw = tsn_sample(&ds.videos[3].to_tensor(), 4, TsnMode::Test, 0).unwrap();
        let plane = 4 * 24 * 24;
        let off = 3 * plane;
        for ch in 0..3 {
            for q in 0..plane {
                let want = raw.data()[ch * plane + q] - ds.mean[ch];
                assert!((b.data()[off + ch * plane + q] - want).abs() < 1e-12);
            }
        }
        assert_eq!(ds.batch(&[0], 4, TsnMode::Train, 5).unwrap(), ds.batch(&[0], 4, TsnMode::Train, 5).unwrap());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_motion(1, 10);
        let m = gen_motion_dataset(&cfg, dir.path(), "train").unwrap();
        let loaded = load_manifest(dir.path().join("train.tsv")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        assert_eq!(loaded.num_class(), Some(4));
        let ds = loaded.load_dataset().unwrap();
        assert_eq!(ds.videos, synth_videos(&cfg).unwrap());
        assert!(gen_appearance_dataset(&cfg, dir.path(), "x").is_err());

        fs::remove_file(dir.path().join(&m.entries[2].relpath)).unwrap();
        match load_manifest(dir.path().join("train.tsv")) {
            Err(Error::Validation(paths)) => assert_eq!(paths, [dir.path().join(&m.entries[2].relpath)]),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(matches!(load_manifest(dir.path().join("nope.tsv")), Err(Error::MissingFile { .. })));
    }

    #[test]
    fn video_round_trip_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::random_uniform(&[3, 4, 5, 6], 11, 0.0, 1.0).unwrap();
        let p = dir.path().join("v.stht");
        write_video(&p, &t).unwrap();
        let back = read_video(&p).unwrap();
        let q = t.map(|v| v as f32 as f64);
        assert_eq!(back, q);
        assert!(write_video(&p, &Tensor::zeros(&[2, 2]).unwrap()).is_err());
    }
}
