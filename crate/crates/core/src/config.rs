//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix (`net.`, `train.`, `data.`); `#` starts a
//! comment. Unset keys keep the desk-scale defaults.
//!
//! ```text
//! # desk motion run
//! net.p = 1/4
//! net.kernel_type = dilated
//! train.lr = 0.05
//! data.task = motion
//! ```

use crate::data::{SynthConfig, Task};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::rng::Rng;
use crate::training::TrainConfig;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    /// videos per class in the validation split
    pub val_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetworkConfig::desk(8, 56, 8, 4),
            train: TrainConfig::default(),
            data: SynthConfig::motion(200, 0),
            val_per_class: 50,
        }
    }
}

const VAL_STREAM: u64 = 0x7661_6c;

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn named<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Assign one key. Errors carry a message without position.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (n, t, d) = (&mut self.net, &mut self.train, &mut self.data);
        match key {
            "net.frames" => n.frames = num(v)?,
            "net.input_hw" => n.input_hw = num(v)?,
            "net.in_channels" => n.in_channels = num(v)?,
            "net.stem_width" => n.stem_width = num(v)?,
            "net.sth_widths" => n.sth_widths = list(v)?,
            "net.blocks" => n.blocks = list(v)?,
            "net.p" => n.p = named(v)?,
            "net.kernel_type" => n.kernel_type = named(v)?,
            "net.attention" => n.attention = boolean(v)?,
            "net.attention_reduction" => n.attention_reduction = num(v)?,
            "net.variant" => n.variant = named(v)?,
            "net.num_class" => n.num_class = num(v)?,
            "net.scale_factor" => n.scale_factor = num(v)?,
            "train.lr" => t.lr = num(v)?,
            "train.momentum" => t.momentum = num(v)?,
            "train.weight_decay" => t.weight_decay = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.lr_steps" => t.lr_steps = list(v)?,
            "train.lr_decay" => t.lr_decay = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.segments" => t.segments = num(v)?,
            "train.clips_per_video" => t.clips_per_video = num(v)?,
            "train.target_top1" => t.target_top1 = if v == "none" { None } else { Some(num(v)?) },
            "data.task" => {
                let task: Task = named(v)?;
                // switching task resets the task-shaped defaults
                let (spc, seed) = (d.samples_per_class, d.seed);
                *d = match task {
                    Task::Motion => SynthConfig::motion(spc, seed),
                    Task::Appearance => SynthConfig::appearance(spc, seed),
                };
            }
            "data.num_class" => d.num_class = num(v)?,
            "data.frames_total" => d.frames_total = num(v)?,
            "data.resolution" => d.resolution = num(v)?,
            "data.channels" => d.channels = num(v)?,
            "data.object_size" => d.object_size = num(v)?,
            "data.speed" => d.speed = num(v)?,
            "data.noise" => d.noise = num(v)?,
            "data.samples_per_class" => d.samples_per_class = num(v)?,
            "data.seed" => d.seed = num(v)?,
            "data.block" => d.block = num(v)?,
            "data.val_per_class" => self.val_per_class = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key, in a form [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let (n, t, d) = (&self.net, &self.train, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("net.frames", n.frames.to_string());
        kv("net.input_hw", n.input_hw.to_string());
        kv("net.in_channels", n.in_channels.to_string());
        kv("net.stem_width", n.stem_width.to_string());
        kv("net.sth_widths", join(&n.sth_widths));
        kv("net.blocks", join(&n.blocks));
        kv("net.p", n.p.to_string());
        kv("net.kernel_type", n.kernel_type.to_string());
        kv("net.attention", n.attention.to_string());
        kv("net.attention_reduction", n.attention_reduction.to_string());
        kv("net.variant", n.variant.to_string());
        kv("net.num_class", n.num_class.to_string());
        kv("net.scale_factor", n.scale_factor.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.momentum", format!("{:?}", t.momentum));
        kv("train.weight_decay", format!("{:?}", t.weight_decay));
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr_steps", join(&t.lr_steps));
        kv("train.lr_decay", format!("{:?}", t.lr_decay));
        kv("train.seed", t.seed.to_string());
        kv("train.segments", t.segments.to_string());
        kv("train.clips_per_video", t.clips_per_video.to_string());
        kv("train.target_top1", t.target_top1.map_or("none".into(), |v| format!("{v:?}")));
        kv("data.task", d.task.to_string());
        kv("data.num_class", d.num_class.to_string());
        kv("data.frames_total", d.frames_total.to_string());
        kv("data.resolution", d.resolution.to_string());
        kv("data.channels", d.channels.to_string());
        kv("data.object_size", d.object_size.to_string());
        kv("data.speed", format!("{:?}", d.speed));
        kv("data.noise", format!("{:?}", d.noise));
        kv("data.samples_per_class", d.samples_per_class.to_string());
        kv("data.seed", d.seed.to_string());
        kv("data.block", d.block.to_string());
        kv("data.val_per_class", self.val_per_class.to_string());
        s
    }

    /// Override both the training and the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn train_data(&self) -> SynthConfig {
        self.data.clone()
    }

    /// Validation split: same generator, its own seed stream.
    pub fn val_data(&self) -> SynthConfig {
        let seed = Rng::split(self.data.seed, VAL_STREAM).next_u64();
        SynthConfig { samples_per_class: self.val_per_class, seed, ..self.data.clone() }
    }

    /// Section-level validation plus the cross-section agreements a run
    /// needs (classes, channels, resolution, frames).
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        let (n, t, d) = (&self.net, &self.train, &self.data);
        let mismatch = |what: &str, a: usize, b: usize| {
            Err(Error::InvalidArgument(format!("{what}: network has {a}, data has {b}")))
        };
        if self.val_per_class == 0 {
            return Err(Error::InvalidArgument("data.val_per_class must be positive".into()));
        }
        if n.num_class != d.num_class {
            return mismatch("classes", n.num_class, d.num_class);
        }
        if n.in_channels != d.channels {
            return mismatch("channels", n.in_channels, d.channels);
        }
        if n.input_hw != d.resolution {
            return mismatch("resolution", n.input_hw, d.resolution);
        }
        if n.frames != t.segments {
            return Err(Error::InvalidArgument(format!(
                "network takes {} frames but training samples {} segments",
                n.frames, t.segments
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Proportion, Variant};
    use crate::sth::KernelType;

    #[test]
    fn parses_sections_comments_and_rationals() {
        let cfg = RunConfig::parse(
            "# comment\n\nnet.p = 1/8  # trailing\nnet.kernel_type = dilated\nnet.attention = on\n\
             net.variant = merge\ntrain.lr = 0.01\ntrain.lr_steps = 5, 9\ndata.task = appearance\n",
        )
        .unwrap();
        assert_eq!(cfg.net.p, Proportion::one_over(8).unwrap());
        assert_eq!(cfg.net.kernel_type, KernelType::Dilated);
        assert!(cfg.net.attention);
        assert_eq!(cfg.net.variant, Variant::Merge);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.lr_steps, [5, 9]);
        assert_eq!(cfg.data.task, Task::Appearance);
        assert_eq!(cfg.data.samples_per_class, 200);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [
            ("net.p = 1/4\nnet.bogus = 3\n", 2),
            ("\n\nnet.frames 8\n", 3),
            ("train.lr = fast\n", 1),
            ("net.p = 2/3\n", 1),
            ("net.attention = maybe", 1),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("net.p", "1/2").unwrap();
        cfg.set("train.target_top1", "0.9").unwrap();
        cfg.set("data.noise", "0.125").unwrap();
        cfg.set("net.sth_widths", "16,32,64,128").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_are_consistent_and_mismatches_are_caught() {
        RunConfig::default().validate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("data.num_class", "6").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let mut cfg = RunConfig::default();
        cfg.set("train.segments", "4").unwrap();
        assert!(cfg.validate().is_err());
    }
}
