//! The `sth` command line.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 configuration,
//! 3 I/O or file format, 4 shape or consistency.

use crate::analysis::{attention_csv, attention_samples, attention_samples_csv, cost_report, export_attention_stats, sweep_p, sweep_text};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{gen_appearance_dataset, gen_motion_dataset, load_manifest, Dataset, SynthConfig, Task};
use crate::error::{Error, Result};
use crate::layout::Proportion;
use crate::network::{build_sth_network, Network};
use crate::training::{evaluate, fit};
use crate::verify::{self, Scope};
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Full run configuration written next to a checkpoint.
pub const RUN_CONFIG: &str = "run.txt";
pub const METRICS: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(name = "sth", version, about = "Hybrid spatio-temporal convolution: cost analysis, self-checks, synthetic data, training")]
pub struct Cli {
    /// `key = value` run configuration
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// overrides train.seed and data.seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// also write the command's table as CSV
    #[arg(long, global = true, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and MAC report for the configured network.
    Analyze {
        /// comma-separated proportions to compare, e.g. 0,1/8,1/4,1/2
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        sweep_p: Option<Vec<Proportion>>,
    },
    /// Run self-checks; exits 1 if any fails.
    Verify {
        #[arg(default_value = "all", value_parser = parse_scope)]
        scope: Scope,
    },
    /// Write train and val splits of the configured synthetic task.
    GenData,
    /// Train, then save a checkpoint and per-epoch metrics.
    Train {
        /// dataset directory from gen-data; generated in memory if omitted
        data: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the validation split.
    Eval { checkpoint: PathBuf, data: Option<PathBuf> },
    /// Mean attention coefficients per layer.
    DumpAttention { checkpoint: PathBuf, data: Option<PathBuf> },
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with_args(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Size the global pool from `STH_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("STH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("STH_THREADS must be a positive integer, got {v:?}")))?;
    // a pool built earlier in the same process wins; that is fine for tests
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Config { line, msg } => Error::Config { line, msg: format!("{}: {msg}", path.display()) },
            e => e,
        })?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

/// Execute a parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Analyze { sweep_p: ps } => analyze(cli, &cfg, ps.as_deref(), out),
        Command::Verify { scope } => verify_cmd(*scope, cli.seed.unwrap_or(0), out),
        Command::GenData => gen_data(cli, &cfg, out),
        Command::Train { data } => train(cli, &cfg, data.as_deref(), out),
        Command::Eval { checkpoint, data } => eval(cli, &cfg, checkpoint, data.as_deref(), out),
        Command::DumpAttention { checkpoint, data } => dump_attention(cli, &cfg, checkpoint, data.as_deref(), out),
    }
}

fn analyze(cli: &Cli, cfg: &RunConfig, ps: Option<&[Proportion]>, out: &mut dyn Write) -> Result<i32> {
    cfg.net.validate()?;
    let report = cost_report(&cfg.net)?;
    let sweep = ps.map(|ps| sweep_p(&cfg.net, ps)).transpose()?;
    let mut text = report.to_text();
    if let Some(rows) = &sweep {
        text.push('\n');
        text.push_str(&sweep_text(rows));
    }
    if let Some(path) = &cli.csv {
        write_file(path, &report.to_csv())?;
    }
    say(out, &text)?;
    Ok(0)
}

fn verify_cmd(scope: Scope, seed: u64, out: &mut dyn Write) -> Result<i32> {
    let mut io = Ok(());
    let checks = verify::run(scope, seed, |c, extra| {
        if io.is_ok() {
            io = say(out, &format!("{c}\n{}", extra.unwrap_or("")));
        }
    })?;
    io?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    say(out, &format!("{} checks, {failed} failed\n", checks.len()))?;
    Ok(if failed == 0 { 0 } else { 1 })
}

fn generate(cfg: &SynthConfig, dir: &Path, split: &str) -> Result<()> {
    match cfg.task {
        Task::Motion => gen_motion_dataset(cfg, dir, split).map(drop),
        Task::Appearance => gen_appearance_dataset(cfg, dir, split).map(drop),
    }
}

fn gen_data(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    cfg.data.validate()?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    generate(&cfg.train_data(), &dir, "train")?;
    generate(&cfg.val_data(), &dir, "val")?;
    write_file(&dir.join(RUN_CONFIG), &cfg.to_text())?;
    say(
        out,
        &format!(
            "{} task: {} train + {} val videos in {}\n",
            cfg.data.task,
            cfg.train_data().num_videos(),
            cfg.val_data().num_videos(),
            dir.display()
        ),
    )?;
    Ok(0)
}

/// One split: from `dir/<split>.tsv` when a directory is given, otherwise
/// synthesized from `synth`.
fn split(dir: Option<&Path>, name: &str, synth: &SynthConfig) -> Result<Dataset> {
    match dir {
        Some(d) if d.is_file() => load_manifest(d)?.load_dataset(),
        Some(d) => load_manifest(d.join(format!("{name}.tsv")))?.load_dataset(),
        None => Dataset::synth(synth),
    }
}

fn check_fit(net: &Network, data: &Dataset) -> Result<()> {
    if data.num_class != net.cfg.num_class {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, network predicts {}",
            data.num_class, net.cfg.num_class
        )));
    }
    if let Some(v) = data.videos.first() {
        if (v.channels, v.height, v.width) != (net.cfg.in_channels, net.cfg.input_hw, net.cfg.input_hw) {
            return Err(Error::ShapeMismatch(format!(
                "videos are {}×{}×{}, network takes {}×{}²",
                v.channels, v.height, v.width, net.cfg.in_channels, net.cfg.input_hw
            )));
        }
    }
    Ok(())
}

fn train(cli: &Cli, cfg: &RunConfig, data: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    cfg.validate()?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let train_set = split(data, "train", &cfg.train_data())?;
    let val_set = split(data, "val", &cfg.val_data())?;
    let mut net = build_sth_network(&cfg.net, cfg.train.seed)?;
    check_fit(&net, &train_set)?;
    check_fit(&net, &val_set)?;
    let start = Instant::now();
    let mut io = Ok(());
    let history = fit(&mut net, &train_set, &val_set, &cfg.train, |row| {
        let m = row.metrics;
        let line = format!("epoch {:>3} {:<5} loss {:.4} top1 {:.4} top5 {:.4}\n", row.epoch, row.split, m.loss, m.top1, m.top5);
        if io.is_ok() {
            io = say(out, &line);
        }
        if row.split == "val" {
            eprintln!("epoch {} done after {:.1} s", row.epoch, start.elapsed().as_secs_f64());
        }
    })?;
    io?;
    save_checkpoint(&net, &dir)?;
    write_file(&dir.join(RUN_CONFIG), &cfg.to_text())?;
    let csv = cli.csv.clone().unwrap_or_else(|| dir.join(METRICS));
    write_file(&csv, &history.to_csv())?;
    let best = history.best_val_top1().unwrap_or(0.0);
    say(out, &format!("checkpoint {}, best val top1 {best:.4}\n", dir.display()))?;
    Ok(0)
}

/// Config for a checkpoint: `--config` if given, else the run config saved
/// beside it, else defaults; the network section always comes from the
/// checkpoint.
fn checkpoint_run(cli: &Cli, cfg: &RunConfig, ckpt: &Path, net: &Network) -> Result<RunConfig> {
    let saved = ckpt.join(RUN_CONFIG);
    let mut run = if cli.config.is_none() && saved.is_file() {
        let r = RunConfig::load(&saved)?;
        match cli.seed {
            Some(s) => r.with_seed(s),
            None => r,
        }
    } else {
        cfg.clone()
    };
    run.net = net.cfg.clone();
    Ok(run)
}

fn eval(cli: &Cli, cfg: &RunConfig, ckpt: &Path, data: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let net = load_checkpoint(ckpt)?;
    let run = checkpoint_run(cli, cfg, ckpt, &net)?;
    let val = split(data, "val", &run.val_data())?;
    check_fit(&net, &val)?;
    let m = evaluate(&net, &val, run.train.segments, run.train.clips_per_video)?;
    if let Some(path) = &cli.csv {
        write_file(path, &format!("videos,loss,top1,top5\n{},{:.6},{:.4},{:.4}\n", val.len(), m.loss, m.top1, m.top5))?;
    }
    say(out, &format!("{} videos: top1 {:.4} top5 {:.4} loss {:.4}\n", val.len(), m.top1, m.top5, m.loss))?;
    Ok(0)
}

fn dump_attention(cli: &Cli, cfg: &RunConfig, ckpt: &Path, data: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let net = load_checkpoint(ckpt)?;
    let run = checkpoint_run(cli, cfg, ckpt, &net)?;
    let val = split(data, "val", &run.val_data())?;
    check_fit(&net, &val)?;
    let stats = export_attention_stats(&net, &val, run.train.segments)?;
    if let Some(path) = &cli.csv {
        write_file(path, &attention_csv(&stats))?;
    }
    if let Some(dir) = &cli.out {
        write_file(&dir.join("attention_layers.csv"), &attention_csv(&stats))?;
        let rows = attention_samples(&net, &val, run.train.segments)?;
        write_file(&dir.join("attention_samples.csv"), &attention_samples_csv(&rows))?;
    }
    let mut text = format!("{:<5} {:<12} {:>8} {:>8}\n", "layer", "name", "alpha_s", "alpha_t");
    for s in &stats {
        text.push_str(&format!("{:<5} {:<12} {:>8.4} {:>8.4}\n", s.layer, s.name, s.alpha_s, s.alpha_t));
    }
    say(out, &text)?;
    Ok(0)
}
