//! Subcommands. Each one is a pure function of (config, checkpoint, seed)
//! to files; re-running overwrites its outputs with identical bytes.
//!
//! Output files, all under the output directory:
//!
//! * `train`: `model.ckpt` (final), `model_step{N}.ckpt` (periodic),
//!   `train_log.csv` (`step,loss,wall_ms`)
//! * `sample`: `predictions.csv` (`window,sample,t,x,y`)
//! * `eval`: `metrics.json`, `metrics.csv`
//! * `sweep`: `curve.csv` (`step,ade,fde,min3,min5,diversity`),
//!   `clouds.csv` (`step,sample,t,x,y`, first test window)

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricReport, SamplingOptions};
use crate::model::TrajectoryDenoiser;
use crate::rng::{stream, Stream};
use crate::schedule::NoiseSchedule;
use crate::training::train_loop;

#[derive(Debug, Parser)]
#[command(name = "trajdiff", version, about = "Diffusion-based stochastic trajectory prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser and write checkpoints plus a loss log.
    Train(CommonArgs),
    /// Draw samples for every test window.
    Sample(CommonArgs),
    /// Best-of-N metrics over the test windows.
    Eval(CommonArgs),
    /// Per-reverse-step metric curve and sample clouds.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to read (sample/eval/sweep) or the final checkpoint path to write (train).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per window, overriding `n_samples`.
    #[arg(long = "n-samples")]
    pub n_samples: Option<usize>,
}

impl CommonArgs {
    /// Loads the config and applies command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.n_samples {
            cfg.n_samples = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint_in(&self, cfg: &RunConfig) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            let cfg = a.resolve()?;
            cmd_train(&cfg, a.checkpoint.as_deref()).map(drop)
        }
        Command::Sample(a) => {
            let cfg = a.resolve()?;
            cmd_sample(&cfg, &a.checkpoint_in(&cfg)).map(drop)
        }
        Command::Eval(a) => {
            let cfg = a.resolve()?;
            cmd_eval(&cfg, &a.checkpoint_in(&cfg)).map(drop)
        }
        Command::Sweep(a) => {
            let cfg = a.resolve()?;
            cmd_sweep(&cfg, &a.checkpoint_in(&cfg)).map(drop)
        }
    }
}

/// Trains from the seeded initialization. Returns the final checkpoint path.
pub fn cmd_train(cfg: &RunConfig, final_path: Option<&Path>) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let splits = cfg.splits()?;
    let schedule = NoiseSchedule::from_keys(&cfg.schedule())?;
    let model = cfg.model();
    let net = TrajectoryDenoiser::new(model.clone(), schedule.steps())?;
    let init = net.init_params(&mut stream(cfg.seed, Stream::Init))?;
    let train_cfg = cfg.train();
    let final_path = final_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));

    let write = |step: u64, params: &crate::numerics::ParamStore, path: &Path| {
        let ckpt = Checkpoint { model: model.clone(), schedule: cfg.schedule(), params: params.clone(), seed: cfg.seed, step };
        save_checkpoint(&ckpt, path)
    };
    let (params, log) = train_loop(&net, init, &splits.train, &schedule, &train_cfg, |step, params| {
        if train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0 {
            write(step, params, &cfg.out_dir.join(format!("model_step{step}.ckpt")))?;
        }
        Ok(())
    })?;
    write(train_cfg.steps, &params, &final_path)?;

    let mut csv = String::from("step,loss,wall_ms\n");
    for r in &log {
        writeln!(csv, "{},{},{}", r.step, r.loss, r.wall_ms).expect("write to string");
    }
    fs::write(cfg.out_dir.join("train_log.csv"), csv)?;
    Ok(final_path)
}

struct Loaded {
    net: TrajectoryDenoiser,
    ckpt: Checkpoint,
    schedule: NoiseSchedule,
}

fn load_for(cfg: &RunConfig, path: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(path)?;
    if (ckpt.model.t_init, ckpt.model.t_pred) != (cfg.t_init, cfg.t_pred) {
        return Err(Error::Config(format!(
            "checkpoint windows are {}+{} frames, config asks for {}+{}",
            ckpt.model.t_init, ckpt.model.t_pred, cfg.t_init, cfg.t_pred
        )));
    }
    let schedule = NoiseSchedule::from_keys(&ckpt.schedule)?;
    let net = TrajectoryDenoiser::new(ckpt.model.clone(), schedule.steps())?;
    Ok(Loaded { net, ckpt, schedule })
}

fn sampling(cfg: &RunConfig) -> SamplingOptions {
    SamplingOptions { n_samples: cfg.n_samples, seed: cfg.seed, keep_trace: false }
}

/// Writes `predictions.csv` and returns its path.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let l = load_for(cfg, checkpoint)?;
    let windows = cfg.eval_set(&cfg.splits()?);
    let sets = evaluation::sample_all(&l.net, &l.ckpt.params, &windows, &l.schedule, &sampling(cfg))?;
    let mut csv = String::from("window,sample,t,x,y\n");
    for set in &sets {
        for (s, path) in set.samples.iter().enumerate() {
            for (t, p) in path.iter().enumerate() {
                writeln!(csv, "{},{},{},{},{}", set.window, s, t, p[0], p[1]).expect("write to string");
            }
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let out = cfg.out_dir.join("predictions.csv");
    fs::write(&out, csv)?;
    Ok(out)
}

/// Writes `metrics.json` and `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricReport> {
    let l = load_for(cfg, checkpoint)?;
    let windows = cfg.eval_set(&cfg.splits()?);
    if windows.is_empty() {
        return Err(Error::Config("no test windows to evaluate".into()));
    }
    let (report, _) = evaluation::evaluate(&l.net, &l.ckpt.params, &windows, &l.schedule, &sampling(cfg))?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(cfg.out_dir.join("metrics.csv"), metrics_csv(&report))?;
    Ok(report)
}

pub fn metrics_csv(r: &MetricReport) -> String {
    let mut head = String::from("windows,n_samples,ade,fde");
    let mut row = format!("{},{},{},{}", r.windows, r.n_samples, r.ade, r.fde);
    for m in &r.min_k {
        write!(head, ",min{k}_ade,min{k}_fde", k = m.k).expect("write to string");
        write!(row, ",{},{}", m.ade, m.fde).expect("write to string");
    }
    format!("{head},diversity\n{row},{}\n", r.diversity)
}

/// Writes `curve.csv` and `clouds.csv`; returns both paths.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: &Path) -> Result<(PathBuf, PathBuf)> {
    let l = load_for(cfg, checkpoint)?;
    let windows = cfg.eval_set(&cfg.splits()?);
    if windows.is_empty() {
        return Err(Error::Config("no test windows to sweep".into()));
    }
    let opts = sampling(cfg);
    let rows = evaluation::tradeoff_sweep(&l.net, &l.ckpt.params, &windows, &l.schedule, &opts)?;
    let mut curve = String::from("step,ade,fde,min3,min5,diversity\n");
    for r in &rows {
        writeln!(curve, "{},{},{},{},{},{}", r.step, r.ade, r.fde, r.min3, r.min5, r.diversity).expect("write to string");
    }

    let traced = evaluation::sample(
        &l.net,
        &l.ckpt.params,
        &windows[0],
        0,
        &l.schedule,
        &SamplingOptions { keep_trace: true, ..opts },
    )?;
    let clouds = evaluation::export_step_clouds(traced.trace.as_deref().unwrap_or_default(), cfg.cloud_stride)?;
    let mut cloud = String::from("step,sample,t,x,y\n");
    for c in &clouds {
        writeln!(cloud, "{},{},{},{},{}", c.step, c.sample, c.t, c.x, c.y).expect("write to string");
    }

    fs::create_dir_all(&cfg.out_dir)?;
    let (cp, kp) = (cfg.out_dir.join("curve.csv"), cfg.out_dir.join("clouds.csv"));
    fs::write(&cp, curve)?;
    fs::write(&kp, cloud)?;
    Ok((cp, kp))
}
