//! Flat run configuration shared by every subcommand.
//!
//! A config file is TOML with one `key = value` per line and no tables.
//! Unknown keys are rejected. Every key is optional; defaults are listed in
//! [`RunConfig::default`].
//!
//! | key | meaning |
//! |-----|---------|
//! | `seed` | master seed for all random streams |
//! | `diffusion_steps`, `beta_min`, `beta_max` | noise schedule (linear ramp) |
//! | `d_model`, `heads`, `layers`, `ff_dim` | denoiser width, attention heads, encoder layers, feed-forward width |
//! | `enc_dim`, `enc_hidden` | history encoder output and hidden widths |
//! | `t_init`, `t_pred` | observed and predicted frames |
//! | `learning_rate`, `batch_size`, `train_steps`, `checkpoint_every` | optimizer budget |
//! | `grad_clip` | global gradient-norm clip, absent = off |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | Adam moments |
//! | `dataset` | `"synthetic"` or `"files"` |
//! | `synthetic_count`, `synthetic_modes`, `synthetic_noise`, `synthetic_seed`, `synthetic_speed`, `synthetic_max_turn` | synthetic generator |
//! | `test_fraction` | synthetic: trailing fraction of windows held out for sample/eval/sweep |
//! | `scene_files`, `holdout_scene`, `scene_format` | file datasets: paths, leave-one-out scene name, `"ethucy-txt"` |
//! | `coord_scale`, `window_stride` | normalization scale and window stride |
//! | `n_samples` | samples per window |
//! | `eval_windows` | cap on evaluated test windows, 0 = all |
//! | `cloud_stride` | reverse-step stride for exported sample clouds |
//! | `out_dir` | output directory |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{leave_one_out, load_scenes, make_windows, SceneFormat, SyntheticSpec, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::ScheduleKeys;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub diffusion_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,

    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub enc_dim: usize,
    pub enc_hidden: usize,
    pub t_init: usize,
    pub t_pred: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub grad_clip: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub dataset: DatasetKind,
    pub synthetic_count: usize,
    pub synthetic_modes: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    pub synthetic_speed: f64,
    pub synthetic_max_turn: f64,
    pub test_fraction: f64,
    pub scene_files: Vec<PathBuf>,
    pub holdout_scene: Option<String>,
    pub scene_format: SceneFormat,
    pub coord_scale: f64,
    pub window_stride: usize,

    pub n_samples: usize,
    pub eval_windows: usize,
    pub cloud_stride: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScheduleKeys::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let syn = SyntheticSpec::default();
        Self {
            seed: 0,
            diffusion_steps: s.steps,
            beta_min: s.beta_min,
            beta_max: s.beta_max,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            ff_dim: m.ff_dim,
            enc_dim: m.enc_dim,
            enc_hidden: m.enc_hidden,
            t_init: m.t_init,
            t_pred: m.t_pred,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            train_steps: t.steps,
            checkpoint_every: t.checkpoint_every,
            grad_clip: t.grad_clip,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            dataset: DatasetKind::Synthetic,
            synthetic_count: syn.count,
            synthetic_modes: syn.modes,
            synthetic_noise: syn.noise,
            synthetic_seed: syn.seed,
            synthetic_speed: syn.speed,
            synthetic_max_turn: syn.max_turn,
            test_fraction: 0.1,
            scene_files: Vec::new(),
            holdout_scene: None,
            scene_format: SceneFormat::EthUcyTxt,
            coord_scale: 1.0,
            window_stride: 1,
            n_samples: 20,
            eval_windows: 0,
            cloud_stride: 10,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Train and test windows for a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<TrajectoryWindow>,
    pub test: Vec<TrajectoryWindow>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        crate::schedule::NoiseSchedule::from_keys(&self.schedule()).map_err(wrap)?;
        self.model().validate().map_err(wrap)?;
        self.train().validate().map_err(wrap)?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.cloud_stride == 0 || self.window_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(Error::Config("coord_scale must be positive".into()));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                self.synthetic().validate().map_err(wrap)?;
                if !(0.0..1.0).contains(&self.test_fraction) {
                    return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
                }
            }
            DatasetKind::Files => {
                if self.scene_files.is_empty() {
                    return Err(Error::Config("dataset = \"files\" needs scene_files".into()));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleKeys {
        ScheduleKeys { steps: self.diffusion_steps, beta_min: self.beta_min, beta_max: self.beta_max }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ff_dim: self.ff_dim,
            enc_dim: self.enc_dim,
            enc_hidden: self.enc_hidden,
            t_init: self.t_init,
            t_pred: self.t_pred,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.train_steps,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            grad_clip: self.grad_clip,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            modes: self.synthetic_modes,
            noise: self.synthetic_noise,
            count: self.synthetic_count,
            seed: self.synthetic_seed,
            speed: self.synthetic_speed,
            max_turn: self.synthetic_max_turn,
            t_init: self.t_init,
            t_pred: self.t_pred,
        }
    }

    /// Builds the train/test split. Synthetic data keeps the trailing
    /// `test_fraction` of windows for testing (at least one when the
    /// fraction is positive). File datasets use leave-one-out on
    /// `holdout_scene`; without one, every window is used for both.
    pub fn splits(&self) -> Result<Splits> {
        match self.dataset {
            DatasetKind::Synthetic => {
                let mut all = self.synthetic().generate()?;
                let n_test = if self.test_fraction > 0.0 {
                    ((all.len() as f64 * self.test_fraction).round() as usize).clamp(1, all.len())
                } else {
                    0
                };
                let test = all.split_off(all.len() - n_test);
                Ok(Splits { train: all, test })
            }
            DatasetKind::Files => {
                let scenes = load_scenes(&self.scene_files, self.scene_format)?;
                let windows = |s: &crate::data::RawScene| {
                    make_windows(s, self.t_init, self.t_pred, self.window_stride, self.coord_scale)
                };
                match &self.holdout_scene {
                    Some(name) => {
                        let (train_scenes, held) = leave_one_out(&scenes, name)?;
                        let mut train = Vec::new();
                        for s in train_scenes {
                            train.extend(windows(s)?);
                        }
                        Ok(Splits { train, test: windows(held)? })
                    }
                    None => {
                        let mut all = Vec::new();
                        for s in &scenes {
                            all.extend(windows(s)?);
                        }
                        Ok(Splits { train: all.clone(), test: all })
                    }
                }
            }
        }
    }

    /// Test windows, capped by `eval_windows`.
    pub fn eval_set(&self, splits: &Splits) -> Vec<TrajectoryWindow> {
        let n = if self.eval_windows == 0 { splits.test.len() } else { self.eval_windows.min(splits.test.len()) };
        splits.test[..n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("seed = 1\nlearnign_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learnign_rate"), "{e}");
    }

    #[test]
    fn tables_are_rejected() {
        assert!(RunConfig::parse("[model]\nd_model = 8\n").is_err());
    }

    #[test]
    fn keys_map_onto_sections() {
        let c = RunConfig::parse("d_model = 16\nheads = 2\ndiffusion_steps = 50\ntrain_steps = 7\nseed = 9\ngrad_clip = 1.5\n")
            .unwrap();
        assert_eq!(c.model().d_model, 16);
        assert_eq!(c.schedule().steps, 50);
        assert_eq!((c.train().steps, c.train().seed, c.train().grad_clip), (7, 9, Some(1.5)));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("beta_min = 0.1\nbeta_max = 0.01\n").is_err());
        assert!(RunConfig::parse("d_model = 10\nheads = 3\n").is_err());
        assert!(RunConfig::parse("n_samples = 0\n").is_err());
        assert!(RunConfig::parse("dataset = \"files\"\n").is_err());
        assert!(RunConfig::parse("dataset = \"other\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig { grad_clip: Some(2.0), holdout_scene: Some("eth".into()), ..RunConfig::default() };
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn synthetic_split_holds_out_tail() {
        let c = RunConfig::parse("synthetic_count = 50\ntest_fraction = 0.2\neval_windows = 4\n").unwrap();
        let s = c.splits().unwrap();
        assert_eq!((s.train.len(), s.test.len()), (40, 10));
        assert_eq!(s.test[0].agent, 40);
        assert_eq!(c.eval_set(&s).len(), 4);
    }

    #[test]
    fn file_split_is_leave_one_out() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for name in ["a", "b"] {
            let p = dir.path().join(format!("{name}.txt"));
            let text: String = (0..25).map(|f| format!("{} 1 {} 0.0\n", f * 10, f as f64 * 0.4)).collect();
            fs::write(&p, text).unwrap();
            paths.push(p);
        }
        let c = RunConfig {
            dataset: DatasetKind::Files,
            scene_files: paths,
            holdout_scene: Some("b".into()),
            ..RunConfig::default()
        };
        let s = c.splits().unwrap();
        assert_eq!(s.train.len(), 6);
        assert!(s.train.iter().all(|w| w.scene == "a"));
        assert!(s.test.iter().all(|w| w.scene == "b"));
    }
}
