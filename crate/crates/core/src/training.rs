//! Noise-matching training: Adam, the per-batch step, and the loop.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_order, TrajectoryWindow};
use crate::diffusion::forward_sample_flat;
use crate::error::{Error, Result};
use crate::model::{DenoiseInput, NoisePredictor};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidArgument("adam moments must lie in [0, 1) and eps be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0, beta1, beta2, eps }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }
}

/// One bias-corrected Adam step using the gradients held in `params`.
pub fn adam_update(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("adam state for {} params, store has {}", state.m.len(), params.len())));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let (value, grad) = params.value_and_grad_mut(id);
        if state.m[i].shape() != grad.shape() {
            return Err(Error::Shape(format!("adam moment shape mismatch at parameter {i}")));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Random streams consumed by training.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub steps: rng::Rng,
    pub noise: rng::Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self { steps: rng::stream(seed, Stream::Steps), noise: rng::stream(seed, Stream::TrainNoise) }
    }
}

/// Noised inputs and regression targets for one batch: per window one step
/// `k ~ U{1..K}` and one `eps ~ N(0, I)`.
pub struct NoisedBatch {
    pub input: DenoiseInput,
    pub eps: Tensor,
}

pub fn noise_batch(batch: &[&TrajectoryWindow], s: &NoiseSchedule, rngs: &mut TrainRngs) -> Result<NoisedBatch> {
    let Some(first) = batch.first() else {
        return Err(Error::InvalidArgument("empty training batch".into()));
    };
    let (t_init, t_pred) = (first.history.len(), first.future.len());
    let mut steps = Vec::with_capacity(batch.len());
    let mut noisy = Vec::with_capacity(batch.len() * t_pred * 2);
    let mut eps_all = Vec::with_capacity(batch.len() * t_pred * 2);
    let mut hist = Vec::with_capacity(batch.len() * t_init * 2);
    for w in batch {
        if w.history.len() != t_init || w.future.len() != t_pred {
            return Err(Error::Shape("windows in a batch must share T_init and T_pred".into()));
        }
        let k = rngs.steps.gen_range(1..=s.steps());
        let eps = rng::standard_normal_vec(&mut rngs.noise, 2 * t_pred);
        let y0: Vec<f64> = w.future.iter().flatten().copied().collect();
        noisy.extend(forward_sample_flat(s, &y0, k, &eps)?);
        eps_all.extend(eps);
        hist.extend(w.history.iter().flatten());
        steps.push(k);
    }
    let b = batch.len();
    Ok(NoisedBatch {
        input: DenoiseInput {
            noisy: Tensor::matrix(b * t_pred, 2, noisy)?,
            steps,
            histories: Tensor::matrix(b, 2 * t_init, hist)?,
        },
        eps: Tensor::matrix(b * t_pred, 2, eps_all)?,
    })
}

/// Mean squared noise-prediction error for a prepared batch, with gradients
/// accumulated into `params`.
pub fn loss_and_grad<P: NoisePredictor + ?Sized>(net: &P, params: &mut ParamStore, batch: &NoisedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let pred = net.predict(&mut g, params, &batch.input)?;
    let target = g.constant(batch.eps.clone());
    let loss = g.mse(target, pred)?;
    g.backward(loss, params)?;
    Ok(g.value(loss).item())
}

/// One optimizer step on one batch. Returns the batch loss measured before
/// the update.
pub fn train_step<P: NoisePredictor + ?Sized>(
    net: &P,
    params: &mut ParamStore,
    adam: &mut AdamState,
    batch: &[&TrajectoryWindow],
    s: &NoiseSchedule,
    rngs: &mut TrainRngs,
    cfg: &TrainConfig,
) -> Result<f64> {
    let noised = noise_batch(batch, s, rngs)?;
    params.zero_grads();
    let loss = loss_and_grad(net, params, &noised)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: adam.step + 1, loss });
    }
    if let Some(clip) = cfg.grad_clip {
        let norm = params.grad_norm();
        if norm > clip {
            params.scale_grads(clip / norm);
        }
    }
    adam_update(params, adam, cfg.learning_rate)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Runs `cfg.steps` optimizer steps over shuffled batches (the trailing
/// partial batch of each epoch is dropped). `on_checkpoint` is called every
/// `cfg.checkpoint_every` steps and after the final step.
pub fn train_loop<P, F>(
    net: &P,
    mut params: ParamStore,
    dataset: &[TrajectoryWindow],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<(ParamStore, Vec<LogRow>)>
where
    P: NoisePredictor + ?Sized,
    F: FnMut(u64, &ParamStore) -> Result<()>,
{
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok((params, Vec::new()));
    }
    if dataset.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} windows is smaller than one batch of {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let mut adam = AdamState::from_config(&params, cfg);
    let mut rngs = TrainRngs::new(cfg.seed);
    let per_epoch = dataset.len() / cfg.batch_size;
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut order = Vec::new();

    for step in 1..=cfg.steps {
        let slot = ((step - 1) % per_epoch as u64) as usize;
        if slot == 0 {
            order = shuffled_order(dataset.len(), cfg.seed, (step - 1) / per_epoch as u64);
        }
        let batch: Vec<&TrajectoryWindow> =
            order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size].iter().map(|&i| &dataset[i]).collect();
        let loss = train_step(net, &mut params, &mut adam, &batch, s, &mut rngs, cfg)?;
        log.push(LogRow { step, loss, wall_ms: started.elapsed().as_millis() as u64 });
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || step == cfg.steps {
            on_checkpoint(step, &params)?;
        }
    }
    Ok((params, log))
}
