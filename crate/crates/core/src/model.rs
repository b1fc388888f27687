//! Learnable networks: a temporal history encoder producing the state
//! embedding, and the Transformer noise predictor.
//!
//! Batches are stacked row-wise. For `B` windows with `T` future steps the
//! noisy paths enter as a `[B * T, 2]` matrix (window-major), the histories as
//! `[B, 2 * T_init]`, and one diffusion step index is given per window.
//!
//! Denoiser pipeline, per window:
//!
//! ```text
//! c      = [k, sin k, cos k, f]                      step context
//! h      = M_up(y_k, c) + W_f f + b_f + PE           fused tokens, [T, d]
//! h      = L x pre-norm encoder layer (MHSA + FFN)   bidirectional
//! eps    = M_out(gelu(M_mid(LN(h), c)), c)           d -> d/2 -> 2
//! ```
//!
//! where every `M` is a gated block
//! `(W1 h + b1) * sigmoid(W2 c + b2) + (W3 c + b3)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{FuturePath, NoiseTensor};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Width of the state embedding `f`.
    pub enc_dim: usize,
    /// Hidden width of the history encoder.
    pub enc_hidden: usize,
    pub t_init: usize,
    pub t_pred: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, layers: 3, ff_dim: 128, enc_dim: 32, enc_hidden: 64, t_init: 8, t_pred: 12 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ff_dim", self.ff_dim),
            ("enc_dim", self.enc_dim),
            ("enc_hidden", self.enc_hidden),
            ("t_init", self.t_init),
            ("t_pred", self.t_pred),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::InvalidArgument("d_model must be at least 2".into()));
        }
        if self.t_init < 2 {
            return Err(Error::InvalidArgument("t_init must be at least 2".into()));
        }
        Ok(())
    }

    /// Length of the step context `[k, sin k, cos k, f]`.
    pub fn context_dim(&self) -> usize {
        3 + self.enc_dim
    }

    /// Encoder input: observed positions plus their first differences.
    pub fn history_features(&self) -> usize {
        2 * self.t_init + 2 * (self.t_init - 1)
    }

    fn mid_dim(&self) -> usize {
        (self.d_model / 2).max(1)
    }
}

/// Condition vector produced by the history encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEmbedding(pub Vec<f64>);

/// Step context `[k, sin k, cos k, f]` for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext(pub Vec<f64>);

impl StepContext {
    pub fn new(k: usize, f: &StateEmbedding) -> Self {
        let kf = k as f64;
        let mut v = Vec::with_capacity(3 + f.0.len());
        v.extend_from_slice(&[kf, kf.sin(), kf.cos()]);
        v.extend_from_slice(&f.0);
        Self(v)
    }
}

/// Sinusoidal table `[len, width]`: even columns `sin(pos / 10000^(2i/width))`,
/// odd columns the matching cosine.
pub fn positional_embedding(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in (0..width).step_by(2) {
            let freq = 10000f64.powf(-(i as f64) / width as f64);
            let angle = pos as f64 * freq;
            data[pos * width + i] = angle.sin();
            if i + 1 < width {
                data[pos * width + i + 1] = angle.cos();
            }
        }
    }
    Tensor::matrix(len, width, data).expect("positional table shape")
}

/// Inputs for one batched noise prediction.
#[derive(Debug, Clone)]
pub struct DenoiseInput {
    /// `[B * T_pred, 2]` noisy future paths.
    pub noisy: Tensor,
    /// Diffusion step per window, length `B`.
    pub steps: Vec<usize>,
    /// `[B, 2 * T_init]` observed paths, already normalized.
    pub histories: Tensor,
}

impl DenoiseInput {
    pub fn batch(&self) -> usize {
        self.steps.len()
    }
}

/// Anything that predicts the injected noise from a noisy path, its step and
/// the observed history. The learned network is one implementation; tests use
/// closed-form stand-ins.
pub trait NoisePredictor: Sync {
    fn predict(&self, g: &mut Graph, params: &ParamStore, input: &DenoiseInput) -> Result<Var>;

    fn t_pred(&self) -> usize;
}

/// Encoder plus Transformer denoiser over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TrajectoryDenoiser {
    config: ModelConfig,
    max_step: usize,
    positional: Tensor,
}

impl TrajectoryDenoiser {
    /// `max_step` is the schedule length K; step indices outside `1..=K`
    /// are rejected.
    pub fn new(config: ModelConfig, max_step: usize) -> Result<Self> {
        config.validate()?;
        if max_step == 0 {
            return Err(Error::InvalidArgument("max_step must be positive".into()));
        }
        let positional = positional_embedding(config.t_pred, config.d_model);
        Ok(Self { config, max_step, positional })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn max_step(&self) -> usize {
        self.max_step
    }

    /// Fresh parameters: fan-in scaled uniform weights, zero biases, unit
    /// layer-norm gains.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let c = &self.config;
        let mut s = ParamStore::new();
        let ctx = c.context_dim();
        let d = c.d_model;

        dense(&mut s, rng, "enc.fc1", c.history_features(), c.enc_hidden)?;
        dense(&mut s, rng, "enc.fc2", c.enc_hidden, c.enc_dim)?;

        gated(&mut s, rng, "up", 2, d, ctx)?;
        dense(&mut s, rng, "cond", c.enc_dim, d)?;

        for l in 0..c.layers {
            let p = format!("layer{l}");
            norm(&mut s, &format!("{p}.ln1"), d)?;
            for name in ["q", "k", "v", "o"] {
                dense(&mut s, rng, &format!("{p}.attn.{name}"), d, d)?;
            }
            norm(&mut s, &format!("{p}.ln2"), d)?;
            dense(&mut s, rng, &format!("{p}.ff1"), d, c.ff_dim)?;
            dense(&mut s, rng, &format!("{p}.ff2"), c.ff_dim, d)?;
        }
        norm(&mut s, "final_ln", d)?;
        gated(&mut s, rng, "down1", d, c.mid_dim(), ctx)?;
        gated(&mut s, rng, "down2", c.mid_dim(), 2, ctx)?;
        Ok(s)
    }

    fn history_tensor(&self, histories: &[&[[f64; 2]]]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(histories.len() * 2 * c.t_init);
        for h in histories {
            if h.len() != c.t_init {
                return Err(Error::Shape(format!("history has {} points, expected {}", h.len(), c.t_init)));
            }
            data.extend(h.iter().flatten());
        }
        Tensor::matrix(histories.len(), 2 * c.t_init, data)
    }

    /// Builds `[B, enc_dim]` state embeddings from `[B, 2 * T_init]` histories.
    pub fn encode_history_graph(&self, g: &mut Graph, params: &ParamStore, histories: &Tensor) -> Result<Var> {
        let c = &self.config;
        if histories.cols() != 2 * c.t_init {
            return Err(Error::Shape(format!(
                "history width {} does not match t_init {}",
                histories.cols(),
                c.t_init
            )));
        }
        let feats = history_features(histories, c.t_init)?;
        let x = g.constant(feats);
        let h = apply_dense(g, params, "enc.fc1", x)?;
        let h = g.tanh(h);
        apply_dense(g, params, "enc.fc2", h)
    }

    /// Single-window convenience wrapper around the batched encoder.
    pub fn encode_history(&self, params: &ParamStore, history: &[[f64; 2]]) -> Result<StateEmbedding> {
        let t = self.history_tensor(&[history])?;
        let mut g = Graph::new();
        let f = self.encode_history_graph(&mut g, params, &t)?;
        Ok(StateEmbedding(g.value(f).data().to_vec()))
    }

    /// `[B, 3 + enc_dim]` step contexts.
    fn context_graph(&self, g: &mut Graph, steps: &[usize], f: Var) -> Result<Var> {
        let mut data = Vec::with_capacity(steps.len() * 3);
        for &k in steps {
            if k == 0 || k > self.max_step {
                return Err(Error::StepOutOfRange { step: k, max: self.max_step });
            }
            let kf = k as f64;
            data.extend_from_slice(&[kf, kf.sin(), kf.cos()]);
        }
        let kt = g.constant(Tensor::matrix(steps.len(), 3, data)?);
        g.concat_cols(&[kt, f])
    }

    /// Noise prediction given already-computed embeddings `f` (`[B, enc_dim]`).
    pub fn denoise_graph(&self, g: &mut Graph, params: &ParamStore, noisy: Var, steps: &[usize], f: Var) -> Result<Var> {
        let c = &self.config;
        let (b, t) = (steps.len(), c.t_pred);
        let nv = g.value(noisy);
        if nv.rows() != b * t || nv.cols() != 2 {
            return Err(Error::Shape(format!(
                "noisy paths {:?} do not match {b} windows of {t} steps",
                nv.shape()
            )));
        }
        if g.value(f).rows() != b || g.value(f).cols() != c.enc_dim {
            return Err(Error::Shape(format!("state embedding {:?}", g.value(f).shape())));
        }
        let ctx = self.context_graph(g, steps, f)?;

        // fused tokens
        let up = gated_block(g, params, "up", noisy, ctx, t)?;
        let cond = apply_dense(g, params, "cond", f)?;
        let cond = g.repeat_rows(cond, t)?;
        let fused = g.add(up, cond)?;
        let pe = g.constant(tile_rows(&self.positional, b));
        let mut h = g.add(fused, pe)?;

        for l in 0..c.layers {
            h = self.encoder_layer(g, params, &format!("layer{l}"), h)?;
        }
        let h = apply_norm(g, params, "final_ln", h)?;
        let h = gated_block(g, params, "down1", h, ctx, t)?;
        let h = g.gelu(h);
        gated_block(g, params, "down2", h, ctx, t)
    }

    fn encoder_layer(&self, g: &mut Graph, params: &ParamStore, p: &str, h: Var) -> Result<Var> {
        let c = &self.config;
        let x = apply_norm(g, params, &format!("{p}.ln1"), h)?;
        let q = apply_dense(g, params, &format!("{p}.attn.q"), x)?;
        let k = apply_dense(g, params, &format!("{p}.attn.k"), x)?;
        let v = apply_dense(g, params, &format!("{p}.attn.v"), x)?;
        let a = g.attention(q, k, v, c.heads, c.t_pred)?;
        let a = apply_dense(g, params, &format!("{p}.attn.o"), a)?;
        let h = g.add(h, a)?;

        let x = apply_norm(g, params, &format!("{p}.ln2"), h)?;
        let x = apply_dense(g, params, &format!("{p}.ff1"), x)?;
        let x = g.gelu(x);
        let x = apply_dense(g, params, &format!("{p}.ff2"), x)?;
        g.add(h, x)
    }

    /// Single-window convenience wrapper: predicted noise for `yk` at step `k`
    /// given a precomputed embedding.
    pub fn denoise(&self, params: &ParamStore, yk: &FuturePath, k: usize, f: &StateEmbedding) -> Result<NoiseTensor> {
        if yk.len() != self.config.t_pred {
            return Err(Error::Shape(format!("path has {} points, expected {}", yk.len(), self.config.t_pred)));
        }
        if f.0.len() != self.config.enc_dim {
            return Err(Error::Shape(format!("embedding has {} values, expected {}", f.0.len(), self.config.enc_dim)));
        }
        let mut g = Graph::new();
        let noisy = g.constant(Tensor::matrix(yk.len(), 2, yk.as_flat().to_vec())?);
        let fv = g.constant(Tensor::matrix(1, f.0.len(), f.0.clone())?);
        let out = self.denoise_graph(&mut g, params, noisy, &[k], fv)?;
        Ok(NoiseTensor::from_flat(g.value(out).data()))
    }

    /// Stacks single windows into a [`DenoiseInput`].
    pub fn input_for(&self, noisy: &[&FuturePath], steps: &[usize], histories: &[&[[f64; 2]]]) -> Result<DenoiseInput> {
        if noisy.len() != steps.len() || histories.len() != steps.len() {
            return Err(Error::Shape("batch component lengths differ".into()));
        }
        let mut data = Vec::with_capacity(noisy.len() * self.config.t_pred * 2);
        for p in noisy {
            if p.len() != self.config.t_pred {
                return Err(Error::Shape(format!("path has {} points, expected {}", p.len(), self.config.t_pred)));
            }
            data.extend_from_slice(p.as_flat());
        }
        Ok(DenoiseInput {
            noisy: Tensor::matrix(noisy.len() * self.config.t_pred, 2, data)?,
            steps: steps.to_vec(),
            histories: self.history_tensor(histories)?,
        })
    }
}

impl NoisePredictor for TrajectoryDenoiser {
    fn predict(&self, g: &mut Graph, params: &ParamStore, input: &DenoiseInput) -> Result<Var> {
        if input.histories.rows() != input.batch() {
            return Err(Error::Shape("history rows do not match batch".into()));
        }
        let f = self.encode_history_graph(g, params, &input.histories)?;
        let noisy = g.constant(input.noisy.clone());
        self.denoise_graph(g, params, noisy, &input.steps, f)
    }

    fn t_pred(&self) -> usize {
        self.config.t_pred
    }
}

/// Gated block `(h W1 + b1) * sigmoid(c W2 + b2) + (c W3 + b3)`.
///
/// `h` is `[B * seq, in]`, `ctx` is `[B, ctx_dim]`; the context terms are
/// shared by all `seq` rows of a window.
pub fn gated_block(g: &mut Graph, params: &ParamStore, prefix: &str, h: Var, ctx: Var, seq: usize) -> Result<Var> {
    let [w1, b1, w2, b2, w3, b3] = ["w1", "b1", "w2", "b2", "w3", "b3"].map(|n| format!("{prefix}.{n}"));
    let (w1, b1, w2, b2, w3, b3) = (
        param(g, params, &w1)?,
        param(g, params, &b1)?,
        param(g, params, &w2)?,
        param(g, params, &b2)?,
        param(g, params, &w3)?,
        param(g, params, &b3)?,
    );
    if g.value(h).rows() != g.value(ctx).rows() * seq {
        return Err(Error::Shape(format!(
            "gated block {prefix}: {} rows vs {} contexts of {seq}",
            g.value(h).rows(),
            g.value(ctx).rows()
        )));
    }
    let main = g.linear(h, w1, b1)?;
    let gate = g.linear(ctx, w2, b2)?;
    let gate = g.sigmoid(gate);
    let shift = g.linear(ctx, w3, b3)?;
    let gate = g.repeat_rows(gate, seq)?;
    let shift = g.repeat_rows(shift, seq)?;
    let gated = g.mul(main, gate)?;
    g.add(gated, shift)
}

fn param(g: &mut Graph, params: &ParamStore, name: &str) -> Result<Var> {
    let id = params.id(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
    Ok(g.param(params, id))
}

fn apply_dense(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = param(g, params, &format!("{prefix}.w"))?;
    let b = param(g, params, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

fn apply_norm(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = param(g, params, &format!("{prefix}.g"))?;
    let beta = param(g, params, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

fn dense<R: Rng + ?Sized>(s: &mut ParamStore, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    s.insert(format!("{prefix}.w"), uniform(rng, fan_in, fan_out))?;
    s.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok(())
}

fn gated<R: Rng + ?Sized>(
    s: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    ctx: usize,
) -> Result<()> {
    s.insert(format!("{prefix}.w1"), uniform(rng, fan_in, fan_out))?;
    s.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, fan_out]))?;
    s.insert(format!("{prefix}.w2"), uniform(rng, ctx, fan_out))?;
    s.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, fan_out]))?;
    s.insert(format!("{prefix}.w3"), uniform(rng, ctx, fan_out))?;
    s.insert(format!("{prefix}.b3"), Tensor::zeros(&[1, fan_out]))?;
    Ok(())
}

fn norm(s: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    s.insert(format!("{prefix}.g"), Tensor::full(&[1, width], 1.0))?;
    s.insert(format!("{prefix}.b"), Tensor::zeros(&[1, width]))?;
    Ok(())
}

fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(t.rows() * times, t.cols(), data).expect("tile shape")
}

/// `[B, 2 * T_init]` positions -> `[B, 2 * T_init + 2 * (T_init - 1)]`
/// positions followed by first differences.
fn history_features(histories: &Tensor, t_init: usize) -> Result<Tensor> {
    let b = histories.rows();
    let width = 2 * t_init + 2 * (t_init - 1);
    let mut data = Vec::with_capacity(b * width);
    for r in 0..b {
        let row = histories.row(r);
        data.extend_from_slice(row);
        for t in 1..t_init {
            data.push(row[2 * t] - row[2 * (t - 1)]);
            data.push(row[2 * t + 1] - row[2 * (t - 1) + 1]);
        }
    }
    Tensor::matrix(b, width, data)
}
