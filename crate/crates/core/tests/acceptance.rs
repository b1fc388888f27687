//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::time::{Duration, Instant};

use rand::Rng;
use trajdiff::cli::{cmd_sample, cmd_train};
use trajdiff::config::RunConfig;
use trajdiff::data::{SyntheticSpec, TrajectoryWindow};
use trajdiff::diffusion::{forward_sample_flat, posterior_mean_flat, reparam_mean_flat};
use trajdiff::evaluation::{ade, diversity, evaluate, fde, tradeoff_sweep, SamplingOptions};
use trajdiff::model::{ModelConfig, NoisePredictor, TrajectoryDenoiser};
use trajdiff::numerics::{finite_diff_check, ParamStore};
use trajdiff::rng::{self, stream, Stream};
use trajdiff::schedule::NoiseSchedule;
use trajdiff::training::{noise_batch, train_loop, TrainConfig, TrainRngs};

/// Extended-precision value of the product of (1 - beta_k), k = 1..100, for
/// the linear ramp 1e-4 -> 0.05, from a 50-digit decimal evaluation.
const ALPHA_BAR_100_REFERENCE: f64 = 0.078_234_315_621_868_35;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::build(100, 1e-4, 0.05).unwrap()
}

fn reparameterization_identity() -> Outcome {
    let t = Instant::now();
    let s = schedule();
    let mut rng = stream(101, Stream::Synthetic);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=100);
        let y0: Vec<f64> = (0..24).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let eps = rng::standard_normal_vec(&mut rng, 24);
        let yk = forward_sample_flat(&s, &y0, k, &eps).unwrap();
        let a = reparam_mean_flat(&s, &yk, k, &eps).unwrap();
        let b = posterior_mean_flat(&s, &y0, &yk, k).unwrap();
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    let el = t.elapsed();
    outcome(worst < 1e-10 && el < Duration::from_secs(1), format!("max |err| {worst:.3e}, {el:.2?}"))
}

fn first_step_identity() -> Outcome {
    let c = schedule().posterior_coefficients(1).unwrap();
    let triple = (c.coef_y0, c.coef_yk, c.var);
    outcome(triple == (1.0, 0.0, 0.0), format!("{triple:?}"))
}

/// Product of (1 - beta_k) carried as an unevaluated double-double sum.
fn double_double_product(betas: &[f64]) -> f64 {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for &b in betas {
        let a_hi = 1.0 - b;
        let a_lo = (1.0 - a_hi) - b;
        let p = hi * a_hi;
        let e = hi.mul_add(a_hi, -p);
        let lo_new = e + hi * a_lo + lo * a_hi;
        let s = p + lo_new;
        lo = lo_new - (s - p);
        hi = s;
    }
    hi + lo
}

fn schedule_oracle() -> Outcome {
    let s = schedule();
    let got = s.alpha_bar(100);
    let dd = double_double_product(s.betas());
    let err = (got - ALPHA_BAR_100_REFERENCE).abs().max((got - dd).abs());
    outcome(err < 1e-12, format!("alpha_bar_100 = {got:.17}, reference {ALPHA_BAR_100_REFERENCE:.17}, |err| {err:.2e}"))
}

fn forward_moments() -> Outcome {
    let t = Instant::now();
    let s = schedule();
    let n = 100_000;
    let y0 = [5.0];
    let mut rng = stream(104, Stream::TrainNoise);
    let mut worst = (0.0f64, 0.0f64);
    for k in [1, 50, 100] {
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let eps = rng::standard_normal_vec(&mut rng, 1);
            let y = forward_sample_flat(&s, &y0, k, &eps).unwrap()[0];
            sum += y;
            sq += y * y;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let (m_ref, v_ref) = (s.alpha_bar(k).sqrt() * y0[0], s.one_minus_alpha_bar(k));
        worst.0 = worst.0.max(((mean - m_ref) / m_ref).abs());
        worst.1 = worst.1.max(((var - v_ref) / v_ref).abs());
    }
    let el = t.elapsed();
    outcome(
        worst.0 < 0.01 && worst.1 < 0.02 && el < Duration::from_secs(10),
        format!("mean rel {:.2e}, var rel {:.2e}, {el:.2?}", worst.0, worst.1),
    )
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig { d_model: 8, heads: 2, layers: 1, ff_dim: 8, enc_dim: 4, enc_hidden: 8, t_init: 4, t_pred: 3 };
    let s = NoiseSchedule::build(10, 1e-4, 0.05).unwrap();
    let net = TrajectoryDenoiser::new(cfg, s.steps()).unwrap();
    let mut params = net.init_params(&mut stream(105, Stream::Init)).unwrap();
    let data = SyntheticSpec { count: 3, t_init: 4, t_pred: 3, seed: 105, ..SyntheticSpec::default() }.generate().unwrap();
    let batch: Vec<&TrajectoryWindow> = data.iter().collect();
    let noised = noise_batch(&batch, &s, &mut TrainRngs::new(105)).unwrap();
    let r = finite_diff_check(&mut params, 1e-5, |g, p| {
        let out = net.predict(g, p, &noised.input)?;
        let target = g.constant(noised.eps.clone());
        g.mse(target, out)
    })
    .unwrap();
    outcome(
        r.max_rel_error < 1e-4,
        format!("max rel err {:.2e} over {} entries (worst {})", r.max_rel_error, r.entries_checked, r.worst_param.as_deref().unwrap_or("-")),
    )
}

struct Trained {
    spec: SyntheticSpec,
    net: TrajectoryDenoiser,
    params: ParamStore,
    test: Vec<TrajectoryWindow>,
    init_ade: f64,
    final_ade: f64,
    elapsed: Duration,
    steps: u64,
    sets: Vec<Vec<Vec<[f64; 2]>>>,
}

/// Synthetic run shared by the training, multi-modality and trade-off checks.
const TRAIN_STEPS: u64 = 3000;
const TEST_WINDOWS: usize = 50;
const SEED: u64 = 2024;

fn train_synthetic() -> Trained {
    let t = Instant::now();
    let spec = SyntheticSpec { count: 2000, seed: SEED, ..SyntheticSpec::default() };
    let mut data = spec.generate().unwrap();
    let test = data.split_off(1800)[..TEST_WINDOWS].to_vec();
    let s = schedule();
    let net = TrajectoryDenoiser::new(ModelConfig::default(), 100).unwrap();
    let init = net.init_params(&mut stream(SEED, Stream::Init)).unwrap();
    let opts = SamplingOptions { n_samples: 20, seed: SEED, keep_trace: false };
    let (r0, _) = evaluate(&net, &init, &test, &s, &opts).unwrap();
    let cfg = TrainConfig { steps: TRAIN_STEPS, batch_size: 32, seed: SEED, ..TrainConfig::default() };
    let (params, _) = train_loop(&net, init, &data, &s, &cfg, |_, _| Ok(())).unwrap();
    let (r, sets) = evaluate(&net, &params, &test, &s, &opts).unwrap();
    Trained {
        spec,
        net,
        params,
        test,
        init_ade: r0.ade,
        final_ade: r.ade,
        elapsed: t.elapsed(),
        steps: TRAIN_STEPS,
        sets: sets.into_iter().map(|s| s.samples).collect(),
    }
}

fn training_efficacy(tr: &Trained) -> Outcome {
    let ratio = tr.final_ade / tr.init_ade;
    outcome(
        ratio < 0.3 && tr.steps <= 20_000 && tr.elapsed < Duration::from_secs(15 * 60),
        format!(
            "best-of-20 ADE {:.4} -> {:.4} (ratio {ratio:.4}) after {} steps, {:.1?}",
            tr.init_ade, tr.final_ade, tr.steps, tr.elapsed
        ),
    )
}

fn multi_modality(tr: &Trained) -> Outcome {
    let hw = tr.spec.mode_halfwidth();
    let lines: Vec<_> = (0..tr.spec.modes).map(|m| tr.spec.centerline(m)).collect();
    let covered = tr
        .sets
        .iter()
        .zip(&tr.test)
        .filter(|(samples, w)| {
            lines.iter().all(|l| {
                let abs = w.denormalize_path(l);
                samples.iter().any(|s| ade(s, &abs).unwrap() < hw)
            })
        })
        .count();
    let frac = covered as f64 / tr.test.len() as f64;
    outcome(frac >= 0.8, format!("{covered}/{} windows cover all {} modes (half-width {hw:.4})", tr.test.len(), lines.len()))
}

fn tradeoff_trend(tr: &Trained) -> Outcome {
    let opts = SamplingOptions { n_samples: 20, seed: SEED + 1, keep_trace: true };
    let rows = tradeoff_sweep(&tr.net, &tr.params, &tr.test, &schedule(), &opts).unwrap();
    let (first, at20, last) = (rows[0], rows[20], rows[rows.len() - 1]);
    outcome(
        rows.len() == 101 && last.diversity < first.diversity && last.min3 < at20.min3 && last.min5 < at20.min5,
        format!(
            "diversity {:.3} -> {:.3}; min3 {:.3} -> {:.3}; min5 {:.3} -> {:.3} (step 20 -> final)",
            first.diversity, last.diversity, at20.min3, last.min3, at20.min5, last.min5
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 9,
            train_steps: 100,
            synthetic_count: 400,
            eval_windows: 5,
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let ckpt = cmd_train(&cfg, None).unwrap();
        let pred = cmd_sample(&cfg, &ckpt).unwrap();
        (fs::read(ckpt).unwrap(), fs::read(pred).unwrap())
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("checkpoint {} bytes, predictions {} bytes", a.0.len(), a.1.len()))
}

fn metric_fixtures() -> Outcome {
    let gt = vec![[0.0, 0.0], [1.0, 1.0]];
    let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    let (a, f) = (ade(&off, &gt).unwrap(), fde(&off, &gt).unwrap());
    let collinear = vec![vec![[0.0, 0.0]], vec![[1.0, 0.0]], vec![[2.0, 0.0]]];
    let d = diversity(&collinear).unwrap();
    let same = diversity(&vec![off.clone(); 4]).unwrap();
    outcome(a == 5.0 && f == 5.0 && d == 4.0 / 3.0 && same == 0.0, format!("ade {a}, fde {f}, diversity {d}, identical {same}"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 reparameterization identity", reparameterization_identity()),
        ("2 first-step posterior", first_step_identity()),
        ("3 schedule oracle", schedule_oracle()),
        ("4 forward moments", forward_moments()),
        ("5 gradient check", gradient_check()),
    ];
    let trained = train_synthetic();
    results.push(("6 training efficacy", training_efficacy(&trained)));
    results.push(("7 multi-modality", multi_modality(&trained)));
    results.push(("8 trade-off trend", tradeoff_trend(&trained)));
    results.push(("9 determinism", determinism()));
    results.push(("10 metric fixtures", metric_fixtures()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
