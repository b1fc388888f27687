use crate::error::Result;

use super::{Graph, ParamStore, Var};

/// Denominator floor for relative errors, so entries whose true gradient is
/// (near) zero are judged on an absolute scale.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, entry by entry over every parameter.
///
/// `f` must build the same scalar on every call. Parameter values are
/// restored before returning; gradients in `params` are left holding the
/// analytic result.
pub fn finite_diff_check<F>(params: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: None, worst_index: 0, entries_checked: 0 };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(params)?;
            params.value_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let analytic = params.grad(id).data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(params.name(id).to_string());
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let id = s.insert("p", random_tensor(2, 3, 1)).unwrap();
        let r = finite_diff_check(&mut s, 1e-5, |g, p| {
            let v = g.param(p, id);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.entries_checked, 6);
    }

    #[test]
    fn no_parameters_gives_zero() {
        let mut s = ParamStore::new();
        let r = finite_diff_check(&mut s, 1e-5, |g, _| {
            let c = g.constant(Tensor::scalar(3.0));
            Ok(g.sum(c))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.entries_checked, 0);
    }

    /// Every differentiable primitive in one composite.
    #[test]
    fn composite_of_all_primitives() {
        let mut s = ParamStore::new();
        let x = s.insert("x", random_tensor(6, 4, 2)).unwrap();
        let w = s.insert("w", random_tensor(4, 4, 3)).unwrap();
        let b = s.insert("b", random_tensor(1, 4, 4)).unwrap();
        let gamma = s.insert("gamma", random_tensor(1, 4, 5)).unwrap();
        let beta = s.insert("beta", random_tensor(1, 4, 6)).unwrap();
        let c = s.insert("c", random_tensor(2, 2, 7)).unwrap();
        let target = random_tensor(6, 6, 8);

        let r = finite_diff_check(&mut s, 1e-5, |g, p| {
            let (x, w, b, gamma, beta, c) =
                (g.param(p, x), g.param(p, w), g.param(p, b), g.param(p, gamma), g.param(p, beta), g.param(p, c));
            let h = g.linear(x, w, b)?;
            let n = g.layer_norm(h, gamma, beta)?;
            let q = g.gelu(n);
            let k = g.tanh(h);
            let a = g.attention(q, k, n, 2, 3)?;
            let s1 = g.sigmoid(a);
            let crep = g.repeat_rows(c, 3)?;
            let cat = g.concat_cols(&[s1, crep])?;
            let t = g.constant(target.clone());
            let prod = g.mul(cat, cat)?;
            let sum = g.add(prod, cat)?;
            let scaled = g.scale(sum, 0.7);
            g.mse(scaled, t)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink() {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::matrix(1, 4, vec![-0.8, -0.3, 0.4, 1.1]).unwrap()).unwrap();
        let r = finite_diff_check(&mut s, 1e-5, |g, p| {
            let v = g.param(p, id);
            let r = g.relu(v);
            let sq = g.mul(r, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
