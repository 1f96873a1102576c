use super::graph::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// max over entries of |analytic − numeric| / max(floor, |numeric|) with
    /// `floor = 4·ε_mach·max(1, |loss|) / eps · 1e6`, the scale below which
    /// central differences are mostly rounding noise
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries: usize,
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let l = build(&mut g)?;
    g.value(l).item()
}

/// Compares reverse-mode gradients of `build`'s loss against central
/// differences for every entry of `params`.
pub fn gradcheck<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    build: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let (grads, loss) = {
        let mut g = Graph::new(store);
        let l = build(&mut g)?;
        (g.backward(l)?, g.value(l).item()?)
    };
    // Difference quotients below this size are dominated by rounding of the
    // loss, so relative errors are measured against at least this scale.
    // An absolute disagreement at the rounding level then reads as 1e-6.
    let floor = 4.0 * f64::EPSILON * loss.abs().max(1.0) / eps * 1e6;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries: 0,
    };
    for &id in params {
        let n = store.value(id).numel();
        let analytic: Vec<f64> = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for (i, &exact) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id)[i] = orig + eps;
            let plus = eval_loss(store, &build);
            store.value_mut(id)[i] = orig - eps;
            let minus = eval_loss(store, &build);
            store.value_mut(id)[i] = orig;
            let name = &store.get(id).name;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::NonFinite(format!(
                        "probing `{name}`[{i}] failed: {e}"
                    )))
                }
                _ => return Err(Error::NonFinite(format!("probing `{name}`[{i}]"))),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (exact - numeric).abs() / numeric.abs().max(floor);
            report.entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Mlp, Rng, Tensor};

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let r = gradcheck(&mut s, &[w], DEFAULT_EPS, |g| {
            let v = g.param(w);
            let sq = g.square(v)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn two_layer_mlp() {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(17);
        let mlp = Mlp::new(&mut s, "m", &[3, 6, 2], Activation::Sigmoid, Activation::Identity, &mut rng);
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let ids = s.ids();
        let r = gradcheck(&mut s, &ids, DEFAULT_EPS, |g| {
            let xi = g.input(x.clone());
            let y = mlp.forward(g, xi)?;
            g.cross_entropy(y, &[0, 1, 1, 0])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn broken_derivative_is_detected() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::scalar(1.5));
        let r = gradcheck(&mut s, &[w], DEFAULT_EPS, |g| {
            let v = g.param(w);
            let d = g.detach(v);
            g.mul(v, d)
        })
        .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert_eq!(r.worst_param, "w");
    }
}
