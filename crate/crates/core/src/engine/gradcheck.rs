//! Central finite-difference gradient checking (64-bit only).

use crate::engine::{Graph, ParamId, ParamStore, Rng, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Coordinates to probe: every trainable coordinate when there are at most
/// `max_coords`, otherwise a seeded uniform sample without replacement.
fn sample_coords(store: &ParamStore<f64>, max_coords: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    if all.len() <= max_coords {
        return all;
    }
    let mut rng = Rng::new(seed);
    let perm = rng.permutation(all.len());
    let mut picked: Vec<(ParamId, usize)> = perm[..max_coords].iter().map(|&k| all[k]).collect();
    picked.sort();
    picked
}

/// Compare a supplied analytic gradient `analytic(id)[i]` against central
/// differences of `value_fn`. Fails with the worst coordinate when the maximum
/// relative error exceeds `tol`.
pub fn check_against<V, A>(
    store: &mut ParamStore<f64>,
    mut value_fn: V,
    analytic: A,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    V: FnMut(&ParamStore<f64>) -> Result<f64>,
    A: Fn(ParamId, usize) -> f64,
{
    let coords = sample_coords(store, max_coords, seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
    };
    for (id, i) in coords {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + eps;
        let fp = value_fn(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - eps;
        let fm = value_fn(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic(id, i);
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((store.get(id).name.clone(), i, a, numeric));
        }
    }
    if report.max_rel_error > tol {
        let (param, index, analytic, numeric) = report.worst.clone().unwrap();
        return Err(Error::GradCheck {
            param,
            index,
            analytic,
            numeric,
            error: report.max_rel_error,
            tol,
        });
    }
    Ok(report)
}

/// Check the engine's reverse-mode gradient of `loss_fn` against central
/// differences with step `eps`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        g.backward(loss, store)?;
    }
    let grads: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let value_fn = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, s)?;
        Ok(g.value(loss).item())
    };
    check_against(store, value_fn, |id, i| grads[id.0][i], eps, tol, max_coords, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with symmetric A
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap());
        let a = Tensor::from_f64(&[3, 3], &[2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                let av = g.constant(a.clone());
                let ax = g.matmul(xv, av)?;
                let prod = g.mul(ax, xv)?;
                Ok(g.sum(prod))
            },
            1e-5,
            1e-9,
            100,
            0,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_f64(&[4], &[0.3, -0.7, 1.1, 2.0]).unwrap());
        // f = Σ x³ but claim ∂f/∂x = 2x
        let vals = store.value(x).to_f64();
        let res = check_against(
            &mut store,
            |s| Ok(s.value(x).data().iter().map(|v| v * v * v).sum()),
            |_, i| 2.0 * vals[i],
            1e-5,
            1e-2,
            100,
            0,
        );
        match res {
            Err(Error::GradCheck { error, .. }) => assert!(error > 1e-2),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
