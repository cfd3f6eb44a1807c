//! Central finite-difference gradient checking over a [`ParamStore`].

use super::params::ParamStore;

/// Central-difference estimate of `∂f/∂θ` for every scalar in `store`.
/// `f` must evaluate the objective from the current parameter values only.
pub fn finite_difference<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let n = store.scalar_count();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let orig = *store.scalar_mut(k);
        *store.scalar_mut(k) = orig + eps;
        let up = f(store);
        *store.scalar_mut(k) = orig - eps;
        let down = f(store);
        *store.scalar_mut(k) = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
