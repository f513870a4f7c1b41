//! Central finite-difference comparison for analytic gradients. Used by the
//! test suites; lives in the library so integration tests can share it.

use crate::tape::{ParamId, ParamStore};

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Evaluates `f` (which must return the scalar loss plus per-parameter
/// analytic gradients) and compares each gradient coordinate of `pids`
/// against a central finite difference of the loss.
pub fn check_gradients<F>(store: &mut ParamStore, pids: &[ParamId], mut f: F) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> (f64, Vec<Option<Vec<f64>>>),
{
    let (_, analytic) = f(store);
    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0;
    for &pid in pids {
        let grad = analytic[pid.0].clone().unwrap_or_else(|| vec![0.0; store.get(pid).len()]);
        for i in 0..store.get(pid).len() {
            let orig = store.get(pid).data[i];
            let h = 1e-4 * (1.0 + orig.abs());
            let mut central = |step: f64| {
                store.get_mut(pid).data[i] = orig + step;
                let fp = f(store).0;
                store.get_mut(pid).data[i] = orig - step;
                let fm = f(store).0;
                store.get_mut(pid).data[i] = orig;
                (fp - fm) / (2.0 * step)
            };
            // Richardson extrapolation of two central differences knocks the
            // truncation error down to O(h^4).
            let d_h = central(h);
            let d_half = central(h / 2.0);
            let numeric = (4.0 * d_half - d_h) / 3.0;
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            coords_checked += 1;
        }
    }
    GradCheckReport { max_rel_err, coords_checked }
}
