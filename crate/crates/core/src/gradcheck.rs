//! Central finite differences, the oracle every analytic backward pass in
//! this crate is validated against.

use crate::error::{Error, Result};

/// Central difference gradient of `f` at `point` with step `h`:
/// component i is `(f(x + h e_i) - f(x - h e_i)) / (2 h)`.
pub fn central_diff<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "central_diff",
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over components whose reference magnitude
    /// exceeds `magnitude_floor`.
    pub max_rel_err: f64,
    /// Index of the worst component, if any was compared.
    pub worst_index: Option<usize>,
    /// Number of components that cleared the magnitude floor.
    pub compared: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// True when the proxy-triplet term at `embedding` is safely differentiable
/// for a finite-difference probe: the hinge and the mining argmax/argmin all
/// sit at least `slack` away from their switch points. Probes at rejected
/// points would straddle a kink and report spurious disagreement.
pub fn triplet_probe_is_smooth(
    table: &crate::proxy::ProxyTable,
    embedding: &[f64],
    identity: usize,
    margin: f64,
    slack: f64,
) -> bool {
    use crate::proxy::squared_euclidean;
    let mut pos: Vec<(f64, (usize, usize))> = Vec::new();
    let mut neg: Vec<(f64, (usize, usize))> = Vec::new();
    for row in 0..table.n_id() {
        for s in 0..table.k() {
            if !table.is_filled(row, s) {
                continue;
            }
            let d = squared_euclidean(embedding, table.slot(row, s));
            if row == identity {
                pos.push((d, (row, s)));
            } else {
                neg.push((d, (row, s)));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return false;
    }
    pos.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    neg.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let hinge = margin + pos[0].0 - neg[0].0;
    if hinge.abs() <= slack {
        return false;
    }
    // A near-tie only matters if flipping to the runner-up would change the
    // gradient: ties between nearly identical proxies are harmless.
    let risky_tie = |ranked: &[(f64, (usize, usize))]| -> bool {
        if ranked.len() < 2 {
            return false;
        }
        let gap = (ranked[0].0 - ranked[1].0).abs();
        if gap > slack {
            return false;
        }
        let a = table.slot(ranked[0].1 .0, ranked[0].1 .1);
        let b = table.slot(ranked[1].1 .0, ranked[1].1 .1);
        squared_euclidean(a, b).sqrt() > slack
    };
    !risky_tie(&pos) && !risky_tie(&neg)
}

/// Compares `analytic` to the `numeric` reference. Components where both
/// magnitudes are below `magnitude_floor` carry no signal and are skipped.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], magnitude_floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_rel_err: f64 = 0.0;
    let mut worst_index = None;
    let mut compared = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale <= magnitude_floor {
            continue;
        }
        compared += 1;
        let rel = (a - n).abs() / scale;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        compared,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = central_diff(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = central_diff(|_| 4.25, &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_on_quadratics_across_step_sizes() {
        // f(x, y) = 2x^2 - 3xy + y + 5, grad = (4x - 3y, -3x + 1)
        let f = |v: &[f64]| 2.0 * v[0] * v[0] - 3.0 * v[0] * v[1] + v[1] + 5.0;
        let point = [1.3, -0.7];
        let expect = [4.0 * 1.3 - 3.0 * (-0.7), -3.0 * 1.3 + 1.0];
        for h in [1e-5, 1e-4, 1e-3] {
            let g = central_diff(f, &point, h).unwrap();
            for (gi, ei) in g.iter().zip(expect.iter()) {
                assert!(
                    ((gi - ei) / ei).abs() < 1e-8,
                    "h={h}: got {gi}, want {ei}"
                );
            }
        }
    }

    #[test]
    fn non_finite_values_are_reported() {
        let res = central_diff(|x| x[0].ln(), &[0.0], 1e-6);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn compare_skips_below_floor() {
        let report = compare_gradients(&[1e-9, 2.0], &[5e-9, 2.002], 1e-6);
        assert_eq!(report.compared, 1);
        assert!(report.max_rel_err < 2e-3);
        assert_eq!(report.worst_index, Some(1));
    }
}
