//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{AdcError, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::rng::RngState;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation for `(f(x+h) - f(x-h)) / 2h`.
    pub h: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked fully.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            coords_per_param: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
    /// Coordinates skipped because the loss is not smooth at the probed
    /// scales there (a ReLU kink).
    pub kinks_skipped: usize,
}

const REFINE_THRESHOLD: f64 = 1e-6;
const MAX_REFINEMENTS: usize = 3;
const KINK_DISAGREEMENT: f64 = 1e-3;

fn central_difference<F>(store: &mut ParamStore, id: ParamId, c: usize, h: f64, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    let orig = store.get(id).values[c];
    store.get_mut(id).values[c] = orig + h;
    let plus = loss_fn(store)?;
    store.get_mut(id).values[c] = orig - h;
    let minus = loss_fn(store)?;
    store.get_mut(id).values[c] = orig;
    store.zero_grad();
    Ok((plus - minus) / (2.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the gradient that `loss_fn` accumulates into `store` against
/// central differences on a seeded subset of coordinates.
///
/// A coordinate that disagrees is re-estimated at `h/10` (up to three
/// times) while the estimate keeps converging toward the analytic value.
/// Coordinates whose estimates neither converge nor agree are counted in
/// `kinks_skipped` instead of the error.
///
/// `loss_fn` must be deterministic and may accumulate gradients; the store's
/// gradients are cleared on return and its values restored.
pub fn grad_check<F>(store: &mut ParamStore, cfg: GradCheckConfig, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    if cfg.h <= 0.0 {
        return Err(AdcError::Validation("finite-difference step must be positive".into()));
    }
    store.zero_grad();
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(AdcError::Numerics("loss at the unperturbed point".into()));
    }
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let mut rng = RngState::new(cfg.seed).rng();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
        kinks_skipped: 0,
    };
    let names: Vec<(String, usize)> = store.iter().map(|p| (p.name.clone(), p.len())).collect();
    for (pi, (name, len)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *len <= cfg.coords_per_param {
            (0..*len).collect()
        } else {
            let mut c = sample(&mut rng, *len, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let id = store.id(name).expect("name from the same store");
        for c in coords {
            let orig = store.get(id).values[c];
            store.get_mut(id).values[c] = orig + cfg.h;
            let plus = loss_fn(store)?;
            store.get_mut(id).values[c] = orig - cfg.h;
            let minus = loss_fn(store)?;
            store.get_mut(id).values[c] = orig;
            store.zero_grad();
            if !plus.is_finite() || !minus.is_finite() {
                return Err(AdcError::Numerics(format!("loss with '{name}'[{c}] perturbed")));
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[pi][c];
            let mut err = relative_error(a, numeric);
            // Smooth but strongly curved: the error shrinks ~100x per decade
            // of h. A kink within the current step: the estimates disagree
            // and do not converge. A wrong gradient: they agree.
            let (mut step, mut current, mut kink) = (cfg.h, numeric, false);
            for _ in 0..MAX_REFINEMENTS {
                if err <= REFINE_THRESHOLD {
                    break;
                }
                step /= 10.0;
                let fine = central_difference(store, id, c, step, &mut loss_fn)?;
                let fine_err = relative_error(a, fine);
                if fine_err * 10.0 < err {
                    err = fine_err;
                    current = fine;
                } else {
                    kink = relative_error(current, fine) > KINK_DISAGREEMENT;
                    break;
                }
            }
            if kink {
                report.kinks_skipped += 1;
                continue;
            }
            report.coords_checked += 1;
            if report.coords_checked == 1 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{c}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamMatrix;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert(ParamMatrix::from_values("theta", 3, 2, vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]).unwrap())
            .unwrap();
        let report = grad_check(&mut store, GradCheckConfig::default(), |s| {
            let mut loss = 0.0;
            for p in s.iter_mut() {
                for (v, g) in p.values.iter().zip(p.grad.iter_mut()) {
                    loss += 0.5 * v * v;
                    *g += v;
                }
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.coords_checked, 6);
        assert!(store.iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut store = ParamStore::new();
        store.insert(ParamMatrix::from_values("x", 1, 1, vec![2.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, GradCheckConfig::default(), |s| {
            let p = s.iter_mut().next().unwrap();
            p.grad[0] += 2.0 * p.values[0];
            Ok(p.values[0].powi(3))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert(ParamMatrix::from_values("x", 1, 1, vec![0.0]).unwrap()).unwrap();
        let err = grad_check(&mut store, GradCheckConfig::default(), |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, AdcError::Numerics(_)));
    }

    #[test]
    fn kink_is_skipped_not_blamed() {
        let mut store = ParamStore::new();
        store.insert(ParamMatrix::from_values("x", 1, 2, vec![2e-5, 1.5]).unwrap()).unwrap();
        let report = grad_check(&mut store, GradCheckConfig::default(), |s| {
            let p = s.iter_mut().next().unwrap();
            let (a, b) = (p.values[0], p.values[1]);
            p.grad[0] += if a > 0.0 { 1.0 } else { 0.0 };
            p.grad[1] += 2.0 * b;
            Ok(a.max(0.0) + b * b)
        })
        .unwrap();
        assert_eq!(report.kinks_skipped, 1);
        assert_eq!(report.coords_checked, 1);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn curvature_is_refined() {
        let mut store = ParamStore::new();
        store.insert(ParamMatrix::from_values("x", 1, 1, vec![0.0]).unwrap()).unwrap();
        let report = grad_check(&mut store, GradCheckConfig::default(), |s| {
            let p = s.iter_mut().next().unwrap();
            let y = (50.0 * p.values[0]).exp();
            p.grad[0] += 50.0 * y;
            Ok(y)
        })
        .unwrap();
        assert_eq!(report.kinks_skipped, 0);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
