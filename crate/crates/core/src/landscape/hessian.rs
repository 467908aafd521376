use rand::Rng;

use super::Objective;
use crate::error::{Error, Result};
use crate::rng;

/// Largest number of active coordinates [`exact_hessian_trace`] accepts.
pub const EXACT_TRACE_MAX_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub probes: usize,
    /// `vᵀHv` for each probe, in probe order.
    pub values: Vec<f64>,
    /// Finite-difference step used for the Hessian-vector products.
    pub epsilon: f64,
}

impl TraceEstimate {
    /// Standard error of the mean over probes.
    pub fn std_error(&self) -> f64 {
        if self.probes < 2 {
            return f64::NAN;
        }
        let n = self.probes as f64;
        let var = self.values.iter().map(|v| (v - self.estimate).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

fn active_count(objective: &dyn Objective) -> usize {
    objective.active().map_or(objective.dim(), |a| a.iter().filter(|&&b| b).count())
}

/// Base of the finite-difference step. Larger steps make ReLU units flip
/// sign inside the probe interval, and each flip adds a spurious spike to
/// `vᵀHv`; at 1e-3 this biased small-MLP traces upward by over 10%.
pub const FD_STEP_BASE: f64 = 1e-5;

/// `FD_STEP_BASE / √D · (1 + |w|₂)` with `D` the number of active coordinates.
fn fd_step(w: &[f64], active: usize) -> f64 {
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    FD_STEP_BASE / (active.max(1) as f64).sqrt() * (1.0 + norm)
}

fn check_point(objective: &dyn Objective, w: &[f64]) -> Result<()> {
    if w.len() != objective.dim() {
        return Err(Error::shape("hessian", &[objective.dim()], &[w.len()]));
    }
    Ok(())
}

/// `Hv ≈ (∇L(w + εv) − ∇L(w − εv)) / 2ε`, returned as `vᵀHv`.
fn rayleigh(objective: &dyn Objective, w: &[f64], v: &[f64], eps: f64, what: &str) -> Result<f64> {
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let gp = objective.grad(&plus)?;
    let gm = objective.grad(&minus)?;
    let r: f64 = v.iter().zip(gp.iter().zip(&gm)).map(|(vi, (p, m))| vi * (p - m)).sum::<f64>() / (2.0 * eps);
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("Hessian-vector product at {what}")));
    }
    Ok(r)
}

/// Hutchinson's estimator: the mean of `vᵀHv` over Rademacher probes `v`.
/// Inactive coordinates get a zero probe entry. Probe `i` is drawn from RNG
/// stream `i` of `seed`.
pub fn hessian_trace_hutchinson(objective: &dyn Objective, w: &[f64], probes: usize, seed: u64) -> Result<TraceEstimate> {
    check_point(objective, w)?;
    if probes == 0 {
        return Err(Error::invalid("Hutchinson estimate needs at least one probe"));
    }
    let active = objective.active();
    let eps = fd_step(w, active_count(objective));
    let mut values = Vec::with_capacity(probes);
    for p in 0..probes {
        let mut rng = rng::stream(seed, p as u64);
        let v: Vec<f64> = (0..w.len())
            .map(|i| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                match active {
                    Some(a) if !a[i] => 0.0,
                    _ => sign,
                }
            })
            .collect();
        values.push(rayleigh(objective, w, &v, eps, &format!("probe {p}"))?);
    }
    let estimate = values.iter().sum::<f64>() / probes as f64;
    Ok(TraceEstimate { estimate, probes, values, epsilon: eps })
}

/// Sum of the Hessian diagonal, one coordinate direction at a time, using
/// the same finite-difference step as the Hutchinson estimator.
pub fn exact_hessian_trace(objective: &dyn Objective, w: &[f64]) -> Result<f64> {
    check_point(objective, w)?;
    let d = active_count(objective);
    if d > EXACT_TRACE_MAX_DIM {
        return Err(Error::invalid(format!(
            "exact Hessian trace supports at most {EXACT_TRACE_MAX_DIM} active parameters, got {d}"
        )));
    }
    let eps = fd_step(w, d);
    let mut e = vec![0.0; w.len()];
    let mut trace = 0.0;
    for i in 0..w.len() {
        if objective.active().is_some_and(|a| !a[i]) {
            continue;
        }
        e[i] = 1.0;
        trace += rayleigh(objective, w, &e, eps, &format!("coordinate {i}"))?;
        e[i] = 0.0;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::super::testing::{Linear, Quadratic};
    use super::*;

    #[test]
    fn quadratic_trace() {
        let q = Quadratic(vec![1.0, 2.0, 3.0]);
        let w = [0.5, -0.2, 1.0];
        let exact = exact_hessian_trace(&q, &w).unwrap();
        assert!((exact - 6.0).abs() <= 1e-6 * 6.0, "{exact}");
        // diagonal Hessian: every Rademacher probe gives the trace
        let h = hessian_trace_hutchinson(&q, &w, 10, 1).unwrap();
        assert!((h.estimate - 6.0).abs() < 1e-6);
        assert_eq!(h.values.len(), 10);
    }

    #[test]
    fn linear_has_zero_trace() {
        let l = Linear(vec![3.0, -1.0, 2.0, 0.5]);
        let w = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(exact_hessian_trace(&l, &w).unwrap(), 0.0);
        assert!(hessian_trace_hutchinson(&l, &w, 20, 3).unwrap().estimate.abs() < 1e-3);
    }

    #[test]
    fn off_diagonal_quadratic_error_shrinks_with_probes() {
        // L = ½ wᵀAw with A = I + 0.4·(ones - I) on 6 coordinates; Tr(A) = 6
        struct Dense;
        impl Objective for Dense {
            fn dim(&self) -> usize {
                6
            }
            fn loss(&self, w: &[f64]) -> Result<f64> {
                let g = self.grad(w)?;
                Ok(0.5 * g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            }
            fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
                let s: f64 = w.iter().sum();
                Ok(w.iter().map(|x| 0.6 * x + 0.4 * s).collect())
            }
        }
        let w = [0.1; 6];
        let mean_err = |probes: usize| {
            (0..10)
                .map(|r| (hessian_trace_hutchinson(&Dense, &w, probes, 100 + r).unwrap().estimate - 6.0).abs())
                .sum::<f64>()
                / 10.0
        };
        let errs: Vec<f64> = [1, 10, 100, 1000].iter().map(|&p| mean_err(p)).collect();
        assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
        assert!((exact_hessian_trace(&Dense, &w).unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn inactive_coordinates_are_skipped() {
        struct Masked(Quadratic, Vec<bool>);
        impl Objective for Masked {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn loss(&self, w: &[f64]) -> Result<f64> {
                self.0.loss(w)
            }
            fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
                self.0.grad(w)
            }
            fn active(&self) -> Option<&[bool]> {
                Some(&self.1)
            }
        }
        let m = Masked(Quadratic(vec![1.0, 2.0, 3.0]), vec![true, false, true]);
        assert!((exact_hessian_trace(&m, &[0.0; 3]).unwrap() - 4.0).abs() < 1e-9);
        assert!((hessian_trace_hutchinson(&m, &[0.0; 3], 5, 0).unwrap().estimate - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_large_or_empty() {
        let q = Quadratic(vec![1.0; EXACT_TRACE_MAX_DIM + 1]);
        assert!(exact_hessian_trace(&q, &vec![0.0; EXACT_TRACE_MAX_DIM + 1]).is_err());
        assert!(hessian_trace_hutchinson(&q, &vec![0.0; EXACT_TRACE_MAX_DIM + 1], 0, 0).is_err());
    }
}
