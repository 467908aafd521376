use crate::error::{Error, Result};

/// Probe size for [`finite_diff_grad`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdStep {
    /// Same step for every coordinate.
    Absolute(f64),
    /// Step `base * (1 + |w_i|)` for coordinate `i`.
    Relative(f64),
}

impl FdStep {
    pub fn at(self, w: f64) -> f64 {
        match self {
            FdStep::Absolute(h) => h,
            FdStep::Relative(h) => h * (1.0 + w.abs()),
        }
    }

    fn base(self) -> f64 {
        match self {
            FdStep::Absolute(h) | FdStep::Relative(h) => h,
        }
    }
}

/// Central-difference gradient of `loss` at `params`.
///
/// Works in `f64` so it can serve as an oracle for the `f32` tape.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], step: FdStep) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step.base() > 0.0 && step.base().is_finite()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut w = params.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = w[i];
        let h = step.at(orig);
        w[i] = orig + h;
        let plus = loss(&w);
        w[i] = orig - h;
        let minus = loss(&w);
        w[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at finite-difference probe of coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let g = finite_diff_grad(|w| w[0] * w[0], &[3.0], FdStep::Absolute(1e-3)).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6, "{}", g[0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], FdStep::Relative(1e-3)).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear() {
        let g = finite_diff_grad(|w| w[0] * w[1], &[2.0, 5.0], FdStep::Absolute(1e-3)).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-9);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let err = finite_diff_grad(
            |w| if w[1] > 1.0 { f64::NAN } else { w[0] },
            &[0.0, 1.0],
            FdStep::Absolute(1e-3),
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_grad(|w| w[0], &[0.0], FdStep::Absolute(0.0)).is_err());
    }
}
