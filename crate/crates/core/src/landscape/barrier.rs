use std::io::Write;

use rayon::prelude::*;

use super::Objective;
use crate::error::{Error, Result};

/// Interpolation points used when the caller has no preference.
pub const DEFAULT_GRID: usize = 21;

/// Losses along the segment `(1-λ)a + λb`.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierScan {
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    pub errors: Vec<Option<f64>>,
    /// `max_λ L(λ) - max(L(0), L(1))`, never negative.
    pub barrier: f64,
    /// Tolerance below which the endpoints count as linearly connected.
    pub margin: f64,
}

impl BarrierScan {
    pub fn is_connected(&self) -> bool {
        self.barrier <= self.margin
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "lambda,loss,error")?;
        for ((l, loss), err) in self.lambdas.iter().zip(&self.losses).zip(&self.errors) {
            match err {
                Some(e) => writeln!(out, "{l},{loss},{e}")?,
                None => writeln!(out, "{l},{loss},")?,
            }
        }
        Ok(())
    }
}

/// Evaluates `objective` on `grid` evenly spaced points from `a` to `b`,
/// endpoints included. No mask is re-applied along the way.
pub fn linear_path_losses(
    objective: &dyn Objective,
    a: &[f64],
    b: &[f64],
    grid: usize,
    margin: f64,
) -> Result<BarrierScan> {
    if grid < 2 {
        return Err(Error::invalid("barrier grid needs at least 2 points"));
    }
    if a.len() != b.len() || a.len() != objective.dim() {
        return Err(Error::shape("linear_path_losses", &[objective.dim(), objective.dim()], &[a.len(), b.len()]));
    }
    let lambdas: Vec<f64> = (0..grid).map(|i| i as f64 / (grid - 1) as f64).collect();
    let evals: Vec<(f64, Option<f64>)> = lambdas
        .par_iter()
        .map(|&l| {
            let w: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - l) * x + l * y).collect();
            objective.evaluate(&w)
        })
        .collect::<Result<_>>()?;
    let (losses, errors): (Vec<f64>, Vec<Option<f64>>) = evals.into_iter().unzip();
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("loss at lambda {}", lambdas[i])));
    }
    let peak = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ends = losses[0].max(losses[grid - 1]);
    Ok(BarrierScan {
        lambdas,
        losses,
        errors,
        barrier: (peak - ends).max(0.0),
        margin,
    })
}
