//! SGD with momentum, learning-rate schedules and stochastic weight averaging.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// `lr0 · ½(1 + cos(π t / total_steps))`, defined for `t ≤ total_steps`.
    Cosine { total_steps: usize },
    /// `(step, lr)` breakpoints in ascending step order; `lr0` before the first.
    Piecewise(Vec<(usize, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if let Schedule::Piecewise(points) = &self.schedule {
            if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(Error::invalid("piecewise schedule steps must be strictly increasing"));
            }
            if points.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
                return Err(Error::invalid("piecewise learning rates must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        match &self.schedule {
            Schedule::Constant => Ok(self.lr0),
            Schedule::Cosine { total_steps } => {
                if t > *total_steps || *total_steps == 0 {
                    return Err(Error::invalid(format!(
                        "step {t} is outside the cosine schedule of {total_steps} steps"
                    )));
                }
                let frac = t as f64 / *total_steps as f64;
                Ok(self.lr0 * 0.5 * (1.0 + (PI * frac).cos()))
            }
            Schedule::Piecewise(points) => Ok(points
                .iter()
                .take_while(|(s, _)| *s <= t)
                .last()
                .map_or(self.lr0, |&(_, lr)| lr)),
        }
    }

    /// Same optimizer with the schedule replaced.
    pub fn with_schedule(&self, schedule: Schedule) -> Self {
        SgdConfig { schedule, ..self.clone() }
    }
}

/// One momentum-SGD update.
///
/// `g' = (g + wd·decay·w) ∘ mask`, `v ← μ v + g'`, `w ← w − lr v`. Coordinates
/// with `mask == 0` end the step with both weight and velocity at exactly 0.
#[allow(clippy::too_many_arguments)]
pub fn sgd_update(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: &[f32],
    decay: &[f32],
    step: usize,
) -> Result<()> {
    let d = params.len();
    if grads.len() != d || velocity.len() != d || mask.len() != d || decay.len() != d {
        return Err(Error::shape("sgd_step", &[d], &[grads.len(), velocity.len(), mask.len(), decay.len()]));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i} at step {step}")));
    }
    let (lr, mu, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for i in 0..d {
        if mask[i] == 0.0 {
            params[i] = 0.0;
            velocity[i] = 0.0;
            continue;
        }
        let g = (grads[i] + wd * decay[i] * params[i]) * mask[i];
        velocity[i] = mu * velocity[i] + g;
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

/// [`sgd_update`] at the scheduled learning rate for step `t`.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    cfg: &SgdConfig,
    t: usize,
    mask: &[f32],
    decay: &[f32],
) -> Result<()> {
    let lr = cfg.lr_at(t)?;
    sgd_update(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay, mask, decay, t)
}

/// Running mean of parameter snapshots along one trajectory.
#[derive(Clone, Debug)]
pub struct SwaAccumulator {
    mean: Vec<f64>,
    count: usize,
    period: usize,
    start_step: usize,
}

impl SwaAccumulator {
    pub fn new(dim: usize, start_step: usize, period: usize) -> Self {
        SwaAccumulator {
            mean: vec![0.0; dim],
            count: 0,
            period: period.max(1),
            start_step,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// Whether a snapshot is taken once `completed` updates have been applied.
    pub fn is_due(&self, completed: usize) -> bool {
        completed > self.start_step && (completed - self.start_step).is_multiple_of(self.period)
    }

    /// `mean ← (n·mean + w) / (n + 1)`.
    pub fn update(&mut self, params: &[f32]) {
        assert_eq!(params.len(), self.mean.len(), "snapshot length");
        let n = self.count as f64;
        for (m, &w) in self.mean.iter_mut().zip(params) {
            *m = (n * *m + w as f64) / (n + 1.0);
        }
        self.count += 1;
    }

    /// Snapshots `params` if one is due after `completed` updates.
    pub fn update_at(&mut self, params: &[f32], completed: usize) -> bool {
        let due = self.is_due(completed);
        if due {
            self.update(params);
        }
        due
    }

    pub fn finalize(&self) -> Result<Vec<f32>> {
        if self.count == 0 {
            return Err(Error::invalid("SWA: no snapshots collected"));
        }
        Ok(self.mean.iter().map(|&m| m as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr0: f64, momentum: f64, schedule: Schedule) -> SgdConfig {
        SgdConfig { lr0, momentum, weight_decay: 0.0, schedule }
    }

    #[test]
    fn plain_step() {
        let (mut w, mut v) = (vec![1.0f32], vec![0.0f32]);
        sgd_step(&mut w, &[0.5], &mut v, &cfg(0.1, 0.0, Schedule::Constant), 0, &[1.0], &[1.0]).unwrap();
        assert_eq!(w[0], 1.0 - 0.1f32 * 0.5);
        assert!((w[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let c = cfg(0.1, 0.9, Schedule::Constant);
        let (mut w, mut v) = (vec![0.0f32], vec![0.0f32]);
        sgd_step(&mut w, &[1.0], &mut v, &c, 0, &[1.0], &[1.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-7 && (w[0] + 0.1).abs() < 1e-7);
        sgd_step(&mut w, &[1.0], &mut v, &c, 1, &[1.0], &[1.0]).unwrap();
        assert!((v[0] - 1.9).abs() < 1e-6 && (w[0] + 0.29).abs() < 1e-6, "{w:?} {v:?}");
    }

    #[test]
    fn masked_coordinate_stays_zero() {
        let c = SgdConfig { weight_decay: 0.1, ..cfg(0.1, 0.9, Schedule::Constant) };
        let (mut w, mut v) = (vec![0.0f32, 1.0], vec![0.0f32, 0.0]);
        for t in 0..5 {
            sgd_step(&mut w, &[3.0, -2.0], &mut v, &c, t, &[0.0, 1.0], &[1.0, 1.0]).unwrap();
            assert_eq!(w[0], 0.0);
            assert_eq!(v[0], 0.0);
        }
    }

    #[test]
    fn weight_decay_skips_flagged_coordinates() {
        let c = SgdConfig { weight_decay: 0.5, ..cfg(1.0, 0.0, Schedule::Constant) };
        let (mut w, mut v) = (vec![2.0f32, 2.0], vec![0.0f32; 2]);
        sgd_step(&mut w, &[0.0, 0.0], &mut v, &c, 0, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let c = cfg(0.1, 0.0, Schedule::Constant);
        let (mut w, mut v) = (vec![1.0f32, 1.0], vec![0.0f32; 2]);
        let err = sgd_step(&mut w, &[0.0, f32::NAN], &mut v, &c, 17, &[1.0; 2], &[1.0; 2]).unwrap_err();
        assert!(err.to_string().contains("step 17"), "{err}");
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn plain_gd_equivalence() {
        let c = cfg(0.05, 0.0, Schedule::Constant);
        let (mut w, mut v) = (vec![0.3f32, -1.2], vec![0.0f32; 2]);
        let g = [0.7f32, -0.4];
        let expect: Vec<f32> = w.iter().zip(&g).map(|(a, b)| a - 0.05f32 * b).collect();
        sgd_step(&mut w, &g, &mut v, &c, 0, &[1.0; 2], &[1.0; 2]).unwrap();
        assert_eq!(w, expect);
    }

    #[test]
    fn cosine_schedule() {
        let c = cfg(0.2, 0.9, Schedule::Cosine { total_steps: 100 });
        assert_eq!(c.lr_at(0).unwrap(), 0.2);
        assert!(c.lr_at(100).unwrap().abs() < 1e-15);
        assert!((c.lr_at(50).unwrap() - 0.1).abs() < 1e-15);
        assert!(c.lr_at(101).is_err());
    }

    #[test]
    fn piecewise_schedule() {
        let c = cfg(0.1, 0.0, Schedule::Piecewise(vec![(10, 0.05), (20, 0.01)]));
        assert_eq!(c.lr_at(0).unwrap(), 0.1);
        assert_eq!(c.lr_at(10).unwrap(), 0.05);
        assert_eq!(c.lr_at(25).unwrap(), 0.01);
        c.validate().unwrap();
        let bad = cfg(0.1, 0.0, Schedule::Piecewise(vec![(10, 0.05), (5, 0.01)]));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn swa_mean_of_scalars() {
        let mut acc = SwaAccumulator::new(1, 0, 1);
        for w in [1.0, 2.0, 3.0] {
            acc.update(&[w]);
        }
        assert_eq!(acc.finalize().unwrap(), vec![2.0]);
    }

    #[test]
    fn swa_single_snapshot_is_exact() {
        let w = [0.1f32, -3.7, 1e-8];
        let mut acc = SwaAccumulator::new(3, 0, 1);
        acc.update(&w);
        assert_eq!(acc.finalize().unwrap(), w.to_vec());
    }

    #[test]
    fn swa_constant_trajectory() {
        let mut acc = SwaAccumulator::new(2, 0, 1);
        for _ in 0..9 {
            acc.update(&[0.3, -0.7]);
        }
        assert_eq!(acc.finalize().unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn swa_empty_is_error() {
        let acc = SwaAccumulator::new(2, 0, 1);
        assert!(acc.finalize().unwrap_err().to_string().contains("no snapshots collected"));
    }

    #[test]
    fn last_quarter_of_150_epochs_gives_38_snapshots() {
        // one step per epoch; the SWA phase starts after floor(0.75 * 150) epochs
        let epochs = 150;
        let start = (0.75 * epochs as f64).floor() as usize;
        assert_eq!(start, 112);
        let mut acc = SwaAccumulator::new(1, start, 1);
        for completed in 1..=epochs {
            acc.update_at(&[completed as f32], completed);
        }
        assert_eq!(acc.count(), 38);
        // snapshots are epochs 113..=150
        assert_eq!(acc.finalize().unwrap(), vec![(113.0 + 150.0) / 2.0]);
    }
}
