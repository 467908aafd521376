//! Loss-landscape instrumentation.
//!
//! Everything here works against [`Objective`], a scalar loss over a flat
//! `f64` point. [`ModelObjective`] adapts a model and a fixed batch; the
//! analytic objectives in tests plug in the same way.

mod barrier;
mod eval;
mod hessian;
mod plane;

pub use barrier::{linear_path_losses, BarrierScan, DEFAULT_GRID};
pub use eval::{eval_ensemble, eval_particlewise, evaluate, log_probs, logits, EvalResult, EvalRow};
pub use hessian::{exact_hessian_trace, hessian_trace_hutchinson, TraceEstimate, EXACT_TRACE_MAX_DIM, FD_STEP_BASE};
pub use plane::{plane_surface, PlaneGrid};

use crate::autograd::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::pruning::Mask;

/// Loss over a flat parameter point.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, w: &[f64]) -> Result<f64>;

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>>;

    /// Loss plus, where meaningful, the classification error rate.
    fn evaluate(&self, w: &[f64]) -> Result<(f64, Option<f64>)> {
        Ok((self.loss(w)?, None))
    }

    /// Coordinates that are free to move; `None` means all of them.
    fn active(&self) -> Option<&[bool]> {
        None
    }
}

const CHUNK: usize = 512;

/// Mean cross-entropy of a model on a fixed set of samples.
///
/// With a mask, the loss is taken at the effective weights `w ∘ m` and
/// masked coordinates are inactive. Without one, the point is used as is.
pub struct ModelObjective<'a> {
    model: &'a Model,
    inputs: Tensor,
    labels: Vec<usize>,
    mask: Option<(Mask, Vec<f32>, Vec<bool>)>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a Model, data: &Dataset, mask: Option<&Mask>) -> Result<Self> {
        Self::on_batch(model, data.inputs().clone(), data.labels().to_vec(), mask)
    }

    pub fn on_batch(model: &'a Model, inputs: Tensor, labels: Vec<usize>, mask: Option<&Mask>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("objective needs at least one sample"));
        }
        let mask = match mask {
            Some(m) => {
                let full = model.expand_mask(m)?;
                let active = full.iter().map(|&v| v != 0.0).collect();
                Some((m.clone(), full, active))
            }
            None => None,
        };
        Ok(ModelObjective { model, inputs, labels, mask })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn params(&self, w: &[f64]) -> Result<ParamVector> {
        if w.len() != self.model.dim() {
            return Err(Error::shape("objective", &[self.model.dim()], &[w.len()]));
        }
        ParamVector::from_values(self.model.layout().clone(), w.iter().map(|&v| v as f32).collect())
    }

    fn chunks(&self) -> impl Iterator<Item = (Tensor, &[usize])> + '_ {
        let rows = self.labels.len();
        let per = self.inputs.len() / rows;
        (0..rows).step_by(CHUNK).map(move |start| {
            let end = (start + CHUNK).min(rows);
            let mut shape = self.inputs.shape().to_vec();
            shape[0] = end - start;
            let data = self.inputs.data()[start * per..end * per].to_vec();
            (Tensor::new(shape, data).expect("chunk shape"), &self.labels[start..end])
        })
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.evaluate(w)?.0)
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let params = self.params(w)?;
        let full = self.mask.as_ref().map(|(_, f, _)| f.as_slice());
        let rows = self.labels.len() as f64;
        let mut total = vec![0.0f64; self.dim()];
        for (x, y) in self.chunks() {
            let (_, g) = self.model.loss_and_grad(&params, full, &x, y)?;
            let weight = y.len() as f64 / rows;
            for (t, &v) in total.iter_mut().zip(&g) {
                *t += weight * v as f64;
            }
        }
        if total.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("objective gradient".into()));
        }
        Ok(total)
    }

    fn evaluate(&self, w: &[f64]) -> Result<(f64, Option<f64>)> {
        let params = self.params(w)?;
        let mask = self.mask.as_ref().map(|(m, _, _)| m);
        let mut nll = 0.0f64;
        let mut wrong = 0usize;
        for (x, y) in self.chunks() {
            let z = self.model.forward_logits(&params, mask, &x)?;
            let lp = log_probs(&z);
            let k = z.shape()[1];
            for (row, &label) in lp.chunks(k).zip(y) {
                nll -= row[label];
                if eval::argmax(row) != label {
                    wrong += 1;
                }
            }
        }
        let n = self.labels.len() as f64;
        Ok((nll / n, Some(wrong as f64 / n)))
    }

    fn active(&self) -> Option<&[bool]> {
        self.mask.as_ref().map(|(_, _, a)| a.as_slice())
    }
}

pub(crate) fn to_f64(p: &ParamVector) -> Vec<f64> {
    p.values().iter().map(|&v| v as f64).collect()
}

pub(crate) fn same_layout(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.layout() != b.layout() {
        return Err(Error::invalid("parameter vectors belong to different model specs"));
    }
    Ok(())
}

/// Barrier scan between two parameter vectors of the same model.
pub fn model_path_scan(
    objective: &ModelObjective<'_>,
    a: &ParamVector,
    b: &ParamVector,
    grid: usize,
    margin: f64,
) -> Result<BarrierScan> {
    same_layout(a, b)?;
    linear_path_losses(objective, &to_f64(a), &to_f64(b), grid, margin)
}
