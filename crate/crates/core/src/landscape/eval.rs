use crate::autograd::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::pruning::Mask;

const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean negative log-likelihood of the true class.
    pub nll: f64,
    pub samples: usize,
}

/// One labelled row of a particle-wise evaluation (`P1`..`PN`, `WA`).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub result: EvalResult,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise log-softmax of `[rows, classes]` logits, in `f64`.
pub fn log_probs(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&z| z as f64 - lse));
    }
    out
}

/// Logits for every sample of `data`, `[n, classes]`.
pub fn logits(model: &Model, params: &ParamVector, mask: Option<&Mask>, data: &Dataset) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut out = Vec::with_capacity(data.len() * model.spec().classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend_from_slice(model.forward_logits(params, mask, &x)?.data());
    }
    Tensor::new(vec![data.len(), model.spec().classes], out)
}

fn score(logp: &[f64], labels: &[usize], k: usize) -> EvalResult {
    let mut nll = 0.0;
    let mut correct = 0usize;
    for (row, &y) in logp.chunks(k).zip(labels) {
        nll -= row[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    EvalResult { accuracy: correct as f64 / n, nll: nll / n, samples: labels.len() }
}

/// Accuracy and NLL of one model.
pub fn evaluate(model: &Model, params: &ParamVector, mask: Option<&Mask>, data: &Dataset) -> Result<EvalResult> {
    let z = logits(model, params, mask, data)?;
    Ok(score(&log_probs(&z), data.labels(), model.spec().classes))
}

/// Rows `P1..PN` for the particles followed by `WA` for their average.
pub fn eval_particlewise(
    model: &Model,
    particles: &[ParamVector],
    average: &ParamVector,
    mask: Option<&Mask>,
    data: &Dataset,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(particles.len() + 1);
    for (i, p) in particles.iter().enumerate() {
        rows.push(EvalRow { label: format!("P{}", i + 1), result: evaluate(model, p, mask, data)? });
    }
    rows.push(EvalRow { label: "WA".into(), result: evaluate(model, average, mask, data)? });
    Ok(rows)
}

/// Averages the members' predicted probabilities, then scores the average.
pub fn eval_ensemble(model: &Model, members: &[(ParamVector, Option<Mask>)], data: &Dataset) -> Result<EvalResult> {
    if members.is_empty() {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let k = model.spec().classes;
    let per_member: Vec<Vec<f64>> = members
        .iter()
        .map(|(p, m)| Ok(log_probs(&logits(model, p, m.as_ref(), data)?)))
        .collect::<Result<_>>()?;
    // log of the mean probability, via log-sum-exp over members
    let ln_n = (members.len() as f64).ln();
    let mixed: Vec<f64> = (0..data.len() * k)
        .map(|j| {
            let vals: Vec<f64> = per_member.iter().map(|lp| lp[j]).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - ln_n
        })
        .collect();
    Ok(score(&mixed, data.labels(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::model::{ModelSpec, PrunableKinds};

    fn setup() -> (Model, Dataset) {
        let model = Model::new(ModelSpec::mlp(2, &[6], 3), PrunableKinds::Auto).unwrap();
        (model, make_synthetic(SyntheticKind::Blobs, 60, 3, 0.5, 4).unwrap())
    }

    #[test]
    fn single_member_ensemble_is_plain_eval() {
        let (model, data) = setup();
        let w = model.init_params(1);
        let single = evaluate(&model, &w, None, &data).unwrap();
        let one = eval_ensemble(&model, &[(w.clone(), None)], &data).unwrap();
        assert_eq!(single, one);
        let two = eval_ensemble(&model, &[(w.clone(), None), (w, None)], &data).unwrap();
        assert_eq!(single.accuracy, two.accuracy);
        assert!((single.nll - two.nll).abs() < 1e-12);
    }

    #[test]
    fn particlewise_rows() {
        let (model, data) = setup();
        let w = model.init_params(1);
        let rows = eval_particlewise(&model, std::slice::from_ref(&w), &w, None, &data).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "P1");
        assert_eq!(rows[1].label, "WA");
        assert_eq!(rows[0].result, rows[1].result);
    }

    #[test]
    fn nll_matches_cross_entropy() {
        let (model, data) = setup();
        let w = model.init_params(3);
        let e = evaluate(&model, &w, None, &data).unwrap();
        let z = model.forward_logits(&w, None, data.inputs()).unwrap();
        let ce = crate::model::cross_entropy(&z, data.labels()).unwrap() as f64;
        assert!((e.nll - ce).abs() < 1e-5, "{} vs {ce}", e.nll);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let lp = log_probs(&Tensor::zeros(&[2, 4]));
        assert!(lp.iter().all(|&v| (v + 4f64.ln()).abs() < 1e-15));
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }
}
