//! Metrics rows and temperature-scaled NLL.

use std::io::Write;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "cycle,sparsity,phase,step,train_loss,test_acc,test_nll,temperature,wall_time_s";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub cycle: usize,
    pub sparsity: f64,
    /// `ticket`, `p<n>` for per-epoch particle rows, `final` for the cycle's solution.
    pub phase: String,
    pub step: usize,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_nll: Option<f64>,
    pub temperature: Option<f64>,
    pub wall_time_s: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad metrics value `{s}`")))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.cycle,
            self.sparsity,
            self.phase,
            self.step,
            opt(self.train_loss),
            opt(self.test_acc),
            opt(self.test_nll),
            opt(self.temperature),
            self.wall_time_s
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("metrics row has {} fields, expected 9", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad metrics integer `{s}`")));
        let float = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad metrics value `{s}`")));
        Ok(MetricsRow {
            cycle: int(f[0])?,
            sparsity: float(f[1])?,
            phase: f[2].to_string(),
            step: int(f[3])?,
            train_loss: parse_opt(f[4])?,
            test_acc: parse_opt(f[5])?,
            test_nll: parse_opt(f[6])?,
            temperature: parse_opt(f[7])?,
            wall_time_s: float(f[8])?,
        })
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: missing metrics header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);
pub const TEMPERATURE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// NLL on the calibration samples at `temperature`.
    pub nll: f64,
    /// Every row had identical logits, so the temperature is meaningless.
    pub degenerate: bool,
}

/// Mean NLL of `softmax(logits / tau)`.
pub fn nll_at_temperature(logits: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let scaled: Vec<f64> = row.iter().map(|&z| z as f64 / tau).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - scaled[y];
    }
    total / labels.len() as f64
}

fn check(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape("temperature", shape, &[labels.len()]));
    }
    let k = shape[1];
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::LabelOutOfRange { index, label, classes: k });
    }
    Ok(k)
}

/// Golden-section search for the temperature minimizing NLL on the given
/// samples. Every class must appear at least once.
pub fn fit_temperature(logits: &Tensor, labels: &[usize]) -> Result<TemperatureFit> {
    let k = check(logits, labels)?;
    let mut seen = vec![false; k];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::invalid(format!("calibration set has no sample of class {missing}")));
    }
    let flat = logits.data().chunks(k).all(|row| row.iter().all(|&z| z == row[0]));
    if flat {
        return Ok(TemperatureFit { temperature: 1.0, nll: (k as f64).ln(), degenerate: true });
    }
    let f = |t: f64| nll_at_temperature(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = TEMPERATURE_RANGE;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMPERATURE_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    Ok(TemperatureFit { temperature: t, nll: f(t), degenerate: false })
}

/// Fits the temperature on calibration logits and reports the NLL of the
/// evaluation logits at that temperature.
pub fn temperature_scale_nll(
    calib_logits: &Tensor,
    calib_labels: &[usize],
    eval_logits: &Tensor,
    eval_labels: &[usize],
) -> Result<(TemperatureFit, f64)> {
    let fit = fit_temperature(calib_logits, calib_labels)?;
    check(eval_logits, eval_labels)?;
    let nll = if fit.degenerate {
        (eval_logits.shape()[1] as f64).ln()
    } else {
        nll_at_temperature(eval_logits, eval_labels, fit.temperature)
    };
    Ok((fit, nll))
}
