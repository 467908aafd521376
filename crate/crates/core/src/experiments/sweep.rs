//! Multi-run sweeps with a consolidated, seed-averaged CSV.
//!
//! Each point of a sweep owns a sub-directory. A point whose directory
//! already holds valid outputs for the same configuration is not re-run.
//! Failed points are recorded and the remaining points still run.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{read_metrics, MetricsRow};
use super::runner::{checkpoint_name, run_experiment, score_solution, Command, CONFIG_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::lottery::{prepare_ticket, train_cycle, Method, NoObserver};
use crate::model::Model;
use crate::pruning::{sparsity_of, transplant_mask};

pub const SWEEP_FILE: &str = "sweep.csv";
const TRANSPLANT_FILE: &str = "transplant.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Values are cycle indices; one run per seed reaches the largest.
    SparsityCurve,
    /// Values are SWAMP particle counts.
    ParticleCount,
    /// Values are cycle indices at which masks are swapped between methods.
    MaskTransplant,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::SparsityCurve => "sparsity-curve",
            SweepAxis::ParticleCount => "particle-count",
            SweepAxis::MaskTransplant => "mask-transplant",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsity-curve" => Ok(SweepAxis::SparsityCurve),
            "particle-count" => Ok(SweepAxis::ParticleCount),
            "mask-transplant" => Ok(SweepAxis::MaskTransplant),
            other => Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Driver for the sparsity curve (`imp` or `swamp`).
    pub method: Command,
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedStats {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl SeedStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(SeedStats { mean, std, n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub keys: Vec<(&'static str, String)>,
    pub sparsity: Option<f64>,
    pub accuracy: Option<SeedStats>,
    pub nll: Option<SeedStats>,
    pub failed_seeds: Vec<u64>,
}

impl SweepRow {
    pub fn status(&self) -> String {
        if self.failed_seeds.is_empty() {
            "ok".into()
        } else {
            let list: Vec<String> = self.failed_seeds.iter().map(|s| s.to_string()).collect();
            format!("failed:{}", list.join("|"))
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failed_points: Vec<(PathBuf, String)>,
    pub csv: PathBuf,
}

/// Test accuracy and NLL of one (seed) measurement.
/// `(training method, mask source, measure)` rows of one transplant point.
type TransplantRows = Vec<(String, String, Measure)>;

#[derive(Clone, Copy, Debug)]
struct Measure {
    sparsity: f64,
    acc: f64,
    nll: f64,
}

fn final_rows(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    rows.iter().filter(|r| r.phase == "final").collect()
}

fn expected_finals(cfg: &ExperimentConfig, command: Command) -> usize {
    match command {
        Command::Dense => 1,
        _ => cfg.cycles + 1,
    }
}

/// Outputs of `dir` if they belong to this exact configuration and are complete.
fn completed_run(cfg: &ExperimentConfig, command: Command, dir: &Path) -> Option<Vec<MetricsRow>> {
    let resolved = ExperimentConfig::load(&dir.join(CONFIG_FILE)).ok()?;
    if resolved.digest() != cfg.digest() {
        return None;
    }
    let rows = read_metrics(&dir.join(METRICS_FILE)).ok()?;
    let finals = expected_finals(cfg, command);
    if final_rows(&rows).len() != finals {
        return None;
    }
    let last = Checkpoint::load(&dir.join(checkpoint_name(finals - 1)), Some(&cfg.model)).ok()?;
    (last.config_digest == cfg.digest()).then_some(rows)
}

/// Runs the point unless `dir` already holds its complete outputs.
pub fn ensure_run(cfg: &ExperimentConfig, command: Command, dir: &Path) -> Result<Vec<MetricsRow>> {
    if let Some(rows) = completed_run(cfg, command, dir) {
        log::info!("{}: outputs present, skipping", dir.display());
        return Ok(rows);
    }
    let mut point = cfg.clone();
    point.output_dir = Some(dir.to_path_buf());
    Ok(run_experiment(&point, command, dir)?.rows)
}

fn measure(row: &MetricsRow) -> Measure {
    Measure {
        sparsity: row.sparsity,
        acc: row.test_acc.unwrap_or(f64::NAN),
        nll: row.test_nll.unwrap_or(f64::NAN),
    }
}

fn summarize(keys: Vec<(&'static str, String)>, results: &[(u64, Result<Measure, String>)]) -> SweepRow {
    let ok: Vec<Measure> = results.iter().filter_map(|(_, r)| r.as_ref().ok().copied()).collect();
    let acc: Vec<f64> = ok.iter().map(|m| m.acc).collect();
    let nll: Vec<f64> = ok.iter().map(|m| m.nll).collect();
    SweepRow {
        keys,
        sparsity: ok.first().map(|m| m.sparsity),
        accuracy: SeedStats::of(&acc),
        nll: SeedStats::of(&nll),
        failed_seeds: results.iter().filter(|(_, r)| r.is_err()).map(|(s, _)| *s).collect(),
    }
}

fn transplant_point(cfg: &ExperimentConfig, cycle: usize, dir: &Path) -> Result<Vec<(String, String, Measure)>> {
    let mut source_cfg = cfg.clone();
    source_cfg.cycles = cycle;
    let src_imp = dir.join("imp");
    let src_swamp = dir.join("swamp");
    ensure_run(&source_cfg, Command::Imp, &src_imp)?;
    ensure_run(&source_cfg, Command::Swamp, &src_swamp)?;

    let result_path = dir.join(TRANSPLANT_FILE);
    let marker = dir.join(CONFIG_FILE);
    if let (Ok(text), Ok(prev)) = (std::fs::read_to_string(&result_path), ExperimentConfig::load(&marker)) {
        if prev.digest() == source_cfg.digest() {
            if let Ok(rows) = parse_transplant(&text) {
                log::info!("{}: outputs present, skipping", dir.display());
                return Ok(rows);
            }
        }
    }

    let model = Model::new(cfg.model.clone(), cfg.prunable)?;
    let data = cfg.load_data()?;
    let lottery = source_cfg.lottery();
    let (_, ticket) = prepare_ticket(&model, &data.train, &lottery, &NoObserver)?;
    let mut out = Vec::new();
    for (source, src_dir) in [("imp", &src_imp), ("swamp", &src_swamp)] {
        let ck = Checkpoint::load(&src_dir.join(checkpoint_name(cycle)), Some(model.spec()))?;
        let mask = ck.mask.as_ref().ok_or_else(|| Error::Format("source checkpoint has no mask".into()))?;
        let mask = transplant_mask(mask, model.spec(), &model)?;
        for (training, method) in [("sgd", Method::Imp), ("swamp", Method::Swamp)] {
            let state = train_cycle(&model, &data.train, &lottery, method, &ticket.weights, cycle, mask.clone(), None, &NoObserver)?;
            let (acc, nll, _) = score_solution(&model, &state.solution, &mask, &data, cfg.temperature_scaling)?;
            log::info!("transplant cycle {cycle}: {training} on {source} mask -> acc {acc:.4}");
            out.push((training.to_string(), source.to_string(), Measure { sparsity: sparsity_of(&mask), acc, nll }));
        }
    }
    let mut f = std::fs::File::create(&result_path)?;
    writeln!(f, "training,mask_source,sparsity,test_acc,test_nll")?;
    for (t, s, m) in &out {
        writeln!(f, "{t},{s},{},{},{}", m.sparsity, m.acc, m.nll)?;
    }
    let mut resolved = source_cfg.clone();
    resolved.output_dir = Some(dir.to_path_buf());
    std::fs::write(&marker, resolved.serialize())?;
    Ok(out)
}

fn parse_transplant(text: &str) -> Result<Vec<(String, String, Measure)>> {
    let bad = || Error::Format("malformed transplant results".into());
    let rows: Vec<_> = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((f[0].to_string(), f[1].to_string(), Measure { sparsity: num(f[2])?, acc: num(f[3])?, nll: num(f[4])? }))
        })
        .collect::<Result<_>>()?;
    if rows.len() != 4 {
        return Err(bad());
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(first) = rows.first() {
        let keys: Vec<&str> = first.keys.iter().map(|(k, _)| *k).collect();
        writeln!(f, "{},sparsity,acc_mean,acc_std,nll_mean,nll_std,seeds,status", keys.join(","))?;
    }
    for r in rows {
        let keys: Vec<&str> = r.keys.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            keys.join(","),
            fmt_opt(r.sparsity),
            fmt_opt(r.accuracy.map(|s| s.mean)),
            fmt_opt(r.accuracy.and_then(|s| s.std)),
            fmt_opt(r.nll.map(|s| s.mean)),
            fmt_opt(r.nll.and_then(|s| s.std)),
            r.accuracy.map_or(0, |s| s.n),
            r.status()
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Runs every point of `spec` under `out` and writes `out/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, spec: &SweepSpec, out: &Path) -> Result<SweepOutcome> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut failed_points = Vec::new();
    let mut note = |dir: &Path, e: &Error| {
        log::error!("{}: {e}", dir.display());
        failed_points.push((dir.to_path_buf(), e.to_string()));
        e.to_string()
    };
    let rows = match spec.axis {
        SweepAxis::SparsityCurve => {
            if spec.method == Command::Dense {
                return Err(Error::Config("sparsity curve needs imp or swamp".into()));
            }
            let mut point = cfg.clone();
            point.cycles = *spec.values.iter().max().unwrap();
            let runs: Vec<(u64, Result<Vec<MetricsRow>, String>)> = spec
                .seeds
                .iter()
                .map(|&s| {
                    let dir = out.join(format!("{}_seed{s}", spec.method));
                    let seeded = ExperimentConfig { seed: s, ..point.clone() };
                    (s, ensure_run(&seeded, spec.method, &dir).map_err(|e| note(&dir, &e)))
                })
                .collect();
            spec.values
                .iter()
                .map(|&c| {
                    let per_seed: Vec<(u64, Result<Measure, String>)> = runs
                        .iter()
                        .map(|(s, r)| {
                            let m = r.as_ref().map_err(Clone::clone).and_then(|rows| {
                                final_rows(rows)
                                    .into_iter()
                                    .find(|row| row.cycle == c)
                                    .map(measure)
                                    .ok_or_else(|| format!("cycle {c} missing"))
                            });
                            (*s, m)
                        })
                        .collect();
                    summarize(vec![("method", spec.method.to_string()), ("cycle", c.to_string())], &per_seed)
                })
                .collect()
        }
        SweepAxis::ParticleCount => spec
            .values
            .iter()
            .map(|&n| {
                let per_seed: Vec<(u64, Result<Measure, String>)> = spec
                    .seeds
                    .iter()
                    .map(|&s| {
                        let dir = out.join(format!("particles{n}_seed{s}"));
                        let point = ExperimentConfig { seed: s, particles: n, particle_schedule: Vec::new(), ..cfg.clone() };
                        let r = ensure_run(&point, Command::Swamp, &dir)
                            .map_err(|e| note(&dir, &e))
                            .map(|rows| measure(final_rows(&rows).last().expect("complete run has final rows")));
                        (s, r)
                    })
                    .collect();
                summarize(vec![("particles", n.to_string())], &per_seed)
            })
            .collect(),
        SweepAxis::MaskTransplant => {
            let mut rows = Vec::new();
            for &c in &spec.values {
                let results: Vec<(u64, std::result::Result<TransplantRows, String>)> = spec
                    .seeds
                    .iter()
                    .map(|&s| {
                        let dir = out.join(format!("transplant_c{c}_seed{s}"));
                        let point = ExperimentConfig { seed: s, ..cfg.clone() };
                        (s, transplant_point(&point, c, &dir).map_err(|e| note(&dir, &e)))
                    })
                    .collect();
                for training in ["sgd", "swamp"] {
                    for source in ["imp", "swamp"] {
                        let per_seed: Vec<(u64, Result<Measure, String>)> = results
                            .iter()
                            .map(|(s, r)| {
                                let m = r.as_ref().map_err(Clone::clone).map(|list| {
                                    list.iter().find(|(t, m, _)| t.as_str() == training && m.as_str() == source).expect("four rows").2
                                });
                                (*s, m)
                            })
                            .collect();
                        rows.push(summarize(
                            vec![("cycle", c.to_string()), ("training", training.into()), ("mask_source", source.into())],
                            &per_seed,
                        ));
                    }
                }
            }
            rows
        }
    };
    let csv = out.join(SWEEP_FILE);
    write_sweep_csv(&csv, &rows)?;
    Ok(SweepOutcome { rows, failed_points, csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        let s = SeedStats::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));
        assert_eq!(SeedStats::of(&[4.0]).unwrap().std, None);
        assert!(SeedStats::of(&[]).is_none());
    }

    #[test]
    fn axis_names() {
        for a in [SweepAxis::SparsityCurve, SweepAxis::ParticleCount, SweepAxis::MaskTransplant] {
            assert_eq!(a.to_string().parse::<SweepAxis>().unwrap(), a);
        }
    }
}
