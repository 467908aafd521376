//! Runs one driver end to end and writes its artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::{DataBundle, EvalCadence, ExperimentConfig};
use super::metrics::{temperature_scale_nll, write_metrics, MetricsRow};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::landscape::{evaluate, logits};
use crate::lottery::{run_dense, run_lottery, CycleState, Method, StepEvent, TrainObserver};
use crate::model::{Model, ParamVector};
use crate::pruning::{sparsity_of, Mask};

pub const CONFIG_FILE: &str = "config.resolved.txt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Dense,
    Imp,
    Swamp,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Dense => "dense",
            Command::Imp => "imp",
            Command::Swamp => "swamp",
        })
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Command::Dense),
            "imp" => Ok(Command::Imp),
            "swamp" => Ok(Command::Swamp),
            other => Err(Error::Config(format!("unknown method `{other}` (dense, imp or swamp)"))),
        }
    }
}

pub fn checkpoint_name(cycle: usize) -> String {
    format!("cycle_{cycle:02}.ckpt")
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunSummary {
    /// The `final` row of the last cycle.
    pub fn last_final(&self) -> Option<&MetricsRow> {
        self.rows.iter().rev().find(|r| r.phase == "final")
    }
}

/// Fraction of prunable coordinates zeroed by an expanded mask.
fn sparsity_of_full(model: &Model, full: &[f32]) -> f64 {
    let p = model.prunable();
    if p.count() == 0 {
        return 0.0;
    }
    let zeros = p.coords().iter().filter(|&&c| full[c] == 0.0).count();
    zeros as f64 / p.count() as f64
}

struct Recorder<'a> {
    model: &'a Model,
    test: &'a Dataset,
    cadence: EvalCadence,
    start: Instant,
    rows: Mutex<Vec<(usize, usize, MetricsRow)>>,
}

impl TrainObserver for Recorder<'_> {
    fn on_epoch(&self, e: &StepEvent<'_>) {
        let (test_acc, test_nll) = match self.cadence {
            EvalCadence::Cycle => (None, None),
            EvalCadence::Epoch => {
                let p = ParamVector::from_values(self.model.layout().clone(), e.params.to_vec()).expect("layout");
                let mut masked = p;
                for (w, &m) in masked.values_mut().iter_mut().zip(e.mask) {
                    *w *= m;
                }
                match evaluate(self.model, &masked, None, self.test) {
                    Ok(r) => (Some(r.accuracy), Some(r.nll)),
                    Err(_) => (None, None),
                }
            }
        };
        let phase = if e.id.particle == 0 { "ticket".to_string() } else { format!("p{}", e.id.particle) };
        let row = MetricsRow {
            cycle: e.id.cycle,
            sparsity: sparsity_of_full(self.model, e.mask),
            phase,
            step: e.step,
            train_loss: Some(e.loss as f64),
            test_acc,
            test_nll,
            temperature: None,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        self.rows.lock().unwrap().push((e.id.cycle, e.id.particle, row));
    }
}

/// Test accuracy, (calibrated) test NLL and temperature of one solution.
pub fn score_solution(
    model: &Model,
    params: &ParamVector,
    mask: &Mask,
    data: &DataBundle,
    temperature_scaling: bool,
) -> Result<(f64, f64, Option<f64>)> {
    let raw = evaluate(model, params, Some(mask), &data.test)?;
    if !temperature_scaling {
        return Ok((raw.accuracy, raw.nll, None));
    }
    let calib = logits(model, params, Some(mask), &data.holdout)?;
    let test = logits(model, params, Some(mask), &data.test)?;
    match temperature_scale_nll(&calib, data.holdout.labels(), &test, data.test.labels()) {
        Ok((fit, nll)) => Ok((raw.accuracy, nll, Some(fit.temperature))),
        Err(e) => {
            log::warn!("temperature scaling skipped ({e}); reporting NLL at temperature 1");
            Ok((raw.accuracy, raw.nll, Some(1.0)))
        }
    }
}

/// Executes `command` and writes `config.resolved.txt`, `metrics.csv` and
/// one `cycle_XX.ckpt` per cycle into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).context(out.display().to_string()))?;
    let mut resolved = cfg.clone();
    resolved.output_dir = Some(out.to_path_buf());
    std::fs::write(out.join(CONFIG_FILE), resolved.serialize())?;

    let model = Model::new(cfg.model.clone(), cfg.prunable)?;
    let data = cfg.load_data()?;
    log::info!(
        "{command}: {} parameters ({} prunable), {} train / {} holdout / {} test samples",
        model.dim(),
        model.prunable().count(),
        data.train.len(),
        data.holdout.len(),
        data.test.len()
    );
    let recorder = Recorder {
        model: &model,
        test: &data.test,
        cadence: cfg.eval_cadence,
        start: Instant::now(),
        rows: Mutex::new(Vec::new()),
    };
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut checkpoints = Vec::new();
    let digest = cfg.digest();
    let steps_per_cycle = data.train.len().div_ceil(cfg.train.batch_size) * cfg.train.epochs;

    let mut sink = |state: &CycleState| -> Result<()> {
        let mut epoch_rows: Vec<(usize, usize, MetricsRow)> = {
            let mut all = recorder.rows.lock().unwrap();
            let (now, later): (Vec<_>, Vec<_>) = all.drain(..).partition(|(c, _, _)| *c <= state.cycle);
            *all = later;
            now
        };
        epoch_rows.sort_by_key(|(c, p, r)| (*c, *p, r.step));
        rows.extend(epoch_rows.into_iter().map(|(_, _, r)| r));

        let (acc, nll, temperature) =
            score_solution(&model, &state.solution, &state.mask, &data, cfg.temperature_scaling)?;
        let train_loss =
            state.particles.iter().map(|p| p.last_epoch_loss as f64).sum::<f64>() / state.particles.len() as f64;
        let sparsity = sparsity_of(&state.mask);
        rows.push(MetricsRow {
            cycle: state.cycle,
            sparsity,
            phase: "final".into(),
            step: steps_per_cycle,
            train_loss: Some(train_loss),
            test_acc: Some(acc),
            test_nll: Some(nll),
            temperature,
            wall_time_s: recorder.start.elapsed().as_secs_f64(),
        });
        log::info!(
            "cycle {:2}  sparsity {:.4}  particles {}  test acc {:.4}  nll {:.4}",
            state.cycle,
            sparsity,
            state.particles.len(),
            acc,
            nll
        );

        let particles: Vec<ParamVector> = if cfg.save_particles {
            state.particles.iter().map(|p| p.solution.clone()).collect()
        } else {
            Vec::new()
        };
        let ck = Checkpoint::from_state(&model, state.cycle, &state.solution, Some(&state.mask), &particles, digest, cfg.seed)?;
        let path = out.join(checkpoint_name(state.cycle));
        ck.save(&path)?;
        checkpoints.push(path);
        write_metrics(&out.join(METRICS_FILE), &rows)
    };

    match command {
        Command::Dense => {
            let state = run_dense(&model, &data.train, &cfg.lottery(), &recorder)?;
            sink(&state)?;
        }
        Command::Imp | Command::Swamp => {
            let method = if command == Command::Imp { Method::Imp } else { Method::Swamp };
            run_lottery(&model, &data.train, &cfg.lottery(), method, &recorder, &mut sink)?;
        }
    }
    Ok(RunSummary { out_dir: out.to_path_buf(), rows, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::metrics::read_metrics;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::parse(
            "seed = 5
             model.input = 2
             model.layers = dense:2:8,relu,dense:8:3
             data.source = synthetic
             data.samples = 120
             data.test_samples = 60
             data.noise = 0.3
             lottery.cycles = 2
             lottery.particles = 2
             lottery.rewind_steps = 4
             train.epochs = 4
             train.batch_size = 16
             sgd.lr = 0.1",
        )
        .unwrap()
    }

    #[test]
    fn swamp_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg(), Command::Swamp, dir.path()).unwrap();
        assert_eq!(summary.checkpoints.len(), 3);
        let rows = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        let finals: Vec<_> = rows.iter().filter(|r| r.phase == "final").collect();
        assert_eq!(finals.len(), 3);
        let model = Model::new(cfg().model, cfg().prunable).unwrap();
        for (c, row) in finals.iter().enumerate() {
            let ck = Checkpoint::load(&dir.path().join(checkpoint_name(c)), Some(&model.spec().clone())).unwrap();
            assert_eq!(row.sparsity, sparsity_of(ck.mask.as_ref().unwrap()));
            assert_eq!(ck.cycle as usize, c);
        }
        // per-epoch rows for both particles, for the ticket and every cycle
        assert!(rows.iter().any(|r| r.phase == "ticket"));
        assert_eq!(rows.iter().filter(|r| r.phase == "p2").count(), 3 * 4);
        let resolved = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(resolved.digest(), cfg().digest());
    }

    #[test]
    fn dense_run_has_one_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg(), Command::Dense, dir.path()).unwrap();
        assert_eq!(summary.checkpoints.len(), 1);
        assert_eq!(summary.last_final().unwrap().sparsity, 0.0);
    }
}
