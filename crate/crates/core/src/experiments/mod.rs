//! Experiment plumbing: configuration, checkpoints, metrics, the run driver
//! and sweeps.

mod checkpoint;
mod config;
mod metrics;
mod runner;
mod sweep;

pub use checkpoint::{particle_prefix, Checkpoint, MAGIC, VERSION};
pub use config::{DataBundle, DataConfig, DataSource, EvalCadence, ExperimentConfig};
pub use metrics::{
    fit_temperature, nll_at_temperature, read_metrics, temperature_scale_nll, write_metrics, MetricsRow,
    TemperatureFit, METRICS_HEADER, TEMPERATURE_RANGE, TEMPERATURE_TOL,
};
pub use runner::{checkpoint_name, run_experiment, score_solution, Command, RunSummary, CONFIG_FILE, METRICS_FILE};
pub use sweep::{ensure_run, sweep, SeedStats, SweepAxis, SweepOutcome, SweepRow, SweepSpec, SWEEP_FILE};
