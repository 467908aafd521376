use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use swamp::data::Dataset;
use swamp::experiments::{
    run_experiment, sweep, Checkpoint, Command, DataBundle, ExperimentConfig, SweepAxis, SweepSpec,
};
use swamp::landscape::{
    eval_ensemble, eval_particlewise, evaluate, exact_hessian_trace, hessian_trace_hutchinson, linear_path_losses,
    plane_surface, ModelObjective, DEFAULT_GRID,
};
use swamp::lottery::{prepare_ticket, train_cycle, Method, NoObserver};
use swamp::model::{Model, ParamVector};
use swamp::pruning::{sparsity_of, transplant_mask};

#[derive(Parser)]
#[command(name = "swamp", version, about = "Iterative magnitude pruning, SWAMP and loss-landscape tools")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` applied on top of the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Training {
    Sgd,
    Swamp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one dense model.
    Dense(Common),
    /// Iterative magnitude pruning (with rewinding when lottery.rewind_steps > 0).
    Imp(Common),
    /// IMP with several SWA particles averaged before each pruning step.
    Swamp(Common),
    /// Loss along the straight line between two checkpoints.
    Barrier {
        #[command(flatten)]
        common: Common,
        /// First endpoint: PATH or PATH@pN for a saved particle.
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Loss surface on the plane through three checkpoints.
    Surface {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        w1: String,
        #[arg(long)]
        w2: String,
        #[arg(long)]
        w3: String,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        /// Extra border around the three points, as a fraction of their extent.
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Hessian trace of the training loss at a checkpoint.
    HessianTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: String,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        /// Number of training samples (first in order) the loss is taken over.
        #[arg(long, default_value_t = 512)]
        batch: usize,
        /// Also compute the coordinate-wise trace (small models only).
        #[arg(long)]
        exact: bool,
    },
    /// Accuracy and NLL of a checkpoint, per saved particle and for the average.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Accuracy and NLL of the averaged predictions of several checkpoints.
    EnsembleEval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Retrain from the matching ticket under the mask of another checkpoint.
    TransplantMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask_from: PathBuf,
        #[arg(long, value_enum, default_value = "sgd")]
        method: Training,
    },
    /// Run many experiments and write a seed-averaged table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated values (cycles or particle counts, per axis).
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Driver for the sparsity-curve axis.
        #[arg(long, default_value = "swamp")]
        method: String,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if !c.overrides.is_empty() {
        cfg = cfg.with_overrides(&c.overrides).context("applying overrides")?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output_dir.clone().context("no output directory: pass --out or set output.dir")
}

fn split(data: &DataBundle, s: SplitArg) -> &Dataset {
    match s {
        SplitArg::Train => &data.train,
        SplitArg::Holdout => &data.holdout,
        SplitArg::Test => &data.test,
    }
}

/// `PATH` or `PATH@pN`.
fn load_ref(model: &Model, reference: &str) -> Result<(Checkpoint, ParamVector)> {
    let (path, particle) = match reference.rsplit_once("@p") {
        Some((p, n)) if n.parse::<usize>().is_ok() => (p, Some(n.parse::<usize>()?)),
        _ => (reference, None),
    };
    let ck = Checkpoint::load(Path::new(path), Some(model.spec()))?;
    let params = match particle {
        Some(n) => ck.particle_params(model, n).with_context(|| format!("particle {n} of {path}"))?,
        None => ck.params(model)?,
    };
    Ok((ck, params))
}

fn to_f64(p: &ParamVector) -> Vec<f64> {
    p.values().iter().map(|&v| v as f64).collect()
}

/// Writes to `--out` when given, otherwise to standard output.
fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| p.display().to_string())?),
        None => Box::new(std::io::stdout()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Dense(c) => driver(&c, Command::Dense),
        Cmd::Imp(c) => driver(&c, Command::Imp),
        Cmd::Swamp(c) => driver(&c, Command::Swamp),
        Cmd::Barrier { common, a, b, grid, margin, split: s } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let (_, pa) = load_ref(&model, &a)?;
            let (_, pb) = load_ref(&model, &b)?;
            let obj = ModelObjective::new(&model, split(&data, s), None)?;
            let scan = linear_path_losses(&obj, &to_f64(&pa), &to_f64(&pb), grid, margin)?;
            scan.write_csv(sink(&common.out)?)?;
            eprintln!("barrier {} (margin {}, connected: {})", scan.barrier, scan.margin, scan.is_connected());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Surface { common, w1, w2, w3, resolution, margin, split: s } => {
            let cfg = load_config(&common)?;
            let dir = common.out.clone().context("surface needs --out DIR")?;
            std::fs::create_dir_all(&dir)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let p: Vec<Vec<f64>> =
                [&w1, &w2, &w3].iter().map(|r| load_ref(&model, r).map(|(_, p)| to_f64(&p))).collect::<Result<_>>()?;
            let obj = ModelObjective::new(&model, split(&data, s), None)?;
            let grid = plane_surface(&obj, &p[0], &p[1], &p[2], resolution, margin)?;
            grid.write_grid(std::fs::File::create(dir.join("grid.txt"))?)?;
            grid.write_points(std::fs::File::create(dir.join("points.csv"))?)?;
            eprintln!("wrote {} and {}", dir.join("grid.txt").display(), dir.join("points.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::HessianTrace { common, checkpoint, probes, batch, exact } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let (ck, params) = load_ref(&model, &checkpoint)?;
            let subset = data.train.take(batch)?;
            let obj = ModelObjective::new(&model, &subset, ck.mask.as_ref())?;
            let w = to_f64(&params);
            let est = hessian_trace_hutchinson(&obj, &w, probes, cfg.seed)?;
            let mut out = sink(&common.out)?;
            writeln!(out, "method,trace,std_error,probes,samples")?;
            writeln!(out, "hutchinson,{},{},{},{}", est.estimate, est.std_error(), est.probes, subset.len())?;
            if exact {
                writeln!(out, "exact,{},,,{}", exact_hessian_trace(&obj, &w)?, subset.len())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { common, checkpoint, split: s } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let (ck, params) = load_ref(&model, &checkpoint)?;
            let d = split(&data, s);
            let particles: Vec<ParamVector> =
                (1..=ck.particle_count()).map(|n| ck.particle_params(&model, n)).collect::<swamp::Result<_>>()?;
            let mut out = sink(&common.out)?;
            writeln!(out, "model,accuracy,nll,sparsity")?;
            let sparsity = ck.mask.as_ref().map_or(0.0, sparsity_of);
            if particles.is_empty() {
                let r = evaluate(&model, &params, ck.mask.as_ref(), d)?;
                writeln!(out, "WA,{},{},{sparsity}", r.accuracy, r.nll)?;
            } else {
                for row in eval_particlewise(&model, &particles, &params, ck.mask.as_ref(), d)? {
                    writeln!(out, "{},{},{},{sparsity}", row.label, row.result.accuracy, row.result.nll)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EnsembleEval { common, checkpoints, split: s } => {
            let cfg = load_config(&common)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let members = checkpoints
                .iter()
                .map(|r| load_ref(&model, r).map(|(ck, p)| (p, ck.mask)))
                .collect::<Result<Vec<_>>>()?;
            let r = eval_ensemble(&model, &members, split(&data, s))?;
            let mut out = sink(&common.out)?;
            writeln!(out, "members,accuracy,nll")?;
            writeln!(out, "{},{},{}", members.len(), r.accuracy, r.nll)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TransplantMask { common, mask_from, method } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            std::fs::create_dir_all(&dir)?;
            let model = Model::new(cfg.model.clone(), cfg.prunable)?;
            let data = cfg.load_data()?;
            let source = Checkpoint::load(&mask_from, Some(model.spec()))?;
            let mask = source.mask.as_ref().context("source checkpoint carries no mask")?;
            let mask = transplant_mask(mask, model.spec(), &model)?;
            let lottery = cfg.lottery();
            let (_, ticket) = prepare_ticket(&model, &data.train, &lottery, &NoObserver)?;
            let m = match method {
                Training::Sgd => Method::Imp,
                Training::Swamp => Method::Swamp,
            };
            let cycle = source.cycle as usize;
            let state = train_cycle(&model, &data.train, &lottery, m, &ticket.weights, cycle, mask.clone(), None, &NoObserver)?;
            let (acc, nll, temp) =
                swamp::experiments::score_solution(&model, &state.solution, &mask, &data, cfg.temperature_scaling)?;
            let ck = Checkpoint::from_state(&model, cycle, &state.solution, Some(&mask), &[], cfg.digest(), cfg.seed)?;
            let path = dir.join(swamp::experiments::checkpoint_name(cycle));
            ck.save(&path)?;
            println!("sparsity,test_acc,test_nll,temperature");
            println!("{},{acc},{nll},{}", sparsity_of(&mask), temp.map_or_else(String::new, |t| t.to_string()));
            eprintln!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { common, axis, values, seeds, method } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let spec = SweepSpec {
                axis: axis.parse::<SweepAxis>()?,
                values,
                seeds: if seeds.is_empty() { vec![cfg.seed] } else { seeds },
                method: method.parse()?,
            };
            let outcome = sweep(&cfg, &spec, &dir)?;
            print!("{}", std::fs::read_to_string(&outcome.csv)?);
            if outcome.failed_points.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for (p, e) in &outcome.failed_points {
                    eprintln!("failed: {}: {e}", p.display());
                }
                Ok(ExitCode::from(2))
            }
        }
    }
}

fn driver(c: &Common, command: Command) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let dir = out_dir(&cfg)?;
    let summary = run_experiment(&cfg, command, &dir)?;
    if let Some(last) = summary.last_final() {
        println!(
            "{command}: cycle {} sparsity {:.4} test_acc {:.4} test_nll {:.4}",
            last.cycle,
            last.sparsity,
            last.test_acc.unwrap_or(f64::NAN),
            last.test_nll.unwrap_or(f64::NAN)
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
