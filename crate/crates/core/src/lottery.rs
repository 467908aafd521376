//! Iterative magnitude pruning drivers.
//!
//! * IMP: one particle per cycle, plain SGD, prune the final iterate. With
//!   `rewind_steps == 0` the ticket is the initialization itself (vanilla
//!   IMP); otherwise the weights are rewound to an early dense checkpoint.
//! * SWAMP: `N` particles per cycle, each trained with SWA from the same
//!   rewound ticket under its own batch order. Their solutions are averaged
//!   and the average is what gets pruned.
//!
//! Cycle 0 trains at full density. Cycle `c >= 1` first prunes the previous
//! cycle's solution, so the model trained in cycle `c` has sparsity
//! `1 - α^c` (up to integer rounding).

use rayon::prelude::*;

use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::optim::{sgd_update, Schedule, SgdConfig, SwaAccumulator};
use crate::pruning::{global_magnitude_prune, Mask, PruneEvent};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Return the final iterate.
    Sgd,
    /// Return the SWA average collected over the final phase.
    Swa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwaSettings {
    pub enabled: bool,
    /// Fraction of epochs trained before the averaging phase starts.
    pub start_fraction: f64,
    /// Constant learning rate during the averaging phase.
    pub lr: f64,
    /// Steps between snapshots; `None` means once per epoch.
    pub period_steps: Option<usize>,
}

impl Default for SwaSettings {
    fn default() -> Self {
        SwaSettings {
            enabled: true,
            start_fraction: 0.75,
            lr: 0.05,
            period_steps: None,
        }
    }
}

/// How one particle is trained within a cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// A cosine schedule always spans the whole run; its stored length is ignored.
    pub optimizer: SgdConfig,
    pub swa: SwaSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        self.optimizer.validate()?;
        if self.swa.enabled {
            if !(0.0..1.0).contains(&self.swa.start_fraction) {
                return Err(Error::invalid("SWA start fraction must be in [0, 1)"));
            }
            if !(self.swa.lr >= 0.0 && self.swa.lr.is_finite()) {
                return Err(Error::invalid("SWA learning rate must be non-negative"));
            }
            if self.swa.period_steps == Some(0) {
                return Err(Error::invalid("SWA period must be positive"));
            }
        }
        Ok(())
    }

    fn resolved_optimizer(&self, total_steps: usize) -> SgdConfig {
        match self.optimizer.schedule {
            Schedule::Cosine { .. } => self.optimizer.with_schedule(Schedule::Cosine { total_steps }),
            _ => self.optimizer.clone(),
        }
    }
}

/// Identifies a particle in observer callbacks and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParticleId {
    pub cycle: usize,
    /// 1-based; 0 is used for the matching-ticket phase.
    pub particle: usize,
}

pub struct StepEvent<'a> {
    pub id: ParticleId,
    /// Number of updates applied so far.
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub params: &'a [f32],
    pub mask: &'a [f32],
}

/// Hooks into training. Called concurrently when particles run in parallel.
pub trait TrainObserver: Sync {
    /// Parameters right before the first update.
    fn on_start(&self, _id: ParticleId, _params: &[f32]) {}
    fn on_step(&self, _event: &StepEvent<'_>) {}
    /// A snapshot was just folded into the SWA average.
    fn on_snapshot(&self, _event: &StepEvent<'_>) {}
    /// Called once per completed epoch.
    fn on_epoch(&self, _event: &StepEvent<'_>) {}
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Dense weights after `steps` early training steps, shared by all cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingTicket {
    pub weights: ParamVector,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainedParticle {
    pub id: ParticleId,
    pub seed: u64,
    /// SWA average in SWA mode, final iterate otherwise.
    pub solution: ParamVector,
    pub final_iterate: ParamVector,
    pub snapshots: usize,
    /// Mean mini-batch loss over the last epoch.
    pub last_epoch_loss: f32,
}

/// `ticket ∘ mask`.
pub fn rewind(ticket: &ParamVector, mask_full: &[f32]) -> ParamVector {
    let mut p = ticket.clone();
    for (w, &m) in p.values_mut().iter_mut().zip(mask_full) {
        if m == 0.0 {
            *w = 0.0;
        }
    }
    p
}

struct LoopOutcome {
    last_epoch_loss: f32,
}

/// Runs `steps` SGD updates, calling `after` after each one.
#[allow(clippy::too_many_arguments)]
fn sgd_loop(
    model: &Model,
    params: &mut ParamVector,
    mask_full: &[f32],
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    steps: usize,
    optimizer: &SgdConfig,
    lr_for: impl Fn(usize) -> Result<f64>,
    id: ParticleId,
    observer: &dyn TrainObserver,
    mut after: impl FnMut(usize, &StepEvent<'_>) -> Result<()>,
) -> Result<LoopOutcome> {
    let stream = BatchStream::new(data.len(), batch_size, steps.div_ceil(data.len().div_ceil(batch_size)), seed)?;
    let spe = stream.steps_per_epoch();
    let decay = model.layout().decay_flags();
    let mut velocity = vec![0.0f32; model.dim()];
    let ctx = |t: usize| format!("cycle {} particle {} step {t}", id.cycle, id.particle);

    observer.on_start(id, params.values());
    let mut epoch_loss = 0.0f64;
    let mut epoch_batches = 0usize;
    let mut last_epoch_loss = f32::NAN;
    let mut batches = Vec::new();
    for t in 0..steps {
        let epoch = t / spe;
        if t % spe == 0 {
            batches = stream.batches(epoch);
        }
        let (x, y) = data.batch(&batches[t % spe]);
        let (loss, grad) = model
            .loss_and_grad(params, Some(mask_full), &x, &y)
            .map_err(|e| e.context(ctx(t)))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at {}", ctx(t))));
        }
        let lr = lr_for(t)?;
        sgd_update(
            params.values_mut(),
            &grad,
            &mut velocity,
            lr,
            optimizer.momentum,
            optimizer.weight_decay,
            mask_full,
            &decay,
            t,
        )
        .map_err(|e| e.context(ctx(t)))?;

        epoch_loss += loss as f64;
        epoch_batches += 1;
        let completed = t + 1;
        let event = StepEvent {
            id,
            step: completed,
            epoch,
            loss,
            lr,
            params: params.values(),
            mask: mask_full,
        };
        observer.on_step(&event);
        after(completed, &event)?;
        if completed % spe == 0 || completed == steps {
            last_epoch_loss = (epoch_loss / epoch_batches as f64) as f32;
            epoch_loss = 0.0;
            epoch_batches = 0;
            observer.on_epoch(&event);
        }
    }
    Ok(LoopOutcome { last_epoch_loss })
}

/// Dense training for exactly `steps` updates at a constant learning rate.
/// With `steps == 0` the ticket is `init` itself.
#[allow(clippy::too_many_arguments)]
pub fn find_matching_ticket(
    model: &Model,
    init: &ParamVector,
    steps: usize,
    lr: f64,
    optimizer: &SgdConfig,
    batch_size: usize,
    data: &Dataset,
    seed: u64,
    observer: &dyn TrainObserver,
) -> Result<MatchingTicket> {
    let mut weights = init.clone();
    if steps > 0 {
        let opt = optimizer.with_schedule(Schedule::Constant);
        let ones = vec![1.0f32; model.dim()];
        let id = ParticleId { cycle: 0, particle: 0 };
        sgd_loop(model, &mut weights, &ones, data, batch_size, seed, steps, &opt, |_| Ok(lr), id, observer, |_, _| Ok(()))
            .map_err(|e| e.context("matching ticket"))?;
    }
    Ok(MatchingTicket { weights, steps, seed })
}

/// Trains one particle from `ticket ∘ mask` for `cfg.epochs` epochs.
#[allow(clippy::too_many_arguments)]
pub fn train_particle(
    model: &Model,
    ticket: &ParamVector,
    mask: &Mask,
    seed: u64,
    cfg: &TrainConfig,
    data: &Dataset,
    mode: TrainMode,
    id: ParticleId,
    observer: &dyn TrainObserver,
) -> Result<TrainedParticle> {
    cfg.validate()?;
    if ticket.len() != model.dim() {
        return Err(Error::shape("train_particle", &[model.dim()], &[ticket.len()]));
    }
    let mask_full = model.expand_mask(mask)?;
    let mut params = rewind(ticket, &mask_full);

    let spe = data.len().div_ceil(cfg.batch_size);
    let total = spe * cfg.epochs;
    let optimizer = cfg.resolved_optimizer(total);
    let swa_on = mode == TrainMode::Swa;
    let swa_start = (cfg.swa.start_fraction * cfg.epochs as f64).floor() as usize * spe;
    let mut acc = SwaAccumulator::new(model.dim(), swa_start, cfg.swa.period_steps.unwrap_or(spe));
    let lr_for = |t: usize| -> Result<f64> {
        if swa_on && t >= swa_start {
            Ok(cfg.swa.lr)
        } else {
            optimizer.lr_at(t)
        }
    };

    let outcome = sgd_loop(
        model,
        &mut params,
        &mask_full,
        data,
        cfg.batch_size,
        seed,
        total,
        &optimizer,
        lr_for,
        id,
        observer,
        |completed, event| {
            if swa_on && acc.update_at(event.params, completed) {
                observer.on_snapshot(event);
            }
            Ok(())
        },
    )?;

    let solution = if swa_on {
        let mean = acc.finalize().map_err(|e| e.context(format!("cycle {} particle {}", id.cycle, id.particle)))?;
        ParamVector::from_values(model.layout().clone(), mean)?
    } else {
        params.clone()
    };
    Ok(TrainedParticle {
        id,
        seed,
        solution,
        final_iterate: params,
        snapshots: acc.count(),
        last_epoch_loss: outcome.last_epoch_loss,
    })
}

/// Coordinate-wise mean, summed in particle order.
pub fn average_particles(particles: &[ParamVector]) -> Result<ParamVector> {
    let first = particles.first().ok_or_else(|| Error::invalid("cannot average zero particles"))?;
    if let Some(bad) = particles.iter().find(|p| p.len() != first.len()) {
        return Err(Error::shape("average_particles", &[first.len()], &[bad.len()]));
    }
    let n = particles.len() as f64;
    let mut sum = vec![0.0f64; first.len()];
    for p in particles {
        for (s, &v) in sum.iter_mut().zip(p.values()) {
            *s += v as f64;
        }
    }
    ParamVector::from_values(first.layout().clone(), sum.into_iter().map(|s| (s / n) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Imp,
    Swamp,
}

/// Settings shared by the IMP and SWAMP drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct LotteryConfig {
    pub seed: u64,
    /// Number of prune-and-retrain cycles after the dense cycle 0.
    pub cycles: usize,
    pub keep_ratio: f64,
    pub particles: usize,
    /// Optional per-cycle particle counts (index = cycle); overrides `particles`.
    pub particle_schedule: Vec<usize>,
    pub rewind_steps: usize,
    pub rewind_lr: f64,
    pub train: TrainConfig,
    /// Train particles of a cycle on separate threads.
    pub parallel: bool,
}

impl LotteryConfig {
    pub fn particles_at(&self, cycle: usize) -> usize {
        self.particle_schedule.get(cycle).copied().unwrap_or(self.particles)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio < 1.0) {
            return Err(Error::invalid(format!("keep ratio {} is outside (0, 1)", self.keep_ratio)));
        }
        if self.particles == 0 || self.particle_schedule.contains(&0) {
            return Err(Error::invalid("particle count must be at least 1"));
        }
        if !(self.rewind_lr > 0.0 && self.rewind_lr.is_finite()) {
            return Err(Error::invalid("rewind learning rate must be positive"));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug)]
pub struct CycleState {
    pub cycle: usize,
    /// Mask the cycle trained under.
    pub mask: Mask,
    /// Pruning step that produced `mask`; `None` for the dense cycle.
    pub prune: Option<PruneEvent>,
    /// Averaged solution `w̄_c`.
    pub solution: ParamVector,
    pub particles: Vec<TrainedParticle>,
}

#[derive(Clone, Debug)]
pub struct LotteryRun {
    pub init: ParamVector,
    pub ticket: MatchingTicket,
    pub cycles: Vec<CycleState>,
}

/// Initialization and matching ticket for `cfg.seed`.
pub fn prepare_ticket(
    model: &Model,
    data: &Dataset,
    cfg: &LotteryConfig,
    observer: &dyn TrainObserver,
) -> Result<(ParamVector, MatchingTicket)> {
    let init = model.init_params(cfg.seed);
    let ticket = find_matching_ticket(
        model,
        &init,
        cfg.rewind_steps,
        cfg.rewind_lr,
        &cfg.train.optimizer,
        cfg.train.batch_size,
        data,
        rng::ticket_seed(cfg.seed),
        observer,
    )?;
    Ok((init, ticket))
}

/// Trains the particles of one cycle from a fixed mask and averages them.
#[allow(clippy::too_many_arguments)]
pub fn train_cycle(
    model: &Model,
    data: &Dataset,
    cfg: &LotteryConfig,
    method: Method,
    ticket: &ParamVector,
    cycle: usize,
    mask: Mask,
    prune: Option<PruneEvent>,
    observer: &dyn TrainObserver,
) -> Result<CycleState> {
    let (count, mode) = match method {
        Method::Imp => (1, TrainMode::Sgd),
        Method::Swamp if cfg.train.swa.enabled => (cfg.particles_at(cycle), TrainMode::Swa),
        Method::Swamp => (cfg.particles_at(cycle), TrainMode::Sgd),
    };
    let train_one = |n: usize| {
        let id = ParticleId { cycle, particle: n };
        let seed = rng::particle_seed(cfg.seed, cycle, n);
        train_particle(model, ticket, &mask, seed, &cfg.train, data, mode, id, observer)
    };
    let particles: Vec<TrainedParticle> = if cfg.parallel && count > 1 {
        (1..=count).into_par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        (1..=count).map(train_one).collect::<Result<_>>()?
    };
    let solutions: Vec<ParamVector> = particles.iter().map(|p| p.solution.clone()).collect();
    let solution = average_particles(&solutions)?;
    Ok(CycleState { cycle, mask, prune, solution, particles })
}

/// Runs cycle 0 (dense) through `cfg.cycles`, handing each finished cycle to `sink`.
pub fn run_lottery(
    model: &Model,
    data: &Dataset,
    cfg: &LotteryConfig,
    method: Method,
    observer: &dyn TrainObserver,
    mut sink: impl FnMut(&CycleState) -> Result<()>,
) -> Result<LotteryRun> {
    cfg.validate()?;
    let (init, ticket) = prepare_ticket(model, data, cfg, observer)?;
    let mut cycles: Vec<CycleState> = Vec::with_capacity(cfg.cycles + 1);
    let mut mask = model.dense_mask();
    for c in 0..=cfg.cycles {
        let mut event = None;
        if let Some(prev) = cycles.last() {
            let (next, ev) = global_magnitude_prune(
                prev.solution.values(),
                model.prunable(),
                &mask,
                cfg.keep_ratio,
                c,
            )?;
            mask = next;
            event = Some(ev);
        }
        let state = train_cycle(model, data, cfg, method, &ticket.weights, c, mask.clone(), event, observer)?;
        sink(&state)?;
        cycles.push(state);
    }
    Ok(LotteryRun { init, ticket, cycles })
}

/// Iterative magnitude pruning with rewinding to the matching ticket.
pub fn run_imp(model: &Model, data: &Dataset, cfg: &LotteryConfig, observer: &dyn TrainObserver) -> Result<LotteryRun> {
    run_lottery(model, data, cfg, Method::Imp, observer, |_| Ok(()))
}

/// IMP with SWA-trained particles averaged before each pruning step.
pub fn run_swamp(model: &Model, data: &Dataset, cfg: &LotteryConfig, observer: &dyn TrainObserver) -> Result<LotteryRun> {
    run_lottery(model, data, cfg, Method::Swamp, observer, |_| Ok(()))
}

/// One dense SGD run from the initialization of `cfg.seed`.
pub fn run_dense(model: &Model, data: &Dataset, cfg: &LotteryConfig, observer: &dyn TrainObserver) -> Result<CycleState> {
    cfg.validate()?;
    let init = model.init_params(cfg.seed);
    let mask = model.dense_mask();
    let id = ParticleId { cycle: 0, particle: 1 };
    let seed = rng::particle_seed(cfg.seed, 0, 1);
    let p = train_particle(model, &init, &mask, seed, &cfg.train, data, TrainMode::Sgd, id, observer)?;
    Ok(CycleState {
        cycle: 0,
        mask,
        prune: None,
        solution: p.solution.clone(),
        particles: vec![p],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::landscape::evaluate;
    use crate::model::{ModelSpec, PrunableKinds};
    use std::sync::Mutex;

    fn setup() -> (Model, Dataset) {
        let model = Model::new(ModelSpec::mlp(2, &[12], 3), PrunableKinds::Auto).unwrap();
        let data = make_synthetic(SyntheticKind::Blobs, 90, 3, 0.6, 1).unwrap();
        (model, data)
    }

    fn train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: SgdConfig {
                lr0: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
                schedule: Schedule::Cosine { total_steps: 0 },
            },
            swa: SwaSettings::default(),
        }
    }

    fn lottery_cfg() -> LotteryConfig {
        LotteryConfig {
            seed: 3,
            cycles: 2,
            keep_ratio: 0.8,
            particles: 2,
            particle_schedule: Vec::new(),
            rewind_steps: 5,
            rewind_lr: 0.1,
            train: train_cfg(4),
            parallel: false,
        }
    }

    #[test]
    fn zero_step_ticket_is_init() {
        let (model, data) = setup();
        let init = model.init_params(1);
        let cfg = train_cfg(1);
        let t = find_matching_ticket(&model, &init, 0, 0.1, &cfg.optimizer, 16, &data, 9, &NoObserver).unwrap();
        assert_eq!(t.weights, init);
        let a = find_matching_ticket(&model, &init, 7, 0.1, &cfg.optimizer, 16, &data, 9, &NoObserver).unwrap();
        let b = find_matching_ticket(&model, &init, 7, 0.1, &cfg.optimizer, 16, &data, 9, &NoObserver).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, init);
    }

    #[test]
    fn ticket_lowers_loss() {
        let (model, data) = setup();
        let init = model.init_params(1);
        let cfg = train_cfg(1);
        let steps = 10 * data.len().div_ceil(16);
        let t = find_matching_ticket(&model, &init, steps, 0.1, &cfg.optimizer, 16, &data, 9, &NoObserver).unwrap();
        let before = evaluate(&model, &init, None, &data).unwrap().nll;
        let after = evaluate(&model, &t.weights, None, &data).unwrap().nll;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn particle_determinism_and_noise_sensitivity() {
        let (model, data) = setup();
        let init = model.init_params(2);
        let mask = model.dense_mask();
        let cfg = train_cfg(3);
        let id = ParticleId { cycle: 0, particle: 1 };
        let run = |seed| train_particle(&model, &init, &mask, seed, &cfg, &data, TrainMode::Sgd, id, &NoObserver).unwrap();
        let a = run(11);
        let b = run(11);
        let c = run(12);
        assert_eq!(a.solution, b.solution);
        assert_ne!(a.solution, c.solution);
    }

    #[test]
    fn swa_mode_matches_offline_snapshot_mean() {
        struct Collect(Mutex<Vec<Vec<f32>>>);
        impl TrainObserver for Collect {
            fn on_snapshot(&self, e: &StepEvent<'_>) {
                self.0.lock().unwrap().push(e.params.to_vec());
            }
        }
        let (model, data) = setup();
        let init = model.init_params(2);
        let cfg = train_cfg(8);
        let obs = Collect(Mutex::new(Vec::new()));
        let id = ParticleId { cycle: 0, particle: 1 };
        let p = train_particle(&model, &init, &model.dense_mask(), 5, &cfg, &data, TrainMode::Swa, id, &obs).unwrap();
        let snaps = obs.0.into_inner().unwrap();
        assert_eq!(snaps.len(), 2);
        assert_eq!(p.snapshots, 2);
        for (i, &v) in p.solution.values().iter().enumerate() {
            let offline = snaps.iter().map(|s| s[i] as f64).sum::<f64>() / snaps.len() as f64;
            assert!((v as f64 - offline).abs() <= 1e-6 * offline.abs().max(1e-30), "coord {i}");
        }
    }

    #[test]
    fn average_basics() {
        let (model, _) = setup();
        let w = model.init_params(4);
        assert_eq!(average_particles(std::slice::from_ref(&w)).unwrap(), w);
        let mut neg = w.clone();
        neg.values_mut().iter_mut().for_each(|v| *v = -*v);
        let z = average_particles(&[w.clone(), neg]).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(average_particles(&[]).is_err());
    }

    #[test]
    fn average_matches_extended_precision() {
        let (model, _) = setup();
        let ps: Vec<ParamVector> = (0..4).map(|s| model.init_params(100 + s)).collect();
        let avg = average_particles(&ps).unwrap();
        for i in 0..model.dim() {
            // independent: pairwise sums in f64
            let a = ps[0].values()[i] as f64 + ps[1].values()[i] as f64;
            let b = ps[2].values()[i] as f64 + ps[3].values()[i] as f64;
            let expect = ((a + b) / 4.0) as f32;
            assert!((avg.values()[i] - expect).abs() <= 1e-6 * expect.abs().max(1e-6));
        }
    }

    #[test]
    fn swamp_single_particle_without_swa_is_imp() {
        let (model, data) = setup();
        let mut cfg = lottery_cfg();
        cfg.particles = 1;
        cfg.train.swa.enabled = false;
        let imp = run_imp(&model, &data, &cfg, &NoObserver).unwrap();
        let swamp = run_swamp(&model, &data, &cfg, &NoObserver).unwrap();
        assert_eq!(imp.cycles.len(), 3);
        for (a, b) in imp.cycles.iter().zip(&swamp.cycles) {
            assert_eq!(a.solution, b.solution);
            assert_eq!(a.mask, b.mask);
        }
    }

    #[test]
    fn parallel_equals_sequential() {
        let (model, data) = setup();
        let mut cfg = lottery_cfg();
        cfg.particles = 3;
        cfg.cycles = 1;
        let seq = run_swamp(&model, &data, &cfg, &NoObserver).unwrap();
        cfg.parallel = true;
        let par = run_swamp(&model, &data, &cfg, &NoObserver).unwrap();
        for (a, b) in seq.cycles.iter().zip(&par.cycles) {
            for (p, q) in a.particles.iter().zip(&b.particles) {
                assert_eq!(p.solution, q.solution);
                assert_eq!(p.seed, q.seed);
            }
        }
    }

    #[test]
    fn cycles_rewind_to_ticket_and_prune_monotonically() {
        struct Starts(Mutex<Vec<(ParticleId, Vec<f32>)>>);
        impl TrainObserver for Starts {
            fn on_start(&self, id: ParticleId, params: &[f32]) {
                self.0.lock().unwrap().push((id, params.to_vec()));
            }
        }
        let (model, data) = setup();
        let cfg = lottery_cfg();
        let obs = Starts(Mutex::new(Vec::new()));
        let run = run_swamp(&model, &data, &cfg, &obs).unwrap();
        let starts = obs.0.into_inner().unwrap();
        for (id, start) in starts.iter().filter(|(id, _)| id.particle > 0) {
            let mask = &run.cycles[id.cycle].mask;
            let expected = rewind(&run.ticket.weights, &model.expand_mask(mask).unwrap());
            assert_eq!(start.as_slice(), expected.values());
        }
        for pair in run.cycles.windows(2) {
            assert!(pair[1].mask.is_subset_of(&pair[0].mask));
            let ev = pair[1].prune.as_ref().unwrap();
            assert_eq!(ev.kept, crate::pruning::kept_count(0.8, pair[0].mask.support()));
        }
        // particle seeds distinct within a cycle
        for c in &run.cycles {
            assert_ne!(c.particles[0].seed, c.particles[1].seed);
        }
    }

    #[test]
    fn noise_free_blobs_are_learnable() {
        let model = Model::new(ModelSpec::mlp(2, &[16], 4), PrunableKinds::Auto).unwrap();
        let data = make_synthetic(SyntheticKind::Blobs, 200, 4, 0.0, 1).unwrap();
        let mut cfg = lottery_cfg();
        cfg.train = train_cfg(10);
        let dense = run_dense(&model, &data, &cfg, &NoObserver).unwrap();
        let acc = evaluate(&model, &dense.solution, None, &data).unwrap().accuracy;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn keep_almost_all_matches_plain_training() {
        let (model, data) = setup();
        let mut cfg = lottery_cfg();
        cfg.cycles = 1;
        cfg.keep_ratio = 1.0 - 1e-9;
        let run = run_imp(&model, &data, &cfg, &NoObserver).unwrap();
        let c1 = &run.cycles[1];
        assert_eq!(c1.mask, model.dense_mask());
        let id = ParticleId { cycle: 1, particle: 1 };
        let seed = rng::particle_seed(cfg.seed, 1, 1);
        let plain =
            train_particle(&model, &run.ticket.weights, &model.dense_mask(), seed, &cfg.train, &data, TrainMode::Sgd, id, &NoObserver)
                .unwrap();
        assert_eq!(c1.solution, plain.solution);
    }
}
