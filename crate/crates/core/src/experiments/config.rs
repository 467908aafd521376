//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys are dotted (`sgd.lr`). Unknown or repeated keys are errors. Values
//! are written back in a canonical form so that `parse(serialize(c)) == c`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{load_idx, make_synthetic, Dataset, Split, SyntheticKind};
use crate::error::{Error, Result};
use crate::lottery::{LotteryConfig, SwaSettings, TrainConfig};
use crate::model::{parse_shape, shape_str, LayerSpec, ModelSpec, PrunableKinds};
use crate::optim::{Schedule, SgdConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        /// Training samples, holdout included.
        samples: usize,
        test_samples: usize,
        noise: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Tail of the training file order kept aside for temperature scaling.
    pub holdout_fraction: f64,
    pub standardize: bool,
}

/// How often test metrics are computed during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalCadence {
    Cycle,
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub prunable: PrunableKinds,
    pub data: DataConfig,
    pub seed: u64,
    pub cycles: usize,
    pub keep_ratio: f64,
    pub particles: usize,
    pub particle_schedule: Vec<usize>,
    pub rewind_steps: usize,
    pub rewind_lr: f64,
    pub train: TrainConfig,
    pub eval_cadence: EvalCadence,
    pub temperature_scaling: bool,
    pub output_dir: Option<PathBuf>,
    pub save_particles: bool,
    pub parallel: bool,
}

/// Training, holdout and test splits built from a [`DataConfig`].
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parsed<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }

    fn required_parsed<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.required(key)?;
        v.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
    }

    fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.take(key).as_deref() {
            None | Some("none") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}"))),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, found `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: bad list entry `{s}`"))))
        .collect()
}

fn parse_schedule(v: &str) -> Result<Schedule> {
    match v {
        "cosine" => Ok(Schedule::Cosine { total_steps: 0 }),
        "constant" => Ok(Schedule::Constant),
        _ => {
            let body = v
                .strip_prefix("piecewise:")
                .ok_or_else(|| Error::Config(format!("unknown schedule `{v}`")))?;
            body.split(',')
                .map(|p| {
                    let (s, lr) = p
                        .split_once('@')
                        .ok_or_else(|| Error::Config(format!("piecewise entry `{p}` needs STEP@LR")))?;
                    let step = s.trim().parse().map_err(|_| Error::Config(format!("bad step `{s}`")))?;
                    let lr = lr.trim().parse().map_err(|_| Error::Config(format!("bad learning rate `{lr}`")))?;
                    Ok((step, lr))
                })
                .collect::<Result<_>>()
                .map(Schedule::Piecewise)
        }
    }
}

fn schedule_str(s: &Schedule) -> String {
    match s {
        Schedule::Constant => "constant".into(),
        Schedule::Cosine { .. } => "cosine".into(),
        Schedule::Piecewise(points) => {
            let parts: Vec<String> = points.iter().map(|(s, lr)| format!("{s}@{lr}")).collect();
            format!("piecewise:{}", parts.join(","))
        }
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn list_str(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn default_classes(layers: &[LayerSpec]) -> Option<usize> {
    match layers.last()? {
        LayerSpec::Dense { outputs, .. } => Some(*outputs),
        _ => None,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim().to_string();
            if let Some((first, _)) = map.insert(key.clone(), (n + 1, v.trim().to_string())) {
                return Err(Error::Config(format!("line {}: `{key}` already set on line {first}", n + 1)));
            }
        }
        Self::from_entries(Entries { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies `key=value` overrides on top of this configuration.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut text = self.serialize();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` needs key=value", o.as_ref())))?;
            let key = k.trim();
            let line = format!("{key} = {}", v.trim());
            match lines.iter_mut().find(|l| l.split_once('=').is_some_and(|(lk, _)| lk.trim() == key)) {
                Some(l) => *l = line,
                None => lines.push(line),
            }
        }
        text = lines.join("\n");
        Self::parse(&text)
    }

    fn from_entries(mut e: Entries) -> Result<Self> {
        let input_shape = parse_shape(&e.required("model.input")?)?;
        let layers = ModelSpec::parse_layers(&e.required("model.layers")?)?;
        let classes = match e.take("model.classes") {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("`model.classes`: bad value `{v}`")))?,
            None => default_classes(&layers)
                .ok_or_else(|| Error::Config("`model.classes` is required when the last layer is not dense".into()))?,
        };
        let model = ModelSpec { input_shape, layers, classes };
        model.validate()?;
        let prunable = e.parsed("model.prunable", PrunableKinds::Auto)?;

        let source = match e.required("data.source")?.as_str() {
            "synthetic" => DataSource::Synthetic {
                kind: e.parsed("data.kind", SyntheticKind::Blobs)?,
                samples: e.parsed("data.samples", 2000)?,
                test_samples: e.parsed("data.test_samples", 1000)?,
                noise: e.parsed("data.noise", 0.1)?,
                seed: e.parsed("data.seed", 0)?,
            },
            "idx" => DataSource::Idx {
                train_images: e.required("data.train_images")?.into(),
                train_labels: e.required("data.train_labels")?.into(),
                test_images: e.required("data.test_images")?.into(),
                test_labels: e.required("data.test_labels")?.into(),
                limit: e.optional("data.limit")?,
                test_limit: e.optional("data.test_limit")?,
            },
            other => return Err(Error::Config(format!("unknown data source `{other}` (synthetic or idx)"))),
        };
        let data = DataConfig {
            source,
            holdout_fraction: e.parsed("data.holdout_fraction", 0.1)?,
            standardize: parse_bool("data.standardize", &e.take("data.standardize").unwrap_or("true".into()))?,
        };

        let seed = {
            let v = e.required("seed")?;
            v.parse().map_err(|_| Error::Config(format!("`seed`: bad value `{v}`")))?
        };
        let sgd = SgdConfig {
            lr0: e.required_parsed("sgd.lr")?,
            momentum: e.parsed("sgd.momentum", 0.9)?,
            weight_decay: e.parsed("sgd.weight_decay", 1e-4)?,
            schedule: parse_schedule(&e.take("sgd.schedule").unwrap_or("cosine".into()))?,
        };
        let period = match e.take("swa.period").as_deref() {
            None | Some("epoch") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Config(format!("`swa.period`: bad value `{v}`")))?),
        };
        let swa = SwaSettings {
            enabled: parse_bool("swa.enabled", &e.take("swa.enabled").unwrap_or("true".into()))?,
            start_fraction: e.parsed("swa.start_fraction", 0.75)?,
            lr: e.parsed("swa.lr", 0.05)?,
            period_steps: period,
        };
        let train = TrainConfig {
            epochs: e.required_parsed("train.epochs")?,
            batch_size: e.required_parsed("train.batch_size")?,
            optimizer: sgd,
            swa,
        };
        let cadence = match e.take("eval.cadence").as_deref() {
            None | Some("cycle") => EvalCadence::Cycle,
            Some("epoch") => EvalCadence::Epoch,
            Some(v) => return Err(Error::Config(format!("`eval.cadence`: expected cycle or epoch, found `{v}`"))),
        };
        let schedule = match e.take("lottery.particle_schedule") {
            Some(v) => parse_list("lottery.particle_schedule", &v)?,
            None => Vec::new(),
        };
        let rewind_lr = e.optional("lottery.rewind_lr")?;
        let cfg = ExperimentConfig {
            model,
            prunable,
            data,
            seed,
            cycles: e.parsed("lottery.cycles", 10)?,
            keep_ratio: e.parsed("lottery.keep_ratio", 0.8)?,
            particles: e.parsed("lottery.particles", 4)?,
            particle_schedule: schedule,
            rewind_steps: e.parsed("lottery.rewind_steps", 0)?,
            rewind_lr: rewind_lr.unwrap_or(train.optimizer.lr0),
            train,
            eval_cadence: cadence,
            temperature_scaling: parse_bool(
                "eval.temperature_scaling",
                &e.take("eval.temperature_scaling").unwrap_or("true".into()),
            )?,
            output_dir: e.optional::<PathBuf>("output.dir")?,
            save_particles: parse_bool("output.save_particles", &e.take("output.save_particles").unwrap_or("false".into()))?,
            parallel: parse_bool("run.parallel", &e.take("run.parallel").unwrap_or("true".into()))?,
        };
        if let Some((key, (line, _))) = e.map.iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lottery().validate()?;
        let h = self.data.holdout_fraction;
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::Config(format!("`data.holdout_fraction` {h} is outside (0, 1)")));
        }
        Ok(())
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("model.input", shape_str(&self.model.input_shape)),
            ("model.layers", self.model.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")),
            ("model.classes", self.model.classes.to_string()),
            ("model.prunable", self.prunable.to_string()),
        ];
        match &self.data.source {
            DataSource::Synthetic { kind, samples, test_samples, noise, seed } => out.extend([
                ("data.source", "synthetic".to_string()),
                ("data.kind", kind.to_string()),
                ("data.samples", samples.to_string()),
                ("data.test_samples", test_samples.to_string()),
                ("data.noise", noise.to_string()),
                ("data.seed", seed.to_string()),
            ]),
            DataSource::Idx { train_images, train_labels, test_images, test_labels, limit, test_limit } => out.extend([
                ("data.source", "idx".to_string()),
                ("data.train_images", train_images.display().to_string()),
                ("data.train_labels", train_labels.display().to_string()),
                ("data.test_images", test_images.display().to_string()),
                ("data.test_labels", test_labels.display().to_string()),
                ("data.limit", opt_str(limit)),
                ("data.test_limit", opt_str(test_limit)),
            ]),
        }
        let t = &self.train;
        out.extend([
            ("data.holdout_fraction", self.data.holdout_fraction.to_string()),
            ("data.standardize", self.data.standardize.to_string()),
            ("lottery.cycles", self.cycles.to_string()),
            ("lottery.keep_ratio", self.keep_ratio.to_string()),
            ("lottery.particles", self.particles.to_string()),
            ("lottery.particle_schedule", list_str(&self.particle_schedule)),
            ("lottery.rewind_steps", self.rewind_steps.to_string()),
            ("lottery.rewind_lr", self.rewind_lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("sgd.lr", t.optimizer.lr0.to_string()),
            ("sgd.momentum", t.optimizer.momentum.to_string()),
            ("sgd.weight_decay", t.optimizer.weight_decay.to_string()),
            ("sgd.schedule", schedule_str(&t.optimizer.schedule)),
            ("swa.enabled", t.swa.enabled.to_string()),
            ("swa.start_fraction", t.swa.start_fraction.to_string()),
            ("swa.lr", t.swa.lr.to_string()),
            ("swa.period", t.swa.period_steps.map_or_else(|| "epoch".into(), |p| p.to_string())),
            (
                "eval.cadence",
                match self.eval_cadence {
                    EvalCadence::Cycle => "cycle".into(),
                    EvalCadence::Epoch => "epoch".into(),
                },
            ),
            ("eval.temperature_scaling", self.temperature_scaling.to_string()),
            ("output.dir", opt_str(&self.output_dir.as_ref().map(|p| p.display()))),
            ("output.save_particles", self.save_particles.to_string()),
            ("run.parallel", self.parallel.to_string()),
        ]);
        out
    }

    pub fn serialize(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the entries that affect results (everything except
    /// `output.dir` and `run.parallel`).
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k == "output.dir" || k == "run.parallel" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn lottery(&self) -> LotteryConfig {
        LotteryConfig {
            seed: self.seed,
            cycles: self.cycles,
            keep_ratio: self.keep_ratio,
            particles: self.particles,
            particle_schedule: self.particle_schedule.clone(),
            rewind_steps: self.rewind_steps,
            rewind_lr: self.rewind_lr,
            train: self.train.clone(),
            parallel: self.parallel,
        }
    }

    /// Loads or generates the data, carves the holdout split off the end of
    /// the training set and standardizes all splits with training statistics.
    pub fn load_data(&self) -> Result<DataBundle> {
        let classes = self.model.classes;
        let (full, test) = match &self.data.source {
            DataSource::Synthetic { kind, samples, test_samples, noise, seed } => {
                if *test_samples == 0 {
                    return Err(Error::Config("`data.test_samples` must be positive".into()));
                }
                let all = make_synthetic(*kind, samples + test_samples, classes, *noise, *seed)?;
                let train = all.slice(0..*samples)?;
                let test = all.slice(*samples..samples + test_samples)?.with_split(Split::Test);
                (train, test)
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels, limit, test_limit } => {
                let train = load_idx(train_images, train_labels, *limit)?;
                let test = load_idx(test_images, test_labels, *test_limit)?.with_split(Split::Test);
                (train, test)
            }
        };
        let shape = &self.model.input_shape;
        let full = full.reshape_samples(shape)?.with_classes(classes)?;
        let test = test.reshape_samples(shape)?.with_classes(classes)?;
        let (mut train, mut holdout) = full.split_holdout(self.data.holdout_fraction)?;
        let mut test = test;
        if self.data.standardize {
            let stats = train.compute_norm_stats();
            train.standardize(&stats)?;
            holdout.standardize(&stats)?;
            test.standardize(&stats)?;
        }
        Ok(DataBundle { train, holdout, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
        # desk spiral task
        seed = 7
        model.input = 2
        model.layers = dense:2:16, relu, dense:16:3
        data.source = synthetic
        data.kind = spirals
        train.epochs = 20
        train.batch_size = 64
        sgd.lr = 0.1
    ";

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.classes, 3);
        assert_eq!(c.keep_ratio, 0.8);
        assert_eq!(c.particles, 4);
        assert_eq!(c.train.optimizer.momentum, 0.9);
        assert_eq!(c.train.swa.start_fraction, 0.75);
        assert_eq!(c.rewind_lr, c.train.optimizer.lr0);
        assert!(c.output_dir.is_none());
    }

    #[test]
    fn round_trip_is_lossless() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let d = ExperimentConfig::parse(&c.serialize()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.serialize(), d.serialize());

        let e = c
            .with_overrides(&[
                "sgd.schedule=piecewise:0@0.1,50@0.01",
                "swa.period=7",
                "lottery.particle_schedule=1,1,4",
                "output.dir=/tmp/x y",
                "sgd.weight_decay=0.00012345678901234",
                "eval.cadence=epoch",
            ])
            .unwrap();
        assert_eq!(e.train.optimizer.schedule, Schedule::Piecewise(vec![(0, 0.1), (50, 0.01)]));
        assert_eq!(ExperimentConfig::parse(&e.serialize()).unwrap(), e);
    }

    #[test]
    fn idx_round_trip() {
        let text = "seed=1\nmodel.input=1x28x28\nmodel.layers=flatten,dense:784:10\ndata.source=idx\n\
                    data.train_images=a\ndata.train_labels=b\ndata.test_images=c\ndata.test_labels=d\ndata.limit=2000\n\
                    train.epochs=1\ntrain.batch_size=8\nsgd.lr=0.1\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert!(matches!(c.data.source, DataSource::Idx { limit: Some(2000), test_limit: None, .. }));
        assert_eq!(ExperimentConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn errors_are_specific() {
        let missing = ExperimentConfig::parse("model.input=2\nmodel.layers=dense:2:3\ndata.source=synthetic").unwrap_err();
        assert!(missing.to_string().contains("seed"), "{missing}");
        let no_lr = ExperimentConfig::parse(&MINIMAL.replace("sgd.lr = 0.1", "")).unwrap_err();
        assert!(no_lr.to_string().contains("sgd.lr"), "{no_lr}");
        let unknown = ExperimentConfig::parse(&format!("{MINIMAL}\nsgd.lrr = 3")).unwrap_err();
        assert!(unknown.to_string().contains("sgd.lrr"), "{unknown}");
        let dup = ExperimentConfig::parse(&format!("{MINIMAL}\nseed = 8")).unwrap_err();
        assert!(dup.to_string().contains("already set"), "{dup}");
        assert!(ExperimentConfig::parse(&format!("{MINIMAL}\nlottery.keep_ratio = 1.5")).is_err());
        assert!(ExperimentConfig::parse("seed=1\nmodel.input=2\nmodel.layers=dense:3:3\ndata.source=synthetic").is_err());
    }

    #[test]
    fn digest_ignores_output_location() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let d = c.with_overrides(&["output.dir=elsewhere", "run.parallel=false"]).unwrap();
        assert_eq!(c.digest(), d.digest());
        let e = c.with_overrides(&["seed=8"]).unwrap();
        assert_ne!(c.digest(), e.digest());
    }

    #[test]
    fn data_bundle_splits() {
        let c = ExperimentConfig::parse(&format!("{MINIMAL}\ndata.samples = 200\ndata.test_samples = 50")).unwrap();
        let b = c.load_data().unwrap();
        assert_eq!((b.train.len(), b.holdout.len(), b.test.len()), (180, 20, 50));
        assert_eq!(b.train.classes(), 3);
        assert_eq!(b.holdout.split(), Split::Holdout);
        assert!(b.test.norm().is_some());
    }
}
