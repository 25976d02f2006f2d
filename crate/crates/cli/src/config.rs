//! Flat `section.key=value` run configuration.
//!
//! Files are line-oriented. Blank lines and lines starting with `#` are
//! ignored, every other line is `key=value`. Keys absent from a file keep
//! their defaults, unknown keys are rejected. [`RunConfig::to_text`] writes
//! every key in sorted order, so loading and rewriting a canonical file
//! reproduces it byte for byte.

use std::collections::BTreeMap;
use std::path::PathBuf;

use prefdiff::denoiser::ArchConfig;
use prefdiff::losses::{CpoWeight, PreferenceConfig, DEFAULT_ALPHA, DEFAULT_MARGIN, DEFAULT_REG_LAMBDA};
use prefdiff::schedule::{MeanPrefactor, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use prefdiff::toyworld::{DpoCuration, TaskKind, ToyTask};
use prefdiff::trainer::{TimePolicy, TrainConfig, MIN_EVAL_SAMPLES};
use prefdiff::variancelab::MIN_VARIANCE_DRAWS;
use prefdiff::NoiseSchedule;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Forces a single worker.
    pub deterministic: bool,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub prefactor: MeanPrefactor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden: usize,
    pub depth: usize,
    pub time_features: usize,
    pub cond_embed: usize,
}

/// Optimizer and loop settings shared by `train.*` and `finetune.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub t_policy: TimePolicy,
    pub cond_dropout: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            adam_eps: c.adam_eps,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            steps: c.steps,
            t_policy: c.t_policy,
            cond_dropout: c.cond_dropout,
            checkpoint_every: c.checkpoint_every,
            log_every: c.log_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    /// `beta_kl * T * omega`; the KL temperature is derived from it.
    pub alpha: f64,
    pub margin: f64,
    pub reg_lambda: f64,
    pub weight: CpoWeight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurateSection {
    pub sources: usize,
    pub n_samples: usize,
    pub delta: f64,
    /// Guidance scale the base model samples with during curation.
    pub guidance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub n_samples: usize,
    pub guidance: f64,
    pub cfg_scales: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSection {
    pub n_draws: usize,
    /// One matched comparison per fixed timestep.
    pub timesteps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub task: ToyTask,
    pub train: TrainSection,
    pub finetune: TrainSection,
    pub loss: LossSection,
    pub curate: CurateSection,
    pub eval: EvalSection,
    pub variance: VarianceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let dpo = DpoCuration::default();
        Self {
            run: RunSection {
                seed: 0,
                deterministic: false,
                out: PathBuf::from("out"),
            },
            schedule: ScheduleSection {
                steps: DEFAULT_STEPS,
                beta_start: DEFAULT_BETA_START,
                beta_end: DEFAULT_BETA_END,
                prefactor: MeanPrefactor::Standard,
            },
            model: ModelSection {
                hidden: arch.hidden,
                depth: arch.depth,
                time_features: arch.time_features,
                cond_embed: arch.cond_embed,
            },
            task: ToyTask::discrete(),
            train: (&TrainConfig::base()).into(),
            finetune: (&TrainConfig::finetune()).into(),
            loss: LossSection {
                alpha: DEFAULT_ALPHA,
                margin: DEFAULT_MARGIN,
                reg_lambda: DEFAULT_REG_LAMBDA,
                weight: CpoWeight::Linear,
            },
            curate: CurateSection {
                sources: 1000,
                n_samples: dpo.n_samples,
                delta: dpo.delta,
                guidance: 2.0,
            },
            eval: EvalSection {
                n_samples: 500,
                guidance: 2.0,
                cfg_scales: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            },
            variance: VarianceSection {
                n_draws: 10_000,
                timesteps: vec![100, 500, 900],
            },
        }
    }
}

/// A value that lives under one config key.
pub trait Field {
    fn render(&self) -> String;
    fn assign(&mut self, s: &str) -> Result<(), String>;
}

impl Field for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
        if !v.is_finite() {
            return Err(format!("{s:?} is not finite"));
        }
        *self = v;
        Ok(())
    }
}

macro_rules! int_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn assign(&mut self, s: &str) -> Result<(), String> {
                *self = s.parse().map_err(|_| format!("{s:?} is not a non-negative integer"))?;
                Ok(())
            }
        }
    )*};
}
int_field!(usize, u64);

impl Field for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        *self = s.parse().map_err(|_| format!("{s:?} is not true or false"))?;
        Ok(())
    }
}

impl Field for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        if s.is_empty() {
            return Err("path is empty".into());
        }
        *self = PathBuf::from(s);
        Ok(())
    }
}

fn list<T: Field + Default>(s: &str) -> Result<Vec<T>, String> {
    if s.is_empty() {
        return Err("list is empty".into());
    }
    s.split(',')
        .map(|item| {
            let mut v = T::default();
            v.assign(item.trim())?;
            Ok(v)
        })
        .collect()
}

impl Field for Vec<f64> {
    fn render(&self) -> String {
        self.iter().map(Field::render).collect::<Vec<_>>().join(",")
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        *self = list(s)?;
        Ok(())
    }
}

impl Field for Vec<usize> {
    fn render(&self) -> String {
        self.iter().map(Field::render).collect::<Vec<_>>().join(",")
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        *self = list(s)?;
        Ok(())
    }
}

impl Field for TimePolicy {
    fn render(&self) -> String {
        match self {
            TimePolicy::Uniform => "uniform".into(),
            TimePolicy::Fixed(t) => format!("fixed:{t}"),
        }
    }
    fn assign(&mut self, s: &str) -> Result<(), String> {
        *self = match s.strip_prefix("fixed:") {
            _ if s == "uniform" => TimePolicy::Uniform,
            Some(t) => TimePolicy::Fixed(t.parse().map_err(|_| format!("bad timestep in {s:?}"))?),
            None => return Err(format!("{s:?} is neither uniform nor fixed:T")),
        };
        Ok(())
    }
}

/// Enums written as fixed lowercase names.
macro_rules! named_field {
    ($t:ty { $($v:path => $name:literal),* $(,)? }) => {
        impl Field for $t {
            fn render(&self) -> String {
                match self { $($v => $name.into()),* }
            }
            fn assign(&mut self, s: &str) -> Result<(), String> {
                *self = match s {
                    $($name => $v,)*
                    _ => return Err(format!("{s:?} is not one of {}", [$($name),*].join(", "))),
                };
                Ok(())
            }
        }
    };
}
named_field!(MeanPrefactor { MeanPrefactor::Standard => "standard", MeanPrefactor::Printed => "printed" });
named_field!(CpoWeight { CpoWeight::Linear => "linear", CpoWeight::Sigmoid => "sigmoid" });
named_field!(TaskKind { TaskKind::Discrete => "discrete", TaskKind::Continuous => "continuous" });

type Visitor<'a> = dyn FnMut(&'static str, &mut dyn Field) -> Result<(), CliError> + 'a;

macro_rules! train_keys {
    ($f:ident, $s:expr, $p:literal) => {
        $f(concat!($p, ".lr"), &mut $s.lr)?;
        $f(concat!($p, ".beta1"), &mut $s.beta1)?;
        $f(concat!($p, ".beta2"), &mut $s.beta2)?;
        $f(concat!($p, ".adam_eps"), &mut $s.adam_eps)?;
        $f(concat!($p, ".weight_decay"), &mut $s.weight_decay)?;
        $f(concat!($p, ".batch_size"), &mut $s.batch_size)?;
        $f(concat!($p, ".steps"), &mut $s.steps)?;
        $f(concat!($p, ".t_policy"), &mut $s.t_policy)?;
        $f(concat!($p, ".cond_dropout"), &mut $s.cond_dropout)?;
        $f(concat!($p, ".checkpoint_every"), &mut $s.checkpoint_every)?;
        $f(concat!($p, ".log_every"), &mut $s.log_every)?;
    };
}

impl RunConfig {
    /// Calls `f` once per key, in no particular order.
    fn visit(&mut self, f: &mut Visitor<'_>) -> Result<(), CliError> {
        f("run.seed", &mut self.run.seed)?;
        f("run.deterministic", &mut self.run.deterministic)?;
        f("run.out", &mut self.run.out)?;
        f("schedule.steps", &mut self.schedule.steps)?;
        f("schedule.beta_start", &mut self.schedule.beta_start)?;
        f("schedule.beta_end", &mut self.schedule.beta_end)?;
        f("schedule.prefactor", &mut self.schedule.prefactor)?;
        f("model.hidden", &mut self.model.hidden)?;
        f("model.depth", &mut self.model.depth)?;
        f("model.time_features", &mut self.model.time_features)?;
        f("model.cond_embed", &mut self.model.cond_embed)?;
        f("task.kind", &mut self.task.kind)?;
        f("task.bins", &mut self.task.bins)?;
        f("task.radius", &mut self.task.radius)?;
        f("task.radial_noise", &mut self.task.radial_noise)?;
        f("task.grid", &mut self.task.grid)?;
        f("task.jitter", &mut self.task.jitter)?;
        train_keys!(f, self.train, "train");
        train_keys!(f, self.finetune, "finetune");
        f("loss.alpha", &mut self.loss.alpha)?;
        f("loss.margin", &mut self.loss.margin)?;
        f("loss.reg_lambda", &mut self.loss.reg_lambda)?;
        f("loss.weight", &mut self.loss.weight)?;
        f("curate.sources", &mut self.curate.sources)?;
        f("curate.n_samples", &mut self.curate.n_samples)?;
        f("curate.delta", &mut self.curate.delta)?;
        f("curate.guidance", &mut self.curate.guidance)?;
        f("eval.n_samples", &mut self.eval.n_samples)?;
        f("eval.guidance", &mut self.eval.guidance)?;
        f("eval.cfg_scales", &mut self.eval.cfg_scales)?;
        f("variance.n_draws", &mut self.variance.n_draws)?;
        f("variance.timesteps", &mut self.variance.timesteps)?;
        Ok(())
    }

    /// Every key and its rendered value, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut out = BTreeMap::new();
        let mut copy = self.clone();
        copy.visit(&mut |k, v| {
            out.insert(k, v.render());
            Ok(())
        })
        .expect("rendering cannot fail");
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let mut found = false;
        self.visit(&mut |k, field| {
            if k == key {
                found = true;
                field.assign(value).map_err(|msg| CliError::Value { key: k.into(), msg })?;
            }
            Ok(())
        })?;
        if found {
            Ok(())
        } else {
            Err(CliError::UnknownKey(key.into()))
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("version={CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Parses a config over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        let mut version = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |msg: String| CliError::Syntax { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.insert(key.to_string(), i + 1).is_some() {
                return Err(syntax(format!("duplicate key {key:?}")));
            }
            if key == "version" {
                let v: u32 = value.parse().map_err(|_| syntax(format!("bad version {value:?}")))?;
                if v != CONFIG_VERSION {
                    return Err(CliError::Version(v));
                }
                version = Some(v);
                continue;
            }
            cfg.set(key, value)?;
        }
        if version.is_none() {
            return Err(CliError::MissingVersion);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        Ok(NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)?.with_prefactor(s.prefactor))
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            hidden: self.model.hidden,
            depth: self.model.depth,
            time_features: self.model.time_features,
            cond_embed: self.model.cond_embed,
            ..self.task.arch()
        }
    }

    pub fn preference(&self) -> PreferenceConfig {
        PreferenceConfig {
            margin: self.loss.margin,
            reg_lambda: self.loss.reg_lambda,
            weight: self.loss.weight,
            ..PreferenceConfig::from_alpha(self.loss.alpha, self.schedule.steps)
        }
    }

    fn train_config(&self, s: &TrainSection) -> TrainConfig {
        TrainConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            adam_eps: s.adam_eps,
            weight_decay: s.weight_decay,
            batch_size: s.batch_size,
            steps: s.steps,
            seed: self.run.seed,
            preference: self.preference(),
            t_policy: s.t_policy,
            cond_dropout: s.cond_dropout,
            checkpoint_every: s.checkpoint_every,
            log_every: s.log_every,
        }
    }

    pub fn base_training(&self) -> TrainConfig {
        self.train_config(&self.train)
    }

    pub fn finetuning(&self) -> TrainConfig {
        self.train_config(&self.finetune)
    }

    pub fn dpo_curation(&self) -> DpoCuration {
        DpoCuration {
            n_samples: self.curate.n_samples,
            delta: self.curate.delta,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: &str| {
            Err(CliError::Value {
                key: key.into(),
                msg: msg.into(),
            })
        };
        let steps = self.schedule()?.steps();
        self.task.validate()?;
        self.arch().validate()?;
        for cfg in [self.base_training(), self.finetuning()] {
            cfg.validate()?;
            if let TimePolicy::Fixed(t) = cfg.t_policy {
                if t == 0 || t > steps {
                    return bad("t_policy", "fixed timestep outside the schedule");
                }
            }
        }
        if self.curate.sources == 0 {
            return bad("curate.sources", "must be positive");
        }
        if self.curate.n_samples < 2 {
            return bad("curate.n_samples", "must be at least 2");
        }
        if self.curate.delta < 0.0 {
            return bad("curate.delta", "must be non-negative");
        }
        if self.curate.guidance < 0.0 || self.eval.guidance < 0.0 || self.eval.cfg_scales.iter().any(|&w| w < 0.0) {
            return bad("guidance", "scales must be non-negative");
        }
        if self.eval.n_samples < MIN_EVAL_SAMPLES {
            return bad("eval.n_samples", &format!("must be at least {MIN_EVAL_SAMPLES}"));
        }
        if self.variance.n_draws < MIN_VARIANCE_DRAWS {
            return bad("variance.n_draws", &format!("must be at least {MIN_VARIANCE_DRAWS}"));
        }
        if self.variance.timesteps.iter().any(|&t| t == 0 || t > steps) {
            return bad("variance.timesteps", &format!("timesteps must lie in 1..={steps}"));
        }
        Ok(())
    }
}
