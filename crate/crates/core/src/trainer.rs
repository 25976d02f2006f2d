//! Optimization loops and the evaluation suite.

use std::io::{BufRead, Write};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::denoiser::{ArchConfig, Condition, ConditionBatch, DenoiserParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::{
    dpo_loss, pretrain_loss, total_loss, value_and_grad, CpoBatch, DpoBatch, Models, NoiseDraw,
    PreferenceConfig,
};
use crate::rng::{self, Rng};
use crate::sampling::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::toyworld::{sample_dataset, Curated, DiffusionGenerator, Generator, Pipeline, ToyTask};

/// How training timesteps are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimePolicy {
    Uniform,
    Fixed(usize),
}

impl TimePolicy {
    fn draw(&self, steps: usize, r: &mut Rng) -> usize {
        match *self {
            TimePolicy::Uniform => r.random_range(1..=steps),
            TimePolicy::Fixed(t) => t,
        }
    }

    fn check(&self, steps: usize) -> Result<()> {
        match *self {
            TimePolicy::Fixed(t) if t == 0 || t > steps => Err(Error::TimestepOutOfRange { t, t_max: steps }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub preference: PreferenceConfig,
    pub t_policy: TimePolicy,
    /// Probability of replacing a condition by the null condition.
    pub cond_dropout: f64,
    /// Checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
    /// Cadence of loss records in the metrics stream; 0 disables.
    pub log_every: usize,
}

impl TrainConfig {
    /// Defaults for pretraining the base denoiser.
    pub fn base() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 256,
            steps: 150,
            seed: 0,
            preference: PreferenceConfig::default(),
            t_policy: TimePolicy::Uniform,
            cond_dropout: 0.1,
            checkpoint_every: 0,
            log_every: 100,
        }
    }

    /// Defaults for preference fine-tuning.
    pub fn finetune() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 64,
            steps: 2000,
            cond_dropout: 0.0,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment parameters must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("condition dropout must lie in [0, 1)");
        }
        self.preference.validate()
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &DenoiserParams<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut DenoiserParams<f64>, grads: &[Tensor<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params.tensor_mut(i).iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *p -= self.lr * (update + self.weight_decay * *p);
            }
        }
    }
}

/// Receives progress from the training loops.
pub trait TrainObserver {
    fn metric(&mut self, _step: usize, _name: &str, _value: f64) {}
    fn checkpoint(&mut self, _step: usize, _params: &DenoiserParams<f64>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Per-step losses of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: DenoiserParams<f64>,
    pub losses: Vec<f64>,
}

fn draw_for(ts: Vec<usize>, dim: usize, r: &mut Rng) -> NoiseDraw<f64> {
    NoiseDraw::with_ts(ts, dim, r)
}

fn finish_step(
    step: usize,
    loss: f64,
    cfg: &TrainConfig,
    params: &DenoiserParams<f64>,
    obs: &mut dyn TrainObserver,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { step });
    }
    if cfg.log_every > 0 && step % cfg.log_every == 0 {
        obs.metric(step, "loss", loss);
    }
    if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
        obs.checkpoint(step, params)?;
    }
    Ok(())
}

/// Pretrains a denoiser on fresh draws from the task. Step `s` (1-based)
/// draws everything from stream `train/{seed}/step/{s}`.
pub fn train_base(
    task: &ToyTask,
    schedule: &NoiseSchedule<f64>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    train_base_with_arch(task, task.arch(), schedule, cfg, obs)
}

/// [`train_base`] with a network shape other than the task default.
pub fn train_base_with_arch(
    task: &ToyTask,
    arch: ArchConfig,
    schedule: &NoiseSchedule<f64>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.t_policy.check(schedule.steps())?;
    if arch.condition != task.condition_space() || arch.data_dim != task.data_dim() {
        return Err(Error::InvalidArch(format!(
            "{:?} with data_dim {} does not fit the task",
            arch.condition, arch.data_dim
        )));
    }
    let mut params = DenoiserParams::init(arch, cfg.seed)?;
    let mut opt = AdamW::new(cfg, &params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let dim = task.data_dim();
    for step in 1..=cfg.steps {
        let mut r = rng::item_stream("train", cfg.seed, "step", step);
        let mut x0 = Vec::with_capacity(cfg.batch_size * dim);
        let mut conds = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let c = task.sample_condition(&mut r);
            x0.extend(task.sample_given(&c, &mut r)?);
            let dropped = r.random::<f64>() < cfg.cond_dropout;
            conds.push((!dropped).then_some(c));
        }
        let x0 = Tensor::new(vec![cfg.batch_size, dim], x0)?;
        let refs: Vec<Option<&Condition>> = conds.iter().map(|c| c.as_ref()).collect();
        let cb = ConditionBatch::new(params.arch(), &refs)?;
        let ts = (0..cfg.batch_size).map(|_| cfg.t_policy.draw(schedule.steps(), &mut r)).collect();
        let draw = draw_for(ts, dim, &mut r);
        let (loss, grads) = value_and_grad(&params, |b| pretrain_loss(&params, b, schedule, &x0, &cb, &draw))
            .map_err(|e| diverged_or(e, step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut params, &grads);
        losses.push(loss);
        finish_step(step, loss, cfg, &params, obs)?;
    }
    Ok(TrainOutcome { params, losses })
}

fn diverged_or(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step },
        e => e,
    }
}

/// Fine-tunes a copy of `base` on curated preferences. The reference is a
/// frozen clone of `base`. The CPO path minimizes the total loss with the
/// regularizer on an independent `(t', eps')` draw; the DPO path
/// minimizes the Diffusion-DPO loss.
pub fn finetune(
    method: Pipeline,
    base: &DenoiserParams<f64>,
    data: &Curated,
    schedule: &NoiseSchedule<f64>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.t_policy.check(schedule.steps())?;
    if data.pipeline() != method {
        return Err(Error::InvalidArgument(format!(
            "{method:?} fine-tuning given a {:?} dataset",
            data.pipeline()
        )));
    }
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::InvalidArgument("empty curated dataset".into()));
    }
    let reference = base.clone_as_reference();
    let ref_hash = reference.fingerprint();
    let mut params = base.clone();
    let mut opt = AdamW::new(cfg, &params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let dim = base.arch().data_dim;
    let pick = |r: &mut Rng| r.random_range(0..data.len());

    for step in 1..=cfg.steps {
        let mut r = rng::item_stream("finetune", cfg.seed, "step", step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| pick(&mut r)).collect();
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| cfg.t_policy.draw(schedule.steps(), &mut r))
            .collect();
        let draw = draw_for(ts, dim, &mut r);
        let theta = &params;
        let models = Models {
            theta,
            reference: &reference,
            schedule,
        };
        let (loss, grads) = match data {
            Curated::Cpo(items) => {
                let x0: Vec<f64> = idx.iter().flat_map(|&i| items[i].x0.iter().copied()).collect();
                let c_w: Vec<Condition> = idx.iter().map(|&i| items[i].c_w.clone()).collect();
                let c_l: Vec<Condition> = idx.iter().map(|&i| items[i].c_l.clone()).collect();
                let batch = CpoBatch::new(theta, Tensor::new(vec![idx.len(), dim], x0)?, &c_w, &c_l)?;
                let reg_ts = (0..cfg.batch_size)
                    .map(|_| cfg.t_policy.draw(schedule.steps(), &mut r))
                    .collect();
                let reg = draw_for(reg_ts, dim, &mut r);
                value_and_grad(theta, |b| total_loss(models, b, &batch, &draw, &reg, &cfg.preference))
            }
            Curated::Dpo(items) => {
                let xw: Vec<f64> = idx.iter().flat_map(|&i| items[i].x0_w.iter().copied()).collect();
                let xl: Vec<f64> = idx.iter().flat_map(|&i| items[i].x0_l.iter().copied()).collect();
                let c: Vec<Condition> = idx.iter().map(|&i| items[i].c.clone()).collect();
                let batch = DpoBatch::new(
                    theta,
                    Tensor::new(vec![idx.len(), dim], xw)?,
                    Tensor::new(vec![idx.len(), dim], xl)?,
                    &c,
                )?;
                value_and_grad(theta, |b| dpo_loss(models, b, &batch, &draw, &cfg.preference))
            }
        }
        .map_err(|e| diverged_or(e, step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        opt.step(&mut params, &grads);
        losses.push(loss);
        finish_step(step, loss, cfg, &params, obs)?;
    }
    debug_assert_eq!(reference.fingerprint(), ref_hash);
    Ok(TrainOutcome { params, losses })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub controllability: f64,
    pub oracle_controllability: f64,
    /// `oracle_controllability - controllability`.
    pub error_rate: f64,
    /// Unbiased squared MMD against a fresh real set.
    pub mmd: f64,
    pub guidance: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Generated samples that were non-finite and excluded.
    pub non_finite: usize,
    /// SHA-256 of the requested conditions.
    pub condition_hash: String,
}

impl EvalReport {
    pub fn records(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("controllability", self.controllability),
            ("oracle_controllability", self.oracle_controllability),
            ("error_rate", self.error_rate),
            ("mmd", self.mmd),
            ("guidance", self.guidance),
            ("n_samples", self.n_samples as f64),
            ("non_finite", self.non_finite as f64),
        ]
    }
}

/// `1 - after / before`, the relative reduction of an error rate.
pub fn relative_reduction(before: f64, after: f64) -> f64 {
    1.0 - after / before
}

fn condition_hash(conds: &[Condition]) -> String {
    let mut h = Sha256::new();
    for c in conds {
        match c {
            Condition::Discrete(b) => h.update(format!("d{b};")),
            Condition::Continuous(v) => {
                h.update(b"c");
                for x in v {
                    h.update(x.to_le_bytes());
                }
                h.update(b";");
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Gaussian-kernel bandwidth from the median pairwise distance of `xs`.
pub fn median_bandwidth(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(sq_dist(&xs[i], &xs[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased estimate of squared MMD with `k(x, y) = exp(-|x - y|^2 / (2 sigma^2))`.
pub fn mmd_unbiased(xs: &[Vec<f64>], ys: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InvalidArgument("MMD needs at least two points per set".into()));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in xs {
        for y in ys {
            cross += k(x, y);
        }
    }
    cross /= (xs.len() * ys.len()) as f64;
    Ok(within(xs) + within(ys) - 2.0 * cross)
}

pub const MIN_EVAL_SAMPLES: usize = 100;

/// Requested conditions and sampler streams of one evaluation.
fn eval_plan(task: &ToyTask, n: usize, seed: u64) -> (Vec<Condition>, Vec<Rng>) {
    let conds = (0..n)
        .map(|i| task.sample_condition(&mut rng::item_stream("eval", seed, "cond", i)))
        .collect();
    let streams = (0..n).map(|i| rng::item_stream("eval", seed, "sample", i)).collect();
    (conds, streams)
}

/// Evaluates any generator: controllability on `n` uniformly drawn
/// conditions, the detector's accuracy on a fresh real set of equal size,
/// and MMD between generated and real points.
pub fn evaluate_generator(
    task: &ToyTask,
    generator: &dyn Generator,
    n: usize,
    guidance: f64,
    seed: u64,
) -> Result<EvalReport> {
    if n < MIN_EVAL_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_EVAL_SAMPLES} samples")));
    }
    let (conds, mut streams) = eval_plan(task, n, seed);
    let samples = generator.generate(&conds, &mut streams)?;
    let real = sample_dataset(task, n, seed ^ 0x005e_ed0f_7ea1)?;

    let mut hits = 0usize;
    let mut finite = Vec::with_capacity(n);
    for (x, c) in samples.iter().zip(&conds) {
        if x.iter().all(|v| v.is_finite()) {
            if task.detect(x)? == *c {
                hits += 1;
            }
            finite.push(x.clone());
        }
    }
    let non_finite = n - finite.len();
    let mut oracle_hits = 0usize;
    for e in &real {
        if task.detect(&e.x0)? == e.c {
            oracle_hits += 1;
        }
    }
    let real_x: Vec<Vec<f64>> = real.into_iter().map(|e| e.x0).collect();
    let controllability = if finite.is_empty() { 0.0 } else { hits as f64 / finite.len() as f64 };
    let oracle_controllability = oracle_hits as f64 / n as f64;
    let mmd = if finite.len() >= 2 {
        mmd_unbiased(&finite, &real_x, median_bandwidth(&real_x))?
    } else {
        f64::NAN
    };
    Ok(EvalReport {
        controllability,
        oracle_controllability,
        error_rate: oracle_controllability - controllability,
        mmd,
        guidance,
        n_samples: n,
        seed,
        non_finite,
        condition_hash: condition_hash(&conds),
    })
}

/// Evaluates a denoiser through the full guided reverse chain.
pub fn evaluate(
    params: &DenoiserParams<f64>,
    task: &ToyTask,
    schedule: &NoiseSchedule<f64>,
    n: usize,
    guidance: f64,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let g = DiffusionGenerator {
        params,
        schedule,
        sampler: SamplerConfig { guidance, workers },
    };
    evaluate_generator(task, &g, n, guidance, seed)
}

/// One evaluation per scale, all sharing the same conditions and streams.
pub fn cfg_sweep(
    params: &DenoiserParams<f64>,
    task: &ToyTask,
    schedule: &NoiseSchedule<f64>,
    scales: &[f64],
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<EvalReport>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no guidance scales given".into()));
    }
    scales
        .iter()
        .map(|&w| evaluate(params, task, schedule, n, w, seed, workers))
        .collect()
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRecord {
    /// `run_id step metric value seed`, tab-separated. Values use the
    /// shortest representation that parses back exactly.
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{:?}\t{}", self.run_id, self.step, self.metric, self.value, self.seed)
    }

    pub fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |msg: &str| Error::Record {
            line: lineno,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        Ok(Self {
            run_id: f[0].into(),
            step: f[1].parse().map_err(|_| bad("bad step"))?,
            metric: f[2].into(),
            value: f[3].parse().map_err(|_| bad("bad value"))?,
            seed: f[4].parse().map_err(|_| bad("bad seed"))?,
        })
    }
}

pub fn write_metrics(records: &[MetricRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_metrics(r: impl BufRead) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(MetricRecord::parse(&line, i + 1)?);
        }
    }
    Ok(out)
}

/// Collects training metrics into records for one run.
pub struct MetricsCollector {
    pub run_id: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
}

impl MetricsCollector {
    pub fn new(run_id: impl Into<String>, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            run_id: self.run_id.clone(),
            step,
            metric: metric.into(),
            value,
            seed: self.seed,
        });
    }
}

impl TrainObserver for MetricsCollector {
    fn metric(&mut self, step: usize, name: &str, value: f64) {
        self.push(step, name, value);
    }
}
