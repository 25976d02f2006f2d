//! The toy controllable-generation task and the two curation pipelines.
//!
//! Data live on an annulus of radius 1 in the plane. In the discrete task
//! the condition is one of `K` angular sectors; in the continuous task it
//! is a target center on a 0.05 grid near the circle. The detector is
//! analytic in both cases.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{ArchConfig, Condition, ConditionKind, ConditionSpace, DenoiserParams};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::sampling::{ancestral_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    /// Angular sectors in the discrete task.
    pub bins: usize,
    pub radius: f64,
    /// Standard deviation of the radius in the discrete task.
    pub radial_noise: f64,
    /// Quantization step of continuous conditions.
    pub grid: f64,
    /// Half-width of the uniform offset around a continuous center.
    pub jitter: f64,
}

impl ToyTask {
    pub fn discrete() -> Self {
        Self {
            kind: TaskKind::Discrete,
            bins: 8,
            radius: 1.0,
            radial_noise: 0.1,
            grid: 0.05,
            jitter: 0.02,
        }
    }

    pub fn continuous() -> Self {
        Self {
            kind: TaskKind::Continuous,
            ..Self::discrete()
        }
    }

    pub fn data_dim(&self) -> usize {
        2
    }

    pub fn condition_space(&self) -> ConditionSpace {
        match self.kind {
            TaskKind::Discrete => ConditionSpace::Discrete { k: self.bins },
            TaskKind::Continuous => ConditionSpace::Continuous { dim: 2 },
        }
    }

    /// Default network shape for this task.
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            data_dim: 2,
            condition: self.condition_space(),
            ..ArchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.bins >= 2
            && self.radius > 0.0
            && self.radial_noise >= 0.0
            && self.grid > 0.0
            && self.jitter >= 0.0
            && self.jitter < self.grid / 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid toy task {self:?}")))
        }
    }

    fn quantize(&self, v: f64) -> f64 {
        (v / self.grid).round() * self.grid
    }

    fn sector_of(&self, x: &[f64]) -> usize {
        let a = x[1].atan2(x[0]).rem_euclid(TAU);
        ((a / TAU * self.bins as f64).floor() as usize).min(self.bins - 1)
    }

    /// The detector. The zero vector lies in the sector of angle 0.
    pub fn detect(&self, x: &[f64]) -> Result<Condition> {
        if x.len() != 2 {
            return Err(Error::InvalidArgument(format!("expected a 2-d point, got {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "detect" });
        }
        Ok(match self.kind {
            TaskKind::Discrete => Condition::Discrete(self.sector_of(x)),
            TaskKind::Continuous => Condition::Continuous(vec![self.quantize(x[0]), self.quantize(x[1])]),
        })
    }

    pub fn sample_condition(&self, r: &mut Rng) -> Condition {
        match self.kind {
            TaskKind::Discrete => Condition::Discrete(r.random_range(0..self.bins)),
            TaskKind::Continuous => {
                let a = r.random_range(0.0..TAU);
                Condition::Continuous(vec![
                    self.quantize(self.radius * a.cos()),
                    self.quantize(self.radius * a.sin()),
                ])
            }
        }
    }

    /// One draw from the data distribution given `c`.
    pub fn sample_given(&self, c: &Condition, r: &mut Rng) -> Result<Vec<f64>> {
        self.condition_space().validate(c)?;
        Ok(match c {
            Condition::Discrete(b) => {
                let width = TAU / self.bins as f64;
                let a = width * (*b as f64 + r.random::<f64>());
                let z: f64 = StandardNormal.sample(r);
                let rad = self.radius + self.radial_noise * z;
                vec![rad * a.cos(), rad * a.sin()]
            }
            Condition::Continuous(v) => v
                .iter()
                .map(|&m| m + r.random_range(-self.jitter..=self.jitter))
                .collect(),
        })
    }

    /// 1 on a detector match; otherwise minus the angular distance to the
    /// requested sector. Continuous task: minus the Euclidean error.
    pub fn control_score(&self, x: &[f64], c: &Condition) -> Result<f64> {
        self.condition_space().validate(c)?;
        match c {
            Condition::Discrete(b) => {
                if self.detect(x)? == *c {
                    return Ok(1.0);
                }
                let width = TAU / self.bins as f64;
                let a = x[1].atan2(x[0]).rem_euclid(TAU);
                let lo = width * *b as f64;
                let hi = lo + width;
                let gap = |u: f64, v: f64| {
                    let d = (u - v).rem_euclid(TAU);
                    d.min(TAU - d)
                };
                Ok(-gap(a, lo).min(gap(a, hi)))
            }
            Condition::Continuous(v) => Ok(-((x[0] - v[0]).powi(2) + (x[1] - v[1]).powi(2)).sqrt()),
        }
    }

    /// Minus the distance to the circle of radius `radius`.
    pub fn quality(&self, x: &[f64]) -> f64 {
        -(x[0].hypot(x[1]) - self.radius).abs()
    }
}

/// A ground-truth training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x0: Vec<f64>,
    pub c: Condition,
}

/// Uniform conditions and matching data, item `i` from stream `data/{seed}/item/{i}`.
pub fn sample_dataset(task: &ToyTask, n: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    task.validate()?;
    (0..n)
        .map(|i| {
            let mut r = rng::item_stream("data", seed, "item", i);
            let c = task.sample_condition(&mut r);
            let x0 = task.sample_given(&c, &mut r)?;
            Ok(Example { x0, c })
        })
        .collect()
}

/// Anything that turns conditions into samples. Row `i` must draw its
/// randomness from `streams[i]` only.
pub trait Generator {
    fn generate(&self, conds: &[Condition], streams: &mut [Rng]) -> Result<Vec<Vec<f64>>>;
}

/// A trained denoiser sampled with the full guided reverse chain.
pub struct DiffusionGenerator<'a> {
    pub params: &'a DenoiserParams<f64>,
    pub schedule: &'a NoiseSchedule<f64>,
    pub sampler: SamplerConfig,
}

impl Generator for DiffusionGenerator<'_> {
    fn generate(&self, conds: &[Condition], streams: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        let x = ancestral_sample(self.params, self.schedule, conds, streams, &self.sampler)?;
        Ok((0..conds.len()).map(|i| x.row(i).to_vec()).collect())
    }
}

/// Draws from the true conditional distribution.
pub struct OracleGenerator<'a>(pub &'a ToyTask);

impl Generator for OracleGenerator<'_> {
    fn generate(&self, conds: &[Condition], streams: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        conds.iter().zip(streams).map(|(c, r)| self.0.sample_given(c, r)).collect()
    }
}

/// Ignores the condition and returns standard normal points.
pub struct NoiseGenerator;

impl Generator for NoiseGenerator {
    fn generate(&self, conds: &[Condition], streams: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        Ok(streams
            .iter_mut()
            .take(conds.len())
            .map(|r| {
                let a: f64 = StandardNormal.sample(r);
                let b: f64 = StandardNormal.sample(r);
                vec![a, b]
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpoTriplet {
    pub x0: Vec<f64>,
    pub c_w: Condition,
    pub c_l: Condition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoPair {
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    pub c: Condition,
    pub score_w: f64,
    pub score_l: f64,
    pub quality_w: f64,
    pub quality_l: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CurationStats {
    pub sources: usize,
    pub generator_calls: usize,
    pub emitted: usize,
    /// CPO: the detected condition equalled the ground truth.
    pub same_condition: usize,
    /// DPO: the quality filter rejected the pair.
    pub quality_filtered: usize,
    /// DPO: every candidate scored the same.
    pub tied: usize,
    pub non_finite: usize,
}

fn counted_generate(
    g: &dyn Generator,
    conds: &[Condition],
    streams: &mut [Rng],
    stats: &mut CurationStats,
) -> Result<Vec<Vec<f64>>> {
    stats.generator_calls += conds.len();
    let out = g.generate(conds, streams)?;
    if out.len() != conds.len() {
        return Err(Error::InvalidArgument(format!(
            "generator returned {} samples for {} conditions",
            out.len(),
            conds.len()
        )));
    }
    Ok(out)
}

/// One generated sample per source: `c_w` is the ground truth and `c_l`
/// the condition detected on the sample. Triplets with `c_l == c_w` are
/// dropped. Item `i` samples from stream `curate/{seed}/cpo/{i}`.
pub fn curate_cpo(
    task: &ToyTask,
    generator: &dyn Generator,
    dataset: &[Example],
    seed: u64,
) -> Result<(Vec<CpoTriplet>, CurationStats)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    let mut stats = CurationStats {
        sources: dataset.len(),
        ..Default::default()
    };
    let conds: Vec<Condition> = dataset.iter().map(|e| e.c.clone()).collect();
    let mut streams: Vec<Rng> = (0..dataset.len()).map(|i| rng::item_stream("curate", seed, "cpo", i)).collect();
    let samples = counted_generate(generator, &conds, &mut streams, &mut stats)?;
    let mut out = Vec::new();
    for (ex, s) in dataset.iter().zip(samples) {
        if s.iter().any(|v| !v.is_finite()) {
            stats.non_finite += 1;
            continue;
        }
        let c_l = task.detect(&s)?;
        if c_l == ex.c {
            stats.same_condition += 1;
            continue;
        }
        out.push(CpoTriplet {
            x0: ex.x0.clone(),
            c_w: ex.c.clone(),
            c_l,
        });
    }
    stats.emitted = out.len();
    Ok((out, stats))
}

/// Variant for data without ground truth: the detector labels each `x0`
/// first and that label serves as `c_w`.
pub fn curate_cpo_unlabeled(
    task: &ToyTask,
    generator: &dyn Generator,
    x0s: &[Vec<f64>],
    seed: u64,
) -> Result<(Vec<CpoTriplet>, CurationStats)> {
    let dataset = x0s
        .iter()
        .map(|x| Ok(Example { x0: x.clone(), c: task.detect(x)? }))
        .collect::<Result<Vec<_>>>()?;
    curate_cpo(task, generator, &dataset, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoCuration {
    pub n_samples: usize,
    /// Minimum quality lead of the winner.
    pub delta: f64,
}

impl Default for DpoCuration {
    fn default() -> Self {
        Self { n_samples: 20, delta: 0.05 }
    }
}

/// `n_samples` generations per source condition; the best and worst by
/// control score form a pair if the winner's quality leads by `delta`.
/// Sample `j` of item `i` uses stream `curate/{seed}/dpo/{i}/{j}`.
pub fn curate_dpo(
    task: &ToyTask,
    generator: &dyn Generator,
    dataset: &[Example],
    cfg: &DpoCuration,
    seed: u64,
) -> Result<(Vec<DpoPair>, CurationStats)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    if cfg.n_samples < 2 || !(cfg.delta >= 0.0) {
        return Err(Error::InvalidArgument("need n_samples >= 2 and delta >= 0".into()));
    }
    let n = cfg.n_samples;
    let mut stats = CurationStats {
        sources: dataset.len(),
        ..Default::default()
    };
    let conds: Vec<Condition> = dataset.iter().flat_map(|e| std::iter::repeat_n(e.c.clone(), n)).collect();
    let mut streams: Vec<Rng> = (0..dataset.len())
        .flat_map(|i| (0..n).map(move |j| rng::stream(&format!("curate/{seed}/dpo/{i}/{j}"))))
        .collect();
    let samples = counted_generate(generator, &conds, &mut streams, &mut stats)?;

    let mut out = Vec::new();
    for (ex, group) in dataset.iter().zip(samples.chunks(n)) {
        let mut scored = Vec::with_capacity(n);
        for s in group {
            if s.iter().all(|v| v.is_finite()) {
                scored.push((task.control_score(s, &ex.c)?, s));
            }
        }
        if scored.len() < 2 {
            stats.non_finite += 1;
            continue;
        }
        let mut win = 0;
        let mut lose = 0;
        for i in 1..scored.len() {
            if scored[i].0 > scored[win].0 {
                win = i;
            }
            if scored[i].0 < scored[lose].0 {
                lose = i;
            }
        }
        if scored[win].0 == scored[lose].0 {
            stats.tied += 1;
            continue;
        }
        let (qw, ql) = (task.quality(scored[win].1), task.quality(scored[lose].1));
        if qw < ql + cfg.delta {
            stats.quality_filtered += 1;
            continue;
        }
        out.push(DpoPair {
            x0_w: scored[win].1.clone(),
            x0_l: scored[lose].1.clone(),
            c: ex.c.clone(),
            score_w: scored[win].0,
            score_l: scored[lose].0,
            quality_w: qw,
            quality_l: ql,
        });
    }
    stats.emitted = out.len();
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreDistribution {
    Uniform,
    Normal,
}

/// Monte Carlo estimate of `P(min(s_1..s_n) < s' < max(s_1..s_n))` for
/// i.i.d. continuous scores. The exact value is `(n - 1) / (n + 1)`.
pub fn order_stat_probability(n: usize, trials: usize, dist: ScoreDistribution, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    if trials < 10_000 {
        return Err(Error::InvalidArgument("need at least 10000 trials".into()));
    }
    let mut r = rng::stream(&format!("orderstat/{seed}/{dist:?}/{n}"));
    let draw = |r: &mut Rng| -> f64 {
        match dist {
            ScoreDistribution::Uniform => r.random::<f64>(),
            ScoreDistribution::Normal => StandardNormal.sample(r),
        }
    };
    let mut hits = 0usize;
    for _ in 0..trials {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..n {
            let s = draw(&mut r);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let s = draw(&mut r);
        if lo < s && s < hi {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Cpo,
    Dpo,
}

/// Storage of one preference record, in units of one RGB image. A
/// single-channel condition map counts as a third of an image. A DPO
/// record keeps one condition per stored sample, `(x_w, c)` and `(x_l, c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StorageReport {
    pub images: usize,
    pub conditions: usize,
    pub units: f64,
}

impl StorageReport {
    /// Two decimals, truncated: 5/3 is reported as 1.66.
    pub fn reported(&self) -> f64 {
        (self.units * 100.0 + 1e-9).floor() / 100.0
    }
}

pub fn storage_compute_report(pipeline: Pipeline, include_original: bool) -> StorageReport {
    let (images, conditions) = match pipeline {
        Pipeline::Cpo => (1, 2),
        Pipeline::Dpo => (2 + usize::from(include_original), 2),
    };
    StorageReport {
        images,
        conditions,
        units: images as f64 + conditions as f64 / 3.0,
    }
}

/// Generator calls needed per source example.
pub fn generations_per_source(pipeline: Pipeline, cfg: &DpoCuration) -> usize {
    match pipeline {
        Pipeline::Cpo => 1,
        Pipeline::Dpo => cfg.n_samples,
    }
}

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// A curated dataset of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Curated {
    Cpo(Vec<CpoTriplet>),
    Dpo(Vec<DpoPair>),
}

impl Curated {
    pub fn len(&self) -> usize {
        match self {
            Curated::Cpo(v) => v.len(),
            Curated::Dpo(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pipeline(&self) -> Pipeline {
        match self {
            Curated::Cpo(_) => Pipeline::Cpo,
            Curated::Dpo(_) => Pipeline::Dpo,
        }
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn nums(v: &[f64]) -> String {
    v.iter().map(|&x| num(x)).collect::<Vec<_>>().join(",")
}

fn kind_name(c: &Condition) -> &'static str {
    match c.kind() {
        ConditionKind::Discrete => "discrete",
        ConditionKind::Continuous => "continuous",
    }
}

fn cond_payload(c: &Condition) -> String {
    match c {
        Condition::Discrete(b) => b.to_string(),
        Condition::Continuous(v) => nums(v),
    }
}

/// Writes one tab-separated line per record. Field order:
///
/// `version  cpo  kind  x0  c_w  c_l`
///
/// `version  dpo  kind  x0_w  x0_l  c  score_w  score_l  quality_w  quality_l`
///
/// Vectors are comma-separated; reals carry 17 significant digits.
pub fn write_records(data: &Curated, mut w: impl Write) -> Result<()> {
    let v = RECORD_SCHEMA_VERSION;
    match data {
        Curated::Cpo(items) => {
            for t in items {
                writeln!(
                    w,
                    "{v}\tcpo\t{}\t{}\t{}\t{}",
                    kind_name(&t.c_w),
                    nums(&t.x0),
                    cond_payload(&t.c_w),
                    cond_payload(&t.c_l)
                )?;
            }
        }
        Curated::Dpo(items) => {
            for p in items {
                writeln!(
                    w,
                    "{v}\tdpo\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    kind_name(&p.c),
                    nums(&p.x0_w),
                    nums(&p.x0_l),
                    cond_payload(&p.c),
                    num(p.score_w),
                    num(p.score_l),
                    num(p.quality_w),
                    num(p.quality_l)
                )?;
            }
        }
    }
    Ok(())
}

/// Reads records written by [`write_records`]. All lines must share a kind.
/// An empty input yields `None`.
pub fn read_records(r: impl BufRead) -> Result<Option<Curated>> {
    let mut out: Option<Curated> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let bad = |msg: String| Error::Record { line: lineno, msg };
        let f: Vec<&str> = line.split('\t').collect();
        let version: u32 = f[0].parse().map_err(|_| bad(format!("bad schema version {:?}", f[0])))?;
        if version != RECORD_SCHEMA_VERSION {
            return Err(bad(format!(
                "schema version {version} is not supported (expected {RECORD_SCHEMA_VERSION}); re-curate or migrate the file"
            )));
        }
        let want = match f.get(1) {
            Some(&"cpo") => 6,
            Some(&"dpo") => 10,
            other => return Err(bad(format!("unknown record type {other:?}"))),
        };
        if f.len() != want {
            return Err(bad(format!("expected {want} fields, found {}", f.len())));
        }
        let reals = |s: &str| -> Result<Vec<f64>> {
            s.split(',')
                .map(|x| {
                    x.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(format!("bad number {x:?}")))
                })
                .collect()
        };
        let real = |s: &str| -> Result<f64> {
            let v = reals(s)?;
            if v.len() == 1 {
                Ok(v[0])
            } else {
                Err(bad(format!("expected one number, found {s:?}")))
            }
        };
        let cond = |s: &str| -> Result<Condition> {
            match f[2] {
                "discrete" => s
                    .parse()
                    .map(Condition::Discrete)
                    .map_err(|_| bad(format!("bad bin {s:?}"))),
                "continuous" => Ok(Condition::Continuous(reals(s)?)),
                k => Err(bad(format!("unknown condition kind {k:?}"))),
            }
        };
        match (f[1], &mut out) {
            ("cpo", None) => out = Some(Curated::Cpo(Vec::new())),
            ("dpo", None) => out = Some(Curated::Dpo(Vec::new())),
            _ => {}
        }
        match (f[1], out.as_mut().expect("set above")) {
            ("cpo", Curated::Cpo(v)) => v.push(CpoTriplet {
                x0: reals(f[3])?,
                c_w: cond(f[4])?,
                c_l: cond(f[5])?,
            }),
            ("dpo", Curated::Dpo(v)) => v.push(DpoPair {
                x0_w: reals(f[3])?,
                x0_l: reals(f[4])?,
                c: cond(f[5])?,
                score_w: real(f[6])?,
                score_l: real(f[7])?,
                quality_w: real(f[8])?,
                quality_l: real(f[9])?,
            }),
            _ => return Err(bad("cpo and dpo records mixed in one file".into())),
        }
    }
    Ok(out)
}
