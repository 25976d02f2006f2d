//! Monte Carlo study of the score difference `Δs = s(u+) - s(u-)` with
//! `s(u) = -|eps_theta(u) - eps|^2`, under CPO triplets and DPO pairs.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, ConditionBatch, ConditionSpace, DenoiserParams};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::NoiseDraw;
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::stats::{variance_stderr, Welford};
use crate::toyworld::{CpoTriplet, Curated, DpoPair};
use crate::trainer::TimePolicy;

#[derive(Clone, Debug, PartialEq)]
pub enum PreferenceExample {
    Cpo(CpoTriplet),
    Dpo(DpoPair),
}

impl Curated {
    pub fn examples(&self) -> Vec<PreferenceExample> {
        match self {
            Curated::Cpo(v) => v.iter().cloned().map(PreferenceExample::Cpo).collect(),
            Curated::Dpo(v) => v.iter().cloned().map(PreferenceExample::Dpo).collect(),
        }
    }
}

fn scores(
    theta: &DenoiserParams<f64>,
    x_t: &Tensor<f64>,
    ts: &[usize],
    conds: &[Condition],
    eps: &Tensor<f64>,
) -> Result<Vec<f64>> {
    let cb = ConditionBatch::given(theta.arch(), conds)?;
    let pred = theta.predict_eps(x_t, ts, &cb)?;
    Ok((0..ts.len())
        .map(|r| -pred.row(r).iter().zip(eps.row(r)).map(|(p, e)| (p - e) * (p - e)).sum::<f64>())
        .collect())
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> Result<Tensor<f64>> {
    let data: Vec<f64> = rows.flatten().collect();
    Tensor::new(vec![data.len() / dim, dim], data)
}

/// `Δs` for each example under its own `(t, eps)` row of `draw`. CPO:
/// `s(x_t, c_w) - s(x_t, c_l)`; DPO: `s(x_t^w, c) - s(x_t^l, c)`, both
/// branches sharing `t` and `eps`. All examples must be of one kind.
pub fn score_differences(
    theta: &DenoiserParams<f64>,
    schedule: &NoiseSchedule<f64>,
    examples: &[&PreferenceExample],
    draw: &NoiseDraw<f64>,
) -> Result<Vec<f64>> {
    if examples.len() != draw.rows() {
        return Err(Error::InvalidArgument("one (t, eps) row per example is required".into()));
    }
    let Some(first) = examples.first() else {
        return Ok(Vec::new());
    };
    let dim = theta.arch().data_dim;
    match first {
        PreferenceExample::Cpo(_) => {
            let items: Vec<&CpoTriplet> = examples
                .iter()
                .map(|e| match e {
                    PreferenceExample::Cpo(t) => Ok(t),
                    PreferenceExample::Dpo(_) => Err(mixed()),
                })
                .collect::<Result<_>>()?;
            let x0 = stack(items.iter().map(|t| t.x0.clone()), dim)?;
            let x_t = schedule.q_sample_rows(&x0, &draw.ts, &draw.eps)?;
            let cw: Vec<Condition> = items.iter().map(|t| t.c_w.clone()).collect();
            let cl: Vec<Condition> = items.iter().map(|t| t.c_l.clone()).collect();
            let sw = scores(theta, &x_t, &draw.ts, &cw, &draw.eps)?;
            let sl = scores(theta, &x_t, &draw.ts, &cl, &draw.eps)?;
            Ok(sw.iter().zip(&sl).map(|(a, b)| a - b).collect())
        }
        PreferenceExample::Dpo(_) => {
            let items: Vec<&DpoPair> = examples
                .iter()
                .map(|e| match e {
                    PreferenceExample::Dpo(p) => Ok(p),
                    PreferenceExample::Cpo(_) => Err(mixed()),
                })
                .collect::<Result<_>>()?;
            let xw = stack(items.iter().map(|p| p.x0_w.clone()), dim)?;
            let xl = stack(items.iter().map(|p| p.x0_l.clone()), dim)?;
            let xtw = schedule.q_sample_rows(&xw, &draw.ts, &draw.eps)?;
            let xtl = schedule.q_sample_rows(&xl, &draw.ts, &draw.eps)?;
            let c: Vec<Condition> = items.iter().map(|p| p.c.clone()).collect();
            let sw = scores(theta, &xtw, &draw.ts, &c, &draw.eps)?;
            let sl = scores(theta, &xtl, &draw.ts, &c, &draw.eps)?;
            Ok(sw.iter().zip(&sl).map(|(a, b)| a - b).collect())
        }
    }
}

fn mixed() -> Error {
    Error::InvalidArgument("CPO and DPO examples mixed in one batch".into())
}

/// `Δs` for a single example.
pub fn score_difference(
    theta: &DenoiserParams<f64>,
    schedule: &NoiseSchedule<f64>,
    example: &PreferenceExample,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    let draw = NoiseDraw {
        ts: vec![t],
        eps: Tensor::new(vec![1, eps.len()], eps.to_vec())?,
    };
    Ok(score_differences(theta, schedule, &[example], &draw)?[0])
}

pub const MIN_VARIANCE_DRAWS: usize = 1000;

/// Variance of `Δs` over examples and `(t, eps)` draws.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceEstimate {
    pub mean: f64,
    /// Variance over all draws pooled together.
    pub pooled_var: f64,
    pub pooled_stderr: f64,
    /// Mean over examples of the variance across that example's draws.
    pub per_example_var: f64,
    pub per_example_stderr: f64,
    /// Uniform policy only: mean within-bucket variance over ten equal
    /// timestep ranges, which removes most of the spread caused by `t`.
    pub conditional_var: Option<f64>,
    pub n_draws: usize,
    pub n_examples: usize,
}

const DRAW_BATCH: usize = 1024;
const T_BUCKETS: usize = 10;

/// Draw `i` uses example `i mod n` and stream `variance/{seed}/draw/{i}`.
pub fn empirical_variance(
    theta: &DenoiserParams<f64>,
    schedule: &NoiseSchedule<f64>,
    examples: &[PreferenceExample],
    policy: TimePolicy,
    n_draws: usize,
    seed: u64,
) -> Result<VarianceEstimate> {
    if n_draws < MIN_VARIANCE_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_VARIANCE_DRAWS} draws, got {n_draws}"
        )));
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let steps = schedule.steps();
    if let TimePolicy::Fixed(t) = policy {
        schedule.check_t(t)?;
    }
    let dim = theta.arch().data_dim;
    let n = examples.len();
    let mut values = Vec::with_capacity(n_draws);
    let mut times = Vec::with_capacity(n_draws);
    for start in (0..n_draws).step_by(DRAW_BATCH) {
        let end = (start + DRAW_BATCH).min(n_draws);
        let mut ts = Vec::with_capacity(end - start);
        let mut eps = Vec::with_capacity((end - start) * dim);
        for i in start..end {
            let mut r = rng::item_stream("variance", seed, "draw", i);
            ts.push(match policy {
                TimePolicy::Fixed(t) => t,
                TimePolicy::Uniform => rand::Rng::random_range(&mut r, 1..=steps),
            });
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(&mut r);
                eps.push(z);
            }
        }
        let batch: Vec<&PreferenceExample> = (start..end).map(|i| &examples[i % n]).collect();
        let draw = NoiseDraw {
            eps: Tensor::new(vec![ts.len(), dim], eps)?,
            ts: ts.clone(),
        };
        values.extend(score_differences(theta, schedule, &batch, &draw)?);
        times.extend(ts);
    }

    let pooled: Welford = values.iter().copied().collect();
    let mut per = vec![Welford::default(); n];
    for (i, &v) in values.iter().enumerate() {
        per[i % n].push(v);
    }
    let within: Welford = per.iter().filter(|w| w.count() >= 2).map(|w| w.variance()).collect();
    let conditional_var = (policy == TimePolicy::Uniform).then(|| {
        let mut buckets = vec![Welford::default(); T_BUCKETS];
        for (&v, &t) in values.iter().zip(&times) {
            buckets[((t - 1) * T_BUCKETS / steps).min(T_BUCKETS - 1)].push(v);
        }
        let eligible: Welford = buckets.iter().filter(|b| b.count() >= 2).map(|b| b.variance()).collect();
        eligible.mean()
    });
    Ok(VarianceEstimate {
        mean: pooled.mean(),
        pooled_var: pooled.variance(),
        pooled_stderr: variance_stderr(&values),
        per_example_var: within.mean(),
        per_example_stderr: within.stderr(),
        conditional_var,
        n_draws,
        n_examples: n,
    })
}

/// Side-by-side variances of matched CPO and DPO data.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub var_cpo: f64,
    pub var_dpo: f64,
    pub stderr_cpo: f64,
    pub stderr_dpo: f64,
    pub per_example_cpo: f64,
    pub per_example_dpo: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub policy: TimePolicy,
    pub decomposition: Option<Decomposition>,
    /// Mean `|grad_x s|` over the CPO baselines `(x_t, c_w)`.
    pub gradient_norm_proxy: f64,
}

impl VarianceReport {
    /// Flat `key=value` record on one line.
    pub fn to_record(&self) -> String {
        let policy = match self.policy {
            TimePolicy::Uniform => "uniform".to_string(),
            TimePolicy::Fixed(t) => format!("fixed:{t}"),
        };
        let mut s = format!(
            "var_cpo={:?} var_dpo={:?} stderr_cpo={:?} stderr_dpo={:?} per_example_cpo={:?} per_example_dpo={:?} \
             n_samples={} seed={} t_policy={policy} gradient_norm_proxy={:?}",
            self.var_cpo,
            self.var_dpo,
            self.stderr_cpo,
            self.stderr_dpo,
            self.per_example_cpo,
            self.per_example_dpo,
            self.n_samples,
            self.seed,
            self.gradient_norm_proxy
        );
        if let Some(d) = &self.decomposition {
            let _ = write!(s, " v_ctrl={:?} v_nuis={:?} v_cross={:?}", d.v_ctrl, d.v_nuis, d.v_cross);
        }
        s
    }

    /// `var_cpo < var_dpo`.
    pub fn cpo_lower(&self) -> bool {
        self.var_cpo < self.var_dpo
    }
}

/// Central-difference gradient of `s(x_t, c)` in `x_t`.
fn input_gradient(
    theta: &DenoiserParams<f64>,
    x_t: &[f64],
    t: usize,
    c: &Condition,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let h = 1e-5;
    let dim = x_t.len();
    let mut rows = Vec::with_capacity(2 * dim * dim);
    for k in 0..dim {
        for sign in [1.0, -1.0] {
            let mut x = x_t.to_vec();
            x[k] += sign * h;
            rows.extend(x);
        }
    }
    let x = Tensor::new(vec![2 * dim, dim], rows)?;
    let e = Tensor::new(vec![2 * dim, dim], eps.repeat(2 * dim))?;
    let s = scores(theta, &x, &vec![t; 2 * dim], &vec![c.clone(); 2 * dim], &e)?;
    Ok((0..dim).map(|k| (s[2 * k] - s[2 * k + 1]) / (2.0 * h)).collect())
}

/// Matched comparison on the same draw indices and seed.
pub fn compare_variance(
    theta: &DenoiserParams<f64>,
    schedule: &NoiseSchedule<f64>,
    cpo: &[PreferenceExample],
    dpo: &[PreferenceExample],
    policy: TimePolicy,
    n_draws: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let c = empirical_variance(theta, schedule, cpo, policy, n_draws, seed)?;
    let d = empirical_variance(theta, schedule, dpo, policy, n_draws, seed)?;
    let t = match policy {
        TimePolicy::Fixed(t) => t,
        TimePolicy::Uniform => schedule.steps() / 2,
    };
    let mut norms = Welford::default();
    let mut r = rng::stream(&format!("variance/{seed}/gradient"));
    for ex in cpo.iter().take(256) {
        if let PreferenceExample::Cpo(tr) = ex {
            let eps: Vec<f64> = (0..tr.x0.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let a = schedule.alpha_bar(t);
            let x_t: Vec<f64> = tr.x0.iter().zip(&eps).map(|(x, e)| a.sqrt() * x + (1.0 - a).sqrt() * e).collect();
            let g = input_gradient(theta, &x_t, t, &tr.c_w, &eps)?;
            norms.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(VarianceReport {
        var_cpo: c.pooled_var,
        var_dpo: d.pooled_var,
        stderr_cpo: c.pooled_stderr,
        stderr_dpo: d.pooled_stderr,
        per_example_cpo: c.per_example_var,
        per_example_dpo: d.per_example_var,
        n_samples: n_draws,
        seed,
        policy,
        decomposition: None,
        gradient_norm_proxy: norms.mean(),
    })
}

/// Shared baseline `ū = (x_t, c)` of the decomposition, with its `t` and `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub x_t: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

type DeviationFn = Box<dyn Fn(&mut Rng) -> Vec<f64>>;

/// Synthetic generators of the winner-minus-loser input differences.
/// Each returns a vector over `u = (x_t, c)`; `None` disables a factor.
pub struct ControlledFactors {
    pub ctrl: Option<DeviationFn>,
    pub nuis: Option<DeviationFn>,
}

impl ControlledFactors {
    /// Independent Gaussian factors: control deviations move only the
    /// condition coordinates, nuisance deviations only `x_t`. A zero scale
    /// disables that factor.
    pub fn gaussian(dim_x: usize, dim_c: usize, ctrl_scale: f64, nuis_scale: f64) -> Self {
        let make = |offset: usize, len: usize, scale: f64| -> Option<DeviationFn> {
            (scale != 0.0).then(|| {
                Box::new(move |r: &mut Rng| {
                    let mut v = vec![0.0; dim_x + dim_c];
                    for x in &mut v[offset..offset + len] {
                        let z: f64 = StandardNormal.sample(r);
                        *x = scale * z;
                    }
                    v
                }) as DeviationFn
            })
        };
        Self {
            ctrl: make(dim_x, dim_c, ctrl_scale),
            nuis: make(0, dim_x, nuis_scale),
        }
    }
}

/// Quadratic forms `g' V g` of the first-order expansion `Δs ≈ <g, Δ>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub v_ctrl: f64,
    pub v_nuis: f64,
    pub v_cross: f64,
    /// `Var[<g, Δ_ctrl + Δ_nuis>]`.
    pub joint: f64,
    pub stderr_ctrl: f64,
    pub stderr_nuis: f64,
    pub stderr_cross: f64,
    /// `Var[s(ū + Δ/2) - s(ū - Δ/2)]` without linearization.
    pub joint_exact: f64,
    pub g: Vec<f64>,
}

/// Estimates `V_ctrl`, `V_nuis`, and `V_cross` at a shared baseline of a
/// continuous-condition model, from `n` draws of each enabled factor;
/// draw `i` uses stream `decomp/{seed}/draw/{i}`.
pub fn decomposition_estimate(
    theta: &DenoiserParams<f64>,
    baseline: &Baseline,
    factors: &ControlledFactors,
    n: usize,
    seed: u64,
) -> Result<Decomposition> {
    let ConditionSpace::Continuous { dim: dim_c } = theta.arch().condition else {
        return Err(Error::InvalidArgument("the decomposition needs continuous conditions".into()));
    };
    let dim_x = theta.arch().data_dim;
    if baseline.x_t.len() != dim_x || baseline.c.len() != dim_c || baseline.eps.len() != dim_x {
        return Err(Error::InvalidArgument("baseline dimensions do not match the model".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let du = dim_x + dim_c;
    let s_at = |us: &[Vec<f64>]| -> Result<Vec<f64>> {
        let x = stack(us.iter().map(|u| u[..dim_x].to_vec()), dim_x)?;
        let c: Vec<Condition> = us.iter().map(|u| Condition::Continuous(u[dim_x..].to_vec())).collect();
        let e = Tensor::new(vec![us.len(), dim_x], baseline.eps.repeat(us.len()))?;
        scores(theta, &x, &vec![baseline.t; us.len()], &c, &e)
    };
    let u0: Vec<f64> = baseline.x_t.iter().chain(&baseline.c).copied().collect();
    let h = 1e-5;
    let mut probes = Vec::with_capacity(2 * du);
    for k in 0..du {
        for sign in [1.0, -1.0] {
            let mut u = u0.clone();
            u[k] += sign * h;
            probes.push(u);
        }
    }
    let s = s_at(&probes)?;
    let g: Vec<f64> = (0..du).map(|k| (s[2 * k] - s[2 * k + 1]) / (2.0 * h)).collect();
    let dot = |v: &[f64]| -> Result<f64> {
        if v.len() != du {
            return Err(Error::InvalidArgument(format!("deviation has {} entries, expected {du}", v.len())));
        }
        Ok(g.iter().zip(v).map(|(a, b)| a * b).sum())
    };

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::item_stream("decomp", seed, "draw", i);
        let dc = factors.ctrl.as_ref().map(|f| f(&mut r)).unwrap_or_else(|| vec![0.0; du]);
        let dn = factors.nuis.as_ref().map(|f| f(&mut r)).unwrap_or_else(|| vec![0.0; du]);
        a.push(dot(&dc)?);
        b.push(dot(&dn)?);
        let both: Vec<f64> = dc.iter().zip(&dn).map(|(x, y)| x + y).collect();
        plus.push(u0.iter().zip(&both).map(|(u, d)| u + d / 2.0).collect::<Vec<_>>());
        minus.push(u0.iter().zip(&both).map(|(u, d)| u - d / 2.0).collect::<Vec<_>>());
    }
    for (name, on, v) in [("control", factors.ctrl.is_some(), &a), ("nuisance", factors.nuis.is_some(), &b)] {
        if on && v.iter().all(|&x| x == v[0]) {
            return Err(Error::InvalidArgument(format!("{name} factor generator has zero variance")));
        }
    }
    let wa: Welford = a.iter().copied().collect();
    let wb: Welford = b.iter().copied().collect();
    let prods: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - wa.mean()) * (y - wb.mean())).collect();
    let wp: Welford = prods.iter().copied().collect();
    let v_cross = wp.mean() * n as f64 / (n - 1) as f64;
    let sum: Welford = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let sp = s_at(&plus)?;
    let sm = s_at(&minus)?;
    let exact: Welford = sp.iter().zip(&sm).map(|(p, m)| p - m).collect();
    Ok(Decomposition {
        v_ctrl: wa.variance(),
        v_nuis: wb.variance(),
        v_cross,
        joint: sum.variance(),
        stderr_ctrl: variance_stderr(&a),
        stderr_nuis: variance_stderr(&b),
        stderr_cross: wp.stderr(),
        joint_exact: exact.variance(),
        g,
    })
}
