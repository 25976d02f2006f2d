//! The exact-math and Monte Carlo verification suite, runnable without any
//! trained model.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{ArchConfig, Condition, ConditionSpace, DenoiserParams};
use crate::diffcore::{finite_diff_check, Graph, Tensor};
use crate::error::Result;
use crate::losses::{
    contrast_terms, cpo_factor, cpo_final_loss, cpo_logsigmoid_loss, dpo_loss, gradient_identity_check,
    jensen_bound_check, pretrain_loss, total_loss_with_factor, value_and_grad, CpoBatch, DpoBatch, Models,
    NoiseDraw, PreferenceConfig,
};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::toyworld::{order_stat_probability, storage_compute_report, Pipeline, ScoreDistribution};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    /// `value < limit`.
    Below(f64),
    /// `value <= limit`.
    AtMost(f64),
    /// `value == limit` exactly.
    Equals(f64),
}

impl Bound {
    fn admits(&self, v: f64) -> bool {
        match *self {
            Bound::Below(l) => v < l,
            Bound::AtMost(l) => v <= l,
            Bound::Equals(l) => v == l,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Below(l) => write!(f, "< {l:e}"),
            Bound::AtMost(l) => write!(f, "<= {l:e}"),
            Bound::Equals(l) => write!(f, "== {l}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: Bound) -> Self {
        Self {
            name: name.into(),
            pass: bound.admits(value),
            value,
            bound,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{}\t{}",
            self.name,
            self.value,
            self.bound,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// A small denoiser keeps the element-wise finite differences cheap.
pub fn check_arch() -> ArchConfig {
    ArchConfig {
        condition: ConditionSpace::Discrete { k: 8 },
        hidden: 12,
        depth: 2,
        time_features: 4,
        cond_embed: 4,
        ..ArchConfig::default()
    }
}

fn perturbed(p: &DenoiserParams<f64>, scale: f64, r: &mut Rng) -> DenoiserParams<f64> {
    let mut q = p.clone();
    for i in 0..q.tensors().len() {
        for v in q.tensor_mut(i) {
            let z: f64 = StandardNormal.sample(r);
            *v += scale * z;
        }
    }
    q
}

fn points(n: usize, r: &mut Rng) -> Tensor<f64> {
    let d: Vec<f64> = (0..2 * n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::raw(vec![n, 2], d)
}

fn bins(n: usize, r: &mut Rng) -> (Vec<Condition>, Vec<Condition>) {
    (0..n)
        .map(|_| {
            let a = r.random_range(0..8);
            let b = (a + r.random_range(1..8)) % 8;
            (Condition::Discrete(a), Condition::Discrete(b))
        })
        .unzip()
}

fn cpo_batch(p: &DenoiserParams<f64>, n: usize, r: &mut Rng) -> Result<(CpoBatch<f64>, NoiseDraw<f64>)> {
    let (w, l) = bins(n, r);
    let batch = CpoBatch::new(p, points(n, r), &w, &l)?;
    Ok((batch, NoiseDraw::sample(n, 2, 1000, r)))
}

fn dpo_batch(p: &DenoiserParams<f64>, n: usize, r: &mut Rng) -> Result<(DpoBatch<f64>, NoiseDraw<f64>)> {
    let (c, _) = bins(n, r);
    let batch = DpoBatch::new(p, points(n, r), points(n, r), &c)?;
    Ok((batch, NoiseDraw::sample(n, 2, 1000, r)))
}

/// Preference losses at `theta == ref`: both log-sigmoid forms equal `ln 2`,
/// the final CPO loss and its gradient vanish.
pub fn closed_form(seed: u64) -> Result<Vec<Check>> {
    let s = NoiseSchedule::default_linear();
    let cfg = PreferenceConfig::default();
    let mut r = rng::stream(&format!("checks/{seed}/closed-form"));
    let (mut dpo_gap, mut cpo_gap, mut final_abs) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..5 {
        let p = perturbed(&DenoiserParams::init(check_arch(), seed + i)?, 0.3, &mut r);
        let reference = p.clone_as_reference();
        let m = Models {
            theta: &p,
            reference: &reference,
            schedule: &s,
        };
        let (pairs, pd) = dpo_batch(&p, 8, &mut r)?;
        let (triplets, td) = cpo_batch(&p, 8, &mut r)?;
        let g = Graph::new();
        let b = p.bind(&g, true);
        dpo_gap = dpo_gap.max((dpo_loss(m, &b, &pairs, &pd, &cfg)?.item()? - std::f64::consts::LN_2).abs());
        cpo_gap = cpo_gap.max((cpo_logsigmoid_loss(m, &b, &triplets, &td, &cfg)?.item()? - std::f64::consts::LN_2).abs());
        let (v, grads) = value_and_grad(&p, |b| cpo_final_loss(m, b, &triplets, &td, &cfg))?;
        final_abs = final_abs.max(v.abs());
        for t in &grads {
            final_abs = t.data().iter().fold(final_abs, |a, x| a.max(x.abs()));
        }
    }
    Ok(vec![
        Check::new("dpo_loss_ln2_at_reference", dpo_gap, Bound::AtMost(1e-12)),
        Check::new("cpo_logsigmoid_ln2_at_reference", cpo_gap, Bound::AtMost(1e-12)),
        Check::new("cpo_final_value_and_grad_at_reference", final_abs, Bound::Equals(0.0)),
    ])
}

/// Autodiff gradient of the log-sigmoid CPO loss against its analytic
/// `alpha sigmoid(alpha (d_theta - d_ref)) grad d_theta` form.
pub fn gradient_identity(instances: usize, seed: u64) -> Result<Check> {
    let s = NoiseSchedule::default_linear();
    let cfg = PreferenceConfig::default();
    let mut r = rng::stream(&format!("checks/{seed}/gradient-identity"));
    let base = DenoiserParams::init(check_arch(), seed)?;
    let reference = base.clone_as_reference();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let theta = perturbed(&base, 0.01, &mut r);
        let m = Models {
            theta: &theta,
            reference: &reference,
            schedule: &s,
        };
        let (batch, draw) = cpo_batch(&theta, 1, &mut r)?;
        worst = worst.max(gradient_identity_check(m, &batch, &draw, &cfg)?);
    }
    Ok(Check::new(format!("gradient_identity_{instances}"), worst, Bound::Below(1e-6)))
}

/// Large enough that rounding in the loss value does not swamp the
/// smallest gradient entries, small enough that truncation stays below 1e-6.
const FD_STEP: f64 = 1e-4;

/// Central-difference conformance of the four trainable losses. The
/// detached CPO factor is held at its base-point value while differencing.
pub fn finite_differences(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let s = NoiseSchedule::default_linear();
    let cfg = PreferenceConfig {
        reg_lambda: 0.5,
        ..PreferenceConfig::from_alpha(25.0, 1000)
    };
    let mut r = rng::stream(&format!("checks/{seed}/finite-diff"));
    let base = DenoiserParams::init(check_arch(), seed)?;
    let reference = base.clone_as_reference();
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let q = perturbed(&base, 0.05, &mut r);
        let m = Models {
            theta: &q,
            reference: &reference,
            schedule: &s,
        };
        let (batch, draw) = cpo_batch(&q, 3, &mut r)?;
        let reg = NoiseDraw::sample(3, 2, 1000, &mut r);
        let (pairs, pd) = dpo_batch(&q, 3, &mut r)?;
        let factor = {
            let g = Graph::new();
            let b = q.bind(&g, true);
            cpo_factor(&contrast_terms(m, &b, &batch, &draw)?, &cfg)?
        };
        let pe = finite_diff_check(|_g, v| pretrain_loss(&q, v, &s, &batch.x0, &batch.c_w, &draw), q.tensors(), FD_STEP)?;
        let de = finite_diff_check(|_g, v| dpo_loss(m, v, &pairs, &pd, &cfg), q.tensors(), FD_STEP)?;
        let ce = finite_diff_check(
            |_g, v| {
                let terms = contrast_terms(m, v, &batch, &draw)?;
                crate::losses::cpo_weighted_hinge(&terms, &factor, &cfg)
            },
            q.tensors(),
            FD_STEP,
        )?;
        let te = finite_diff_check(
            |_g, v| total_loss_with_factor(m, v, &batch, &draw, &reg, &factor, &cfg),
            q.tensors(),
            FD_STEP,
        )?;
        for (w, e) in worst.iter_mut().zip([pe, de, ce, te]) {
            *w = w.max(e.max_rel_err);
        }
    }
    Ok(["pretrain_loss", "dpo_loss", "cpo_final_loss", "total_loss"]
        .iter()
        .zip(worst)
        .map(|(n, w)| Check::new(format!("finite_diff_{n}"), w, Bound::Below(1e-4)))
        .collect())
}

/// Largest deviation, in standard errors, of the sample mean and variance
/// of `x_t` from `sqrt(ab_t) x0` and `1 - ab_t`.
pub fn diffusion_moments(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let s = NoiseSchedule::<f64>::default_linear();
    let x0 = Tensor::raw(vec![1, 2], vec![0.7, -0.4]);
    let mut r = rng::stream(&format!("checks/{seed}/moments"));
    let mut out = Vec::new();
    for t in [1usize, 500, 1000] {
        let a = s.alpha_bar(t);
        let mut z = 0.0f64;
        let mut cols = [Vec::with_capacity(draws), Vec::with_capacity(draws)];
        for _ in 0..draws {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut r)).collect();
            let xt = s.q_sample(&x0, t, &Tensor::raw(vec![1, 2], e))?;
            for (k, c) in cols.iter_mut().enumerate() {
                c.push(xt.data()[k]);
            }
        }
        let n = draws as f64;
        for (k, c) in cols.iter().enumerate() {
            let mean = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se_mean = ((1.0 - a) / n).sqrt();
            let se_var = (1.0 - a) * (2.0 / (n - 1.0)).sqrt();
            z = z.max((mean - a.sqrt() * x0.data()[k]).abs() / se_mean);
            z = z.max((var - (1.0 - a)).abs() / se_var);
        }
        out.push(Check::new(format!("diffusion_moments_t{t}_stderrs"), z, Bound::Below(3.0)));
    }
    Ok(out)
}

/// Coverage of a fresh score by the range of 20 others, against 19/21.
pub fn order_statistics(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let exact = 19.0 / 21.0;
    [ScoreDistribution::Uniform, ScoreDistribution::Normal]
        .into_iter()
        .map(|d| {
            let p = order_stat_probability(20, trials, d, seed)?;
            let name = format!("order_stat_{}_gap", format!("{d:?}").to_lowercase());
            Ok(Check::new(name, (p - exact).abs(), Bound::Below(0.01)))
        })
        .collect()
}

pub fn storage() -> Vec<Check> {
    [
        ("storage_cpo", Pipeline::Cpo, false, 1.66),
        ("storage_dpo", Pipeline::Dpo, false, 2.66),
        ("storage_dpo_with_original", Pipeline::Dpo, true, 3.66),
    ]
    .into_iter()
    .map(|(n, p, o, want)| Check::new(n, storage_compute_report(p, o).reported(), Bound::Equals(want)))
    .collect()
}

/// Jensen's bound `E[-log sigmoid(inner)] >= -log sigmoid(E[inner])` on
/// perturbed models. The value is the worst `lhs - rhs` in standard errors.
pub fn jensen(perturbations: usize, trials: usize, seed: u64) -> Result<Check> {
    let s = NoiseSchedule::default_linear();
    let cfg = PreferenceConfig::default();
    let base = DenoiserParams::init(check_arch(), seed)?;
    let reference = base.clone_as_reference();
    let mut r = rng::stream(&format!("checks/{seed}/jensen"));
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..perturbations {
        let theta = perturbed(&base, 0.01, &mut r);
        let m = Models {
            theta: &theta,
            reference: &reference,
            schedule: &s,
        };
        let x0: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut r)).collect();
        let (w, l) = bins(1, &mut r);
        let rep = jensen_bound_check(m, &x0, &w[0], &l[0], trials, &cfg, &mut r)?;
        let z = if rep.stderr > 0.0 {
            (rep.lhs - rep.rhs) / rep.stderr
        } else if rep.rhs >= rep.lhs {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(Check::new("jensen_worst_violation_stderrs", worst, Bound::AtMost(3.0)))
}

/// The whole suite at its documented sizes.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = closed_form(seed)?;
    out.push(gradient_identity(50, seed)?);
    out.extend(finite_differences(10, seed)?);
    out.extend(diffusion_moments(100_000, seed)?);
    out.extend(order_statistics(100_000, seed)?);
    out.extend(storage());
    out.push(jensen(5, 10_000, seed)?);
    Ok(out)
}
