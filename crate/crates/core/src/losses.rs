//! Training objectives: denoising regression, Diffusion-DPO, and condition
//! preference optimization in its log-sigmoid and hinge forms.
//!
//! Every loss is the mean over a batch. The trainable network is bound to
//! the caller's [`Graph`]; the reference network is evaluated on plain
//! tensors and never enters the graph, so it cannot receive a gradient.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Condition, ConditionBatch, DenoiserParams, FrozenDenoiser};
use crate::diffcore::{log_sigmoid, sigmoid, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, OMEGA};

/// Detached factor multiplying the hinge of the final CPO loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CpoWeight {
    /// `sg(alpha (d_theta - d_ref))`.
    #[default]
    Linear,
    /// `sg(sigmoid(alpha (d_theta - d_ref)))`: the log-sigmoid gradient
    /// weight with the outer `alpha` removed.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceConfig {
    /// KL temperature.
    pub beta_kl: f64,
    pub steps: usize,
    pub omega: f64,
    pub margin: f64,
    pub reg_lambda: f64,
    pub weight: CpoWeight,
}

pub const DEFAULT_ALPHA: f64 = 2500.0;
pub const DEFAULT_MARGIN: f64 = 0.01;
pub const DEFAULT_REG_LAMBDA: f64 = 0.05;

impl Default for PreferenceConfig {
    fn default() -> Self {
        Self::from_alpha(DEFAULT_ALPHA, crate::schedule::DEFAULT_STEPS)
    }
}

impl PreferenceConfig {
    /// Back-derives the KL temperature from a target `alpha = beta T omega`.
    pub fn from_alpha(alpha: f64, steps: usize) -> Self {
        Self {
            beta_kl: alpha / (steps as f64 * OMEGA),
            steps,
            omega: OMEGA,
            margin: DEFAULT_MARGIN,
            reg_lambda: DEFAULT_REG_LAMBDA,
            weight: CpoWeight::Linear,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.beta_kl * self.steps as f64 * self.omega
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_kl > 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::InvalidArgument("beta_kl must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.reg_lambda >= 0.0) {
            return Err(Error::InvalidArgument("margin and reg_lambda must be non-negative".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-row timesteps and Gaussian noise for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<S> {
    pub ts: Vec<usize>,
    pub eps: Tensor<S>,
}

impl<S: Scalar> NoiseDraw<S> {
    /// Uniform timesteps on `1..=steps` and standard normal noise.
    pub fn sample(rows: usize, dim: usize, steps: usize, rng: &mut Rng) -> Self {
        let ts = (0..rows).map(|_| rng.random_range(1..=steps)).collect();
        Self::with_ts(ts, dim, rng)
    }

    pub fn with_ts(ts: Vec<usize>, dim: usize, rng: &mut Rng) -> Self {
        let eps = (0..ts.len() * dim)
            .map(|_| S::of(StandardNormal.sample(rng)))
            .collect();
        Self {
            eps: Tensor::raw(vec![ts.len(), dim], eps),
            ts,
        }
    }

    pub fn rows(&self) -> usize {
        self.ts.len()
    }
}

/// Batch of condition-preference triplets `(x0, c_w, c_l)`.
#[derive(Clone, Debug)]
pub struct CpoBatch<S> {
    pub x0: Tensor<S>,
    pub c_w: ConditionBatch<S>,
    pub c_l: ConditionBatch<S>,
}

impl<S: Scalar> CpoBatch<S> {
    pub fn new(theta: &DenoiserParams<S>, x0: Tensor<S>, c_w: &[Condition], c_l: &[Condition]) -> Result<Self> {
        if let Some((w, l)) = c_w.iter().zip(c_l).find(|(w, l)| w.kind() != l.kind()) {
            return Err(Error::InvalidCondition(format!(
                "winning and losing conditions differ in kind: {:?} vs {:?}",
                w.kind(),
                l.kind()
            )));
        }
        let rows = x0.dims2("cpo_batch")?.0;
        if c_w.len() != rows || c_l.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cpo_batch",
                lhs: x0.shape().to_vec(),
                rhs: vec![c_w.len(), c_l.len()],
            });
        }
        Ok(Self {
            c_w: ConditionBatch::given(theta.arch(), c_w)?,
            c_l: ConditionBatch::given(theta.arch(), c_l)?,
            x0,
        })
    }

    pub fn rows(&self) -> usize {
        self.x0.shape()[0]
    }
}

/// Batch of image-preference pairs `(x0_w, x0_l)` under a shared condition.
#[derive(Clone, Debug)]
pub struct DpoBatch<S> {
    pub x0_w: Tensor<S>,
    pub x0_l: Tensor<S>,
    pub c: ConditionBatch<S>,
}

impl<S: Scalar> DpoBatch<S> {
    pub fn new(theta: &DenoiserParams<S>, x0_w: Tensor<S>, x0_l: Tensor<S>, c: &[Condition]) -> Result<Self> {
        x0_w.same_shape(&x0_l, "dpo_batch")?;
        if c.len() != x0_w.dims2("dpo_batch")?.0 {
            return Err(Error::ShapeMismatch {
                op: "dpo_batch",
                lhs: x0_w.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        Ok(Self {
            c: ConditionBatch::given(theta.arch(), c)?,
            x0_w,
            x0_l,
        })
    }
}

/// The models a preference loss compares.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a, S> {
    pub theta: &'a DenoiserParams<S>,
    pub reference: &'a FrozenDenoiser<S>,
    pub schedule: &'a NoiseSchedule<S>,
}

/// Contrast of squared errors between the winning and losing condition,
/// for the trained (`d_theta`, differentiable) and reference (`d_ref`)
/// networks. Both are per-row vectors.
#[derive(Debug)]
pub struct ContrastTerms<'g, S> {
    pub d_theta: Var<'g, S>,
    pub d_ref: Tensor<S>,
}

fn row_sq_err<'g, S: Scalar>(pred: Var<'g, S>, eps: &Tensor<S>) -> Result<Var<'g, S>> {
    pred.graph().constant(eps.clone()).sub(pred)?.square()?.row_sum()
}

fn row_sq_err_values<S: Scalar>(pred: &Tensor<S>, eps: &Tensor<S>) -> Result<Vec<S>> {
    pred.same_shape(eps, "sq_err")?;
    let (rows, _) = pred.dims2("sq_err")?;
    Ok((0..rows)
        .map(|r| pred.row(r).iter().zip(eps.row(r)).map(|(&p, &e)| (e - p) * (e - p)).sum())
        .collect())
}

fn check_draw<S: Scalar>(x0: &Tensor<S>, draw: &NoiseDraw<S>) -> Result<()> {
    x0.same_shape(&draw.eps, "noise draw")?;
    if draw.ts.len() != x0.dims2("noise draw")?.0 {
        return Err(Error::ShapeMismatch {
            op: "noise draw",
            lhs: x0.shape().to_vec(),
            rhs: vec![draw.ts.len()],
        });
    }
    Ok(())
}

/// Mean squared noise-prediction error `||eps - eps_theta(x_t, c, t)||^2`.
pub fn pretrain_loss<'g, S: Scalar>(
    theta: &DenoiserParams<S>,
    bound: &[Var<'g, S>],
    schedule: &NoiseSchedule<S>,
    x0: &Tensor<S>,
    conds: &ConditionBatch<S>,
    draw: &NoiseDraw<S>,
) -> Result<Var<'g, S>> {
    check_draw(x0, draw)?;
    let g = bound[0].graph();
    let x_t = schedule.q_sample_rows(x0, &draw.ts, &draw.eps)?;
    let pred = theta.forward(bound, g.constant(x_t), &draw.ts, conds)?;
    row_sq_err(pred, &draw.eps)?.mean()
}

/// `d = ||eps - eps(x_t, c_w)||^2 - ||eps - eps(x_t, c_l)||^2` for both
/// networks, on a single `x_t` and `eps` shared by the two branches.
pub fn contrast_terms<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
) -> Result<ContrastTerms<'g, S>> {
    check_draw(&batch.x0, draw)?;
    let g = bound[0].graph();
    let x_t = models.schedule.q_sample_rows(&batch.x0, &draw.ts, &draw.eps)?;
    let xv = g.constant(x_t.clone());
    let ew = row_sq_err(models.theta.forward(bound, xv, &draw.ts, &batch.c_w)?, &draw.eps)?;
    let el = row_sq_err(models.theta.forward(bound, xv, &draw.ts, &batch.c_l)?, &draw.eps)?;
    let rw = row_sq_err_values(&models.reference.predict_eps(&x_t, &draw.ts, &batch.c_w)?, &draw.eps)?;
    let rl = row_sq_err_values(&models.reference.predict_eps(&x_t, &draw.ts, &batch.c_l)?, &draw.eps)?;
    let d_ref = rw.iter().zip(&rl).map(|(&a, &b)| a - b).collect();
    Ok(ContrastTerms {
        d_theta: ew.sub(el)?,
        d_ref: Tensor::new(vec![batch.rows()], d_ref)?,
    })
}

/// Diffusion-DPO: `-log sigmoid(-alpha [(e_theta^w - e_ref^w) - (e_theta^l - e_ref^l)])`
/// with `x_t^w`, `x_t^l` noised by the same `eps` and `t`.
pub fn dpo_loss<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &DpoBatch<S>,
    draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    check_draw(&batch.x0_w, draw)?;
    let g = bound[0].graph();
    let sched = models.schedule;
    let xw = sched.q_sample_rows(&batch.x0_w, &draw.ts, &draw.eps)?;
    let xl = sched.q_sample_rows(&batch.x0_l, &draw.ts, &draw.eps)?;
    let tw = row_sq_err(models.theta.forward(bound, g.constant(xw.clone()), &draw.ts, &batch.c)?, &draw.eps)?;
    let tl = row_sq_err(models.theta.forward(bound, g.constant(xl.clone()), &draw.ts, &batch.c)?, &draw.eps)?;
    let rw = row_sq_err_values(&models.reference.predict_eps(&xw, &draw.ts, &batch.c)?, &draw.eps)?;
    let rl = row_sq_err_values(&models.reference.predict_eps(&xl, &draw.ts, &batch.c)?, &draw.eps)?;
    let ref_diff: Vec<S> = rw.iter().zip(&rl).map(|(&a, &b)| a - b).collect();
    let ref_diff = g.constant(Tensor::new(vec![ref_diff.len()], ref_diff)?);
    let inner = tw.sub(tl)?.sub(ref_diff)?;
    inner.scale(-S::of(cfg.alpha()))?.log_sigmoid()?.neg()?.mean()
}

/// Log-sigmoid CPO: `-log sigmoid(-alpha (d_theta - d_ref))`.
pub fn cpo_logsigmoid_loss<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let terms = contrast_terms(models, bound, batch, draw)?;
    let d_ref = bound[0].graph().constant(terms.d_ref);
    terms
        .d_theta
        .sub(d_ref)?
        .scale(-S::of(cfg.alpha()))?
        .log_sigmoid()?
        .neg()?
        .mean()
}

/// Final CPO loss: `lambda_cpo * max(d_theta + m, 0)` where `lambda_cpo`
/// is detached. The gradient flows through the hinge only.
pub fn cpo_final_loss<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let terms = contrast_terms(models, bound, batch, draw)?;
    cpo_hinge(&terms, cfg)
}

fn cpo_hinge<'g, S: Scalar>(terms: &ContrastTerms<'g, S>, cfg: &PreferenceConfig) -> Result<Var<'g, S>> {
    let factor = cpo_factor(terms, cfg)?;
    cpo_weighted_hinge(terms, &factor, cfg)
}

/// Value of the detached factor `lambda_cpo` per row.
pub fn cpo_factor<S: Scalar>(terms: &ContrastTerms<'_, S>, cfg: &PreferenceConfig) -> Result<Tensor<S>> {
    let alpha = S::of(cfg.alpha());
    let scaled = terms.d_theta.value().zip_map(&terms.d_ref, "cpo_factor", |d, r| alpha * (d - r))?;
    Ok(match cfg.weight {
        CpoWeight::Linear => scaled,
        CpoWeight::Sigmoid => scaled.map(sigmoid),
    })
}

/// `mean(factor * max(d_theta + m, 0))` for an externally fixed factor.
pub fn cpo_weighted_hinge<'g, S: Scalar>(
    terms: &ContrastTerms<'g, S>,
    factor: &Tensor<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let g = terms.d_theta.graph();
    let hinge = terms.d_theta.add_scalar(S::of(cfg.margin))?.relu()?;
    g.constant(factor.clone()).mul(hinge)?.mean()
}

/// `L_cpo + lambda L_pretrain`, the regularizer using its own `(t', eps')`
/// and the winning condition.
pub fn total_loss<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    reg_draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let terms = contrast_terms(models, bound, batch, draw)?;
    let factor = cpo_factor(&terms, cfg)?;
    total_with_terms(models, bound, batch, &terms, &factor, reg_draw, cfg)
}

/// `total_loss` with the detached factor supplied rather than computed.
pub fn total_loss_with_factor<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    reg_draw: &NoiseDraw<S>,
    factor: &Tensor<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let terms = contrast_terms(models, bound, batch, draw)?;
    total_with_terms(models, bound, batch, &terms, factor, reg_draw, cfg)
}

fn total_with_terms<'g, S: Scalar>(
    models: Models<'_, S>,
    bound: &[Var<'g, S>],
    batch: &CpoBatch<S>,
    terms: &ContrastTerms<'g, S>,
    factor: &Tensor<S>,
    reg_draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Var<'g, S>> {
    let cpo = cpo_weighted_hinge(terms, factor, cfg)?;
    if cfg.reg_lambda == 0.0 {
        return Ok(cpo);
    }
    let reg = pretrain_loss(models.theta, bound, models.schedule, &batch.x0, &batch.c_w, reg_draw)?;
    cpo.add(reg.scale(S::of(cfg.reg_lambda))?)
}

/// Evaluates `loss` on a fresh graph and returns its value with the
/// gradient for every parameter tensor of `theta`.
pub fn value_and_grad<S, F>(theta: &DenoiserParams<S>, loss: F) -> Result<(S, Vec<Tensor<S>>)>
where
    S: Scalar,
    F: for<'g> FnOnce(&[Var<'g, S>]) -> Result<Var<'g, S>>,
{
    let g = Graph::new();
    let bound = theta.bind(&g, true);
    let out = loss(&bound)?;
    let v = out.item()?;
    let grads: Gradients<S> = g.backward(out)?;
    Ok((v, bound.iter().map(|&b| grads.wrt(b)).collect()))
}

fn max_rel_err<S: Scalar>(lhs: &[Tensor<S>], rhs: &[Tensor<S>]) -> f64 {
    lhs.iter()
        .zip(rhs)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .map(|(&a, &b)| (a - b).abs().as_f64() / (b.abs().as_f64() + 1e-12))
        .fold(0.0, f64::max)
}

/// Checks that the autodiff gradient of the log-sigmoid CPO loss equals
/// `alpha sigmoid(alpha (d_theta - d_ref)) grad d_theta` on one example.
/// Returns the maximum relative error over all parameters.
pub fn gradient_identity_check<S: Scalar>(
    models: Models<'_, S>,
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<f64> {
    if batch.rows() != 1 {
        return Err(Error::InvalidArgument("gradient identity is checked per example".into()));
    }
    let (_, lhs) = value_and_grad(models.theta, |b| cpo_logsigmoid_loss(models, b, batch, draw, cfg))?;

    let g = Graph::new();
    let bound = models.theta.bind(&g, true);
    let terms = contrast_terms(models, &bound, batch, draw)?;
    let d_theta = terms.d_theta.item()?;
    let d_ref = terms.d_ref.item()?;
    let out = terms.d_theta.sum()?;
    let grads = g.backward(out)?;
    let alpha = S::of(cfg.alpha());
    let k = alpha * sigmoid(alpha * (d_theta - d_ref));
    let rhs: Vec<Tensor<S>> = bound.iter().map(|&b| grads.wrt(b).map(|v| k * v)).collect();
    Ok(max_rel_err(&lhs, &rhs))
}

/// Monte Carlo comparison of `E[-log sigmoid(inner)]` with
/// `-log sigmoid(E[inner])`, where `inner = -alpha (d_theta - d_ref)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JensenReport {
    /// `-log sigmoid(E[inner])`.
    pub lhs: f64,
    /// `E[-log sigmoid(inner)]`.
    pub rhs: f64,
    /// `rhs - lhs`; non-negative by convexity of `-log sigmoid`.
    pub margin: f64,
    /// Standard error of the `rhs` estimate.
    pub stderr: f64,
    pub trials: usize,
}

impl JensenReport {
    /// `rhs >= lhs - 3 stderr`.
    pub fn holds(&self) -> bool {
        self.rhs >= self.lhs - 3.0 * self.stderr
    }
}

pub const MIN_JENSEN_TRIALS: usize = 1000;

/// Draws `trials` pairs `(t, eps)` for one triplet and estimates both
/// sides of the Jensen bound.
pub fn jensen_bound_check<S: Scalar>(
    models: Models<'_, S>,
    x0: &[f64],
    c_w: &Condition,
    c_l: &Condition,
    trials: usize,
    cfg: &PreferenceConfig,
    rng: &mut Rng,
) -> Result<JensenReport> {
    if trials < MIN_JENSEN_TRIALS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_JENSEN_TRIALS} trials")));
    }
    let dim = x0.len();
    let x0s: Vec<f64> = (0..trials).flat_map(|_| x0.iter().copied()).collect();
    let batch = CpoBatch::new(
        models.theta,
        Tensor::from_f64(vec![trials, dim], &x0s)?,
        &vec![c_w.clone(); trials],
        &vec![c_l.clone(); trials],
    )?;
    let draw = NoiseDraw::sample(trials, dim, models.schedule.steps(), rng);
    let inner = contrast_inner_values(models, &batch, &draw, cfg)?;
    let mut mean_inner = crate::stats::Welford::default();
    let mut loss = crate::stats::Welford::default();
    for &z in &inner {
        mean_inner.push(z);
        loss.push(-log_sigmoid(z));
    }
    let lhs = -log_sigmoid(mean_inner.mean());
    let rhs = loss.mean();
    Ok(JensenReport {
        lhs,
        rhs,
        margin: rhs - lhs,
        stderr: loss.stderr(),
        trials,
    })
}

/// `-alpha (d_theta - d_ref)` per row, without a graph.
pub fn contrast_inner_values<S: Scalar>(
    models: Models<'_, S>,
    batch: &CpoBatch<S>,
    draw: &NoiseDraw<S>,
    cfg: &PreferenceConfig,
) -> Result<Vec<f64>> {
    check_draw(&batch.x0, draw)?;
    let x_t = models.schedule.q_sample_rows(&batch.x0, &draw.ts, &draw.eps)?;
    let err = |p: &DenoiserParams<S>, c: &ConditionBatch<S>| -> Result<Vec<S>> {
        row_sq_err_values(&p.predict_eps(&x_t, &draw.ts, c)?, &draw.eps)
    };
    let (tw, tl) = (err(models.theta, &batch.c_w)?, err(models.theta, &batch.c_l)?);
    let (rw, rl) = (
        err(models.reference.params(), &batch.c_w)?,
        err(models.reference.params(), &batch.c_l)?,
    );
    let alpha = cfg.alpha();
    Ok((0..tw.len())
        .map(|i| -alpha * ((tw[i] - tl[i]).as_f64() - (rw[i] - rl[i]).as_f64()))
        .collect())
}
