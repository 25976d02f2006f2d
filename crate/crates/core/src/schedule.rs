//! DDPM noise schedule, forward marginal and ancestral reverse step.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) = 1`.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Prefactor applied to the posterior mean in [`NoiseSchedule::posterior_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanPrefactor {
    /// `1 / sqrt(1 - beta_t)`, which inverts the forward marginal.
    #[default]
    Standard,
    /// `1 / (1 - beta_t)`. It does not invert the forward marginal and is
    /// kept for side-by-side comparisons only.
    Printed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<S> {
    beta: Vec<S>,
    alpha_bar: Vec<S>,
    posterior_var: Vec<S>,
    lambda: Vec<S>,
    omega: S,
    prefactor: MeanPrefactor,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Constant SNR weight used by the preference losses.
pub const OMEGA: f64 = 0.5;

impl<S: Scalar> NoiseSchedule<S> {
    /// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect::<Vec<_>>();
        Self::from_betas(&beta)
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    /// Builds every derived constant from explicit per-step betas.
    pub fn from_betas(beta: &[f64]) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0f64;
        for &b in beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect::<Vec<_>>();
        let lambda = alpha_bar.iter().map(|a| a / (1.0 - a)).collect::<Vec<_>>();
        let conv = |v: &[f64]| v.iter().map(|&x| S::of(x)).collect::<Vec<S>>();
        Ok(Self {
            beta: conv(beta),
            alpha_bar: conv(&alpha_bar),
            posterior_var: conv(&posterior_var),
            lambda: conv(&lambda),
            omega: S::of(OMEGA),
            prefactor: MeanPrefactor::Standard,
        })
    }

    pub fn with_prefactor(mut self, prefactor: MeanPrefactor) -> Self {
        self.prefactor = prefactor;
        self
    }

    pub fn prefactor(&self) -> MeanPrefactor {
        self.prefactor
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, t_max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> S {
        self.beta[t - 1]
    }

    /// Cumulative product of `1 - beta` up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> S {
        if t == 0 {
            S::one()
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> S {
        self.posterior_var[t - 1]
    }

    pub fn betas(&self) -> &[S] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    /// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (S::one() - a).sqrt());
        x0.zip_map(eps, "q_sample", |x, e| sa * x + sn * e)
    }

    /// Row-wise [`q_sample`](Self::q_sample) with one timestep per row of a
    /// `[batch, dim]` matrix.
    pub fn q_sample_rows(&self, x0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
        x0.same_shape(eps, "q_sample_rows")?;
        let (rows, cols) = x0.dims2("q_sample_rows")?;
        if ts.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "q_sample_rows",
                lhs: x0.shape().to_vec(),
                rhs: vec![ts.len()],
            });
        }
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let a = self.alpha_bar(t);
            let (sa, sn) = (a.sqrt(), (S::one() - a).sqrt());
            out.extend(x0.row(r).iter().zip(eps.row(r)).map(|(&x, &e)| sa * x + sn * e));
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// Posterior mean `mu_t(x_t, eps_hat)`.
    pub fn posterior_mean(&self, x_t: &Tensor<S>, t: usize, eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_t(t)?;
        let b = self.beta(t);
        let a = self.alpha_bar(t);
        let pre = match self.prefactor {
            MeanPrefactor::Standard => S::one() / (S::one() - b).sqrt(),
            MeanPrefactor::Printed => S::one() / (S::one() - b),
        };
        let coef = b / (S::one() - a).sqrt();
        x_t.zip_map(eps_hat, "posterior_mean", |x, e| pre * (x - coef * e))
    }

    /// One ancestral step `x_{t-1} = mu_t + sqrt(posterior_var_t) noise`.
    ///
    /// `noise` is ignored at `t == 1`, where the mean is returned.
    pub fn posterior_step(
        &self,
        x_t: &Tensor<S>,
        t: usize,
        eps_hat: &Tensor<S>,
        noise: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let mean = self.posterior_mean(x_t, t, eps_hat)?;
        match noise {
            Some(z) if t > 1 => {
                let sd = self.posterior_var(t).sqrt();
                mean.zip_map(z, "posterior_step", |m, n| m + sd * n)
            }
            _ => Ok(mean),
        }
    }

    /// `(lambda_t, omega)` with `lambda_t = alpha_bar_t / (1 - alpha_bar_t)`.
    pub fn snr_weight(&self, t: usize) -> Result<(S, S)> {
        self.check_t(t)?;
        Ok((self.lambda[t - 1], self.omega))
    }
}
