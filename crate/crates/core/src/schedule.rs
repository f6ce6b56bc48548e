//! Forward noising and x0-parameterized reverse steps.
//!
//! The network predicts clean targets, so each reverse step is the DDPM
//! posterior `q(x_{t-1} | x_t, x0)` with the prediction substituted for x0.

use serde::{Deserialize, Serialize};

use crate::error::{CdpError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 100,
            kind: ScheduleKind::Cosine,
            beta_min: 1e-4,
            beta_max: 0.999,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.num_steps, self.kind, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Build a schedule of `num_steps` betas.
///
/// `Linear` spaces betas evenly from `beta_min` to `beta_max`. `Cosine`
/// derives betas from the squared-cosine ᾱ curve and clips them at
/// `beta_max`; `beta_min` only bounds the range check for that kind.
pub fn make_schedule(num_steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(CdpError::Config(format!("num_steps must be >= 2, got {num_steps}")));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(CdpError::Config(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let span = beta_max - beta_min;
            (0..num_steps)
                .map(|i| beta_min + span * i as f64 / (num_steps - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: usize| cosine_alpha_bar(t as f64 / num_steps as f64);
            (0..num_steps)
                .map(|i| (1.0 - f(i + 1) / f(i)).min(beta_max))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

fn cosine_alpha_bar(u: f64) -> f64 {
    let x = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(CdpError::Index {
                index: t,
                len: self.num_steps(),
            });
        }
        Ok(())
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·noise`.
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if x0.shape() != noise.shape() {
            return Err(crate::error::shape_err("q_sample", x0.shape(), noise.shape()));
        }
        let ab = self.alpha_bars[t];
        let (cs, cn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Tensor::new(
            x0.shape().to_vec(),
            x0.data().iter().zip(noise.data()).map(|(x, n)| cs * *x + cn * *n).collect(),
        )
    }

    /// Posterior coefficients `(c_x0, c_xt, variance)` for stepping from `t` to `t−1`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        if t == 0 {
            return Ok((1.0, 0.0, 0.0));
        }
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let beta = self.betas[t];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct, var))
    }

    /// One reverse step from `x_t` given a clean prediction. At `t == 0` the
    /// prediction is returned unchanged. `noise` adds posterior variance and
    /// must be provided when `stochastic` is set and `t > 0`.
    pub fn denoise_step_x0<T: Real>(
        &self,
        x_t: &Tensor<T>,
        x0_pred: &Tensor<T>,
        t: usize,
        noise: Option<&Tensor<T>>,
        stochastic: bool,
    ) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if x_t.shape() != x0_pred.shape() {
            return Err(crate::error::shape_err("denoise_step_x0", x_t.shape(), x0_pred.shape()));
        }
        if t == 0 {
            return Ok(x0_pred.clone());
        }
        let (c0, ct, var) = self.posterior_coefficients(t)?;
        let (c0, ct) = (T::lit(c0), T::lit(ct));
        let mut out: Vec<T> = x0_pred
            .data()
            .iter()
            .zip(x_t.data())
            .map(|(p, x)| c0 * *p + ct * *x)
            .collect();
        if stochastic {
            let noise = noise.ok_or_else(|| {
                CdpError::Contract(format!("stochastic step at t={t} requires noise"))
            })?;
            if noise.shape() != x_t.shape() {
                return Err(crate::error::shape_err("denoise_step_x0", x_t.shape(), noise.shape()));
            }
            let sd = T::lit(var.sqrt());
            for (o, n) in out.iter_mut().zip(noise.data()) {
                *o += sd * *n;
            }
        }
        Tensor::new(x_t.shape().to_vec(), out)
    }
}
