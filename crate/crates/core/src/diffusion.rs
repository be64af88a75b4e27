//! Noise schedules, closed-form forward diffusion, the ancestral reverse step
//! and the noise-prediction training loss.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `alpha_bar(0) = 1` denoting the
//! clean pre-chain state.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dims, Network, Real};

/// Serialized form of a schedule. Derived tables are recomputed on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 300, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        match self.kind {
            ScheduleKind::Linear => DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl TryFrom<ScheduleSpec> for DiffusionSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        spec.build()
    }
}

impl From<DiffusionSchedule> for ScheduleSpec {
    fn from(s: DiffusionSchedule) -> Self {
        s.spec
    }
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be at least 1".into()));
        }
        let in_range = |b: f64| b > 0.0 && b < 1.0;
        if !in_range(beta_start) || !in_range(beta_end) {
            return Err(Error::Schedule(format!("beta endpoints must lie in (0, 1), got [{beta_start}, {beta_end}]")));
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!("beta_start {beta_start} exceeds beta_end {beta_end}")));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| if i == steps - 1 { beta_end } else { beta_start + step * i as f64 }).collect()
        };
        let spec = ScheduleSpec { steps, beta_start, beta_end, kind: ScheduleKind::Linear };
        Ok(Self::from_parts(spec, betas))
    }

    fn from_parts(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self { spec, betas, alphas, alpha_bars }
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Chain length `T`.
    pub fn steps(&self) -> usize {
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

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::Timestep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Standard deviation of the reverse-step noise, `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// Predicted noise `ε̂` for a diffused tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction<T = f32>(pub Vec<T>);

impl<T: Real> NoisePrediction<T> {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> Deref for NoisePrediction<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(&[a], &[b]))
    }
}

/// Closed-form forward diffusion: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Real>(x0: &[T], t: usize, eps: &[T], sched: &DiffusionSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    same_len(x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One ancestral DDPM step from `x_t` to `x_{t−1}`:
/// `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`, with `z` ignored at `t = 1`.
pub fn reverse_step<T: Real>(x_t: &[T], eps_hat: &[T], t: usize, sched: &DiffusionSchedule, noise: &[T]) -> Result<Vec<T>> {
    sched.check_t(t)?;
    same_len(x_t.len(), eps_hat.len())?;
    let beta = sched.beta(t);
    let coef = T::lit(beta / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv_sqrt_alpha = T::lit(1.0 / sched.alpha(t).sqrt());
    let mean = x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - coef * e) * inv_sqrt_alpha);
    if t == 1 {
        return Ok(mean.collect());
    }
    same_len(x_t.len(), noise.len())?;
    let sigma = T::lit(sched.sigma(t));
    Ok(mean.zip(noise).map(|(m, &z)| m + sigma * z).collect())
}

/// Skip and output scales `(c_skip, c_out)` for a noise predictor written as
/// `ε̂ = c_skip·x_t + c_out·F`. `c_skip·x_t` is the best linear estimate of
/// `ε` from `x_t` for zero-mean data of RMS `sigma_data`, and `c_out` is the
/// RMS of what remains, so `F` has a unit-scale target at every `t`.
pub fn eps_preconditioning(sched: &DiffusionSchedule, t: usize, sigma_data: f64) -> (f64, f64) {
    let ab = sched.alpha_bar(t);
    let signal = ab * sigma_data * sigma_data;
    let total = signal + 1.0 - ab;
    ((1.0 - ab).sqrt() / total, (signal / total).sqrt())
}

/// Noise-prediction loss: mean of `(ε − ε_θ(q_sample(x0, t, ε), t))²`.
pub fn ddpm_loss<T: Real, F>(denoiser: F, x0: &[T], t: usize, eps: &[T], sched: &DiffusionSchedule) -> Result<f64>
where
    F: FnOnce(&[T], usize) -> Vec<T>,
{
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = denoiser(&x_t, t);
    same_len(eps.len(), pred.len())?;
    let sum: f64 = eps.iter().zip(&pred).map(|(&e, &p)| (e - p).to_f64().unwrap().powi(2)).sum();
    Ok(sum / eps.len().max(1) as f64)
}

/// [`ddpm_loss`] for a [`Network`] denoiser, together with the gradient of
/// the loss w.r.t. the network parameters. `x0` is channel-major with the
/// network's channel count; the timestep is the only scalar condition.
pub fn ddpm_loss_grad<T: Real, N: Network>(
    net: &N,
    params: &[T],
    x0: &[T],
    dims: Dims,
    t: usize,
    eps: &[T],
    sched: &DiffusionSchedule,
) -> Result<(f64, Vec<T>)> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let (pred, cache) = net.forward(params, &x_t, dims, &[t as f64]);
    same_len(eps.len(), pred.len())?;
    let (loss, dpred) = crate::nn::optim::mse(&pred, eps);
    let mut grad = vec![T::zero(); params.len()];
    net.backward(params, cache, &dpred, &mut grad);
    Ok((loss, grad))
}
