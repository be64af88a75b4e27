//! Multi-condition diffusion model over `m`-slice mask windows.
//!
//! One network covers three generation modes. A window of `m` consecutive
//! slices is split into condition slices `X^C` and target slices `X^P`:
//!
//! * [`ConditionMode::Forward`]: the first `n` slots hold known slices and the
//!   model generates the following `m − n`;
//! * [`ConditionMode::Backward`]: the last `n` slots are known and the model
//!   generates the preceding `m − n`;
//! * [`ConditionMode::Unconditional`]: nothing is known; all `m` slots are
//!   generated.
//!
//! The network input stacks `3m` channels: noisy target content (zero in
//! condition slots), condition content (zero in target slots), and one
//! constant indicator plane per slot. The window's relative start position
//! and the timestep enter through the embedding path. The network output `F`
//! is combined with the noisy input as `ε̂ = c_skip(t)·x_t + c_out(t)·F`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{eps_preconditioning, q_sample, reverse_step, DiffusionSchedule, NoisePrediction};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointHeader};
use crate::nn::optim::{mean_of, mse};
use crate::nn::{auto_levels, Adam, AdamConfig, Ema, Network, Real, UNet, UNetConfig};
use crate::rng::{self, Rng};
use crate::volume::Volume;

/// Scale applied to the relative position before sinusoidal embedding.
pub const POSITION_SCALE: f64 = 100.0;

/// RMS of codec-encoded data assumed by the output preconditioning.
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    Forward,
    Backward,
    Unconditional,
}

impl ConditionMode {
    /// Slot range occupied by condition slices in an `m`-window.
    pub fn condition_slots(self, m: usize, n: usize) -> std::ops::Range<usize> {
        match self {
            ConditionMode::Forward => 0..n,
            ConditionMode::Backward => m - n..m,
            ConditionMode::Unconditional => 0..0,
        }
    }

    /// Slot range occupied by target slices in an `m`-window.
    pub fn target_slots(self, m: usize, n: usize) -> std::ops::Range<usize> {
        match self {
            ConditionMode::Forward => n..m,
            ConditionMode::Backward => 0..m - n,
            ConditionMode::Unconditional => 0..m,
        }
    }

    pub fn condition_count(self, n: usize) -> usize {
        match self {
            ConditionMode::Unconditional => 0,
            _ => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeProbabilities {
    pub p_forward: f64,
    pub p_backward: f64,
    pub p_uncondition: f64,
}

impl Default for ModeProbabilities {
    fn default() -> Self {
        Self { p_forward: 0.4, p_backward: 0.4, p_uncondition: 0.2 }
    }
}

impl ModeProbabilities {
    pub fn new(p_forward: f64, p_backward: f64, p_uncondition: f64) -> Result<Self> {
        let p = Self { p_forward, p_backward, p_uncondition };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_forward, self.p_backward, self.p_uncondition];
        if ps.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::Probabilities(format!("each probability must lie in [0, 1], got {ps:?}")));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Probabilities(format!("probabilities must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Categorical draw of a condition mode.
pub fn sample_condition_mode(probs: &ModeProbabilities, rng: &mut Rng) -> Result<ConditionMode> {
    probs.validate()?;
    let u: f64 = rng.gen();
    Ok(if u < probs.p_forward {
        ConditionMode::Forward
    } else if u < probs.p_forward + probs.p_backward {
        ConditionMode::Backward
    } else if probs.p_uncondition > 0.0 {
        ConditionMode::Unconditional
    } else if probs.p_backward > 0.0 {
        // u landed in the rounding gap above p_F + p_B
        ConditionMode::Backward
    } else {
        ConditionMode::Forward
    })
}

/// One training/sampling unit: target slices, condition slices, slot
/// indicators and the window's relative position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedExample {
    /// `(m − c) x H x W`, values in `[-1, 1]`.
    pub target: Vec<f32>,
    /// `c x H x W`; empty for the unconditional mode.
    pub condition: Vec<f32>,
    /// Length `m`; 1 marks a condition slot.
    pub indicators: Vec<u8>,
    /// Window start divided by source depth.
    pub z_norm: f64,
    pub mode: ConditionMode,
    pub start: usize,
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl ConditionedExample {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn target_count(&self) -> usize {
        self.target.len() / self.plane()
    }

    pub fn condition_count(&self) -> usize {
        self.condition.len() / self.plane()
    }
}

pub fn indicators(mode: ConditionMode, m: usize, n: usize) -> Vec<u8> {
    let slots = mode.condition_slots(m, n);
    (0..m).map(|i| slots.contains(&i) as u8).collect()
}

fn check_window(depth: usize, m: usize, n: usize) -> Result<()> {
    if n == 0 || n >= m {
        return Err(Error::Config(format!("need 1 <= n < m, got n={n}, m={m}")));
    }
    if m > depth {
        return Err(Error::Config(format!("subsequence length m={m} exceeds depth {depth}")));
    }
    Ok(())
}

/// Window starting at `start` of an encoded `D x H x W` volume.
pub fn assemble_at(volume: &Volume<f32>, m: usize, n: usize, mode: ConditionMode, start: usize) -> Result<ConditionedExample> {
    let [d, h, w] = volume.dims();
    check_window(d, m, n)?;
    if start + m > d {
        return Err(Error::Config(format!("window [{start}, {}) exceeds depth {d}", start + m)));
    }
    let plane = h * w;
    let slots = |r: std::ops::Range<usize>| volume.data()[(start + r.start) * plane..(start + r.end) * plane].to_vec();
    Ok(ConditionedExample {
        target: slots(mode.target_slots(m, n)),
        condition: slots(mode.condition_slots(m, n)),
        indicators: indicators(mode, m, n),
        z_norm: start as f64 / d as f64,
        mode,
        start,
        m,
        n,
        h,
        w,
    })
}

/// Window with a uniformly drawn start in `0..=D−m`.
pub fn assemble_training_example(volume: &Volume<f32>, m: usize, n: usize, mode: ConditionMode, rng: &mut Rng) -> Result<ConditionedExample> {
    check_window(volume.depth(), m, n)?;
    let start = rng.gen_range(0..=volume.depth() - m);
    assemble_at(volume, m, n, mode, start)
}

/// Classifier-free guidance: `ε_∅ + s·(ε_c − ε_∅)`; `s = 1` returns `ε_c`.
pub fn cfg_combine<T: Real>(eps_uncond: &NoisePrediction<T>, eps_cond: &NoisePrediction<T>, s: f64) -> Result<NoisePrediction<T>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::shape(&[eps_cond.len()], &[eps_uncond.len()]));
    }
    if !(s.is_finite() && s >= 1.0) {
        return Err(Error::Config(format!("guidance scale must be >= 1, got {s}")));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let s = T::lit(s);
    Ok(NoisePrediction(eps_uncond.iter().zip(eps_cond.iter()).map(|(&u, &c)| u + s * (c - u)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McDpmShape {
    pub m: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

/// Noise predictor `ε_θ(X_t^P, X^C, z̃, t)` wrapping a [`Network`] with `3m`
/// input and `m` output channels and two scalar conditions.
#[derive(Debug, Clone)]
pub struct McDenoiser<N = UNet> {
    pub shape: McDpmShape,
    pub net: N,
}

impl McDenoiser<UNet> {
    pub fn unet(shape: McDpmShape, width: usize, freq_dim: usize, levels: usize) -> Result<Self> {
        let net = UNet::new(UNetConfig { in_channels: 3 * shape.m, out_channels: shape.m, width, cond_inputs: 2, freq_dim, levels });
        Self::new(shape, net)
    }
}

impl<N: Network> McDenoiser<N> {
    pub fn new(shape: McDpmShape, net: N) -> Result<Self> {
        check_window(shape.m, shape.m, shape.n)?;
        if net.in_channels() != 3 * shape.m || net.out_channels() != shape.m || net.cond_inputs() != 2 {
            return Err(Error::Config(format!("denoiser network must map {} channels to {} with 2 conditions", 3 * shape.m, shape.m)));
        }
        if !net.supports([1, shape.h, shape.w]) {
            return Err(Error::Config(format!("network cannot process {}x{} slices", shape.h, shape.w)));
        }
        Ok(Self { shape, net })
    }

    fn plane(&self) -> usize {
        self.shape.h * self.shape.w
    }

    /// Channel-stacked network input. `noisy` fills the target slots of
    /// `mode`; `condition` (if any) fills its condition slots. `null_condition`
    /// zeroes condition content and indicators, the `∅` used for guidance.
    fn input<T: Real>(&self, noisy: &[T], condition: &[T], mode: ConditionMode, null_condition: bool) -> Vec<T> {
        let McDpmShape { m, n, .. } = self.shape;
        let plane = self.plane();
        let mut x = vec![T::zero(); 3 * m * plane];
        let ts = mode.target_slots(m, n);
        x[ts.start * plane..ts.end * plane].copy_from_slice(noisy);
        if !null_condition {
            let cs = mode.condition_slots(m, n);
            x[(m + cs.start) * plane..(m + cs.end) * plane].copy_from_slice(condition);
            for slot in cs {
                x[(2 * m + slot) * plane..(2 * m + slot + 1) * plane].fill(T::one());
            }
        }
        x
    }

    fn check_counts(&self, mode: ConditionMode, noisy: usize, condition: usize) -> Result<()> {
        let McDpmShape { m, n, .. } = self.shape;
        let plane = self.plane();
        let want_t = mode.target_slots(m, n).len() * plane;
        let want_c = mode.condition_count(n) * plane;
        if noisy != want_t || condition != want_c {
            return Err(Error::shape(&[want_t, want_c], &[noisy, condition]));
        }
        Ok(())
    }

    fn cond_scalars(t: usize, z_norm: f64) -> [f64; 2] {
        [t as f64, z_norm * POSITION_SCALE]
    }

    /// Predicted noise over the target slots.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<T: Real>(
        &self,
        params: &[T],
        noisy: &[T],
        condition: &[T],
        mode: ConditionMode,
        z_norm: f64,
        t: usize,
        sched: &DiffusionSchedule,
        null_condition: bool,
    ) -> Result<NoisePrediction<T>> {
        self.check_counts(mode, noisy.len(), condition.len())?;
        sched.check_t(t)?;
        let McDpmShape { m, n, h, w } = self.shape;
        let x = self.input(noisy, condition, mode, null_condition);
        let out = self.net.infer(params, &x, [1, h, w], &Self::cond_scalars(t, z_norm));
        let ts = mode.target_slots(m, n);
        let (skip, scale) = eps_preconditioning(sched, t, SIGMA_DATA);
        let (skip, scale) = (T::lit(skip), T::lit(scale));
        let f = &out[ts.start * h * w..ts.end * h * w];
        Ok(NoisePrediction(noisy.iter().zip(f).map(|(&x, &f)| skip * x + scale * f).collect()))
    }

    /// Loss `mean((ε − ε_θ(X_t^P, X^C, z̃, t))²)` for one example and its
    /// parameter gradient.
    pub fn loss_grad<T: Real>(&self, params: &[T], ex: &ConditionedExample, t: usize, eps: &[T], sched: &DiffusionSchedule) -> Result<(f64, Vec<T>)> {
        let target: Vec<T> = ex.target.iter().map(|&v| T::lit(v as f64)).collect();
        let condition: Vec<T> = ex.condition.iter().map(|&v| T::lit(v as f64)).collect();
        self.loss_grad_raw(params, &target, &condition, ex.mode, ex.z_norm, t, eps, sched)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn loss_grad_raw<T: Real>(
        &self,
        params: &[T],
        target: &[T],
        condition: &[T],
        mode: ConditionMode,
        z_norm: f64,
        t: usize,
        eps: &[T],
        sched: &DiffusionSchedule,
    ) -> Result<(f64, Vec<T>)> {
        self.check_counts(mode, target.len(), condition.len())?;
        let McDpmShape { m, n, h, w } = self.shape;
        let noisy = q_sample(target, t, eps, sched)?;
        let x = self.input(&noisy, condition, mode, false);
        let (out, cache) = self.net.forward(params, &x, [1, h, w], &Self::cond_scalars(t, z_norm));
        let ts = mode.target_slots(m, n);
        let plane = h * w;
        let (skip, scale) = eps_preconditioning(sched, t, SIGMA_DATA);
        let (skip, scale) = (T::lit(skip), T::lit(scale));
        let pred: Vec<T> = noisy.iter().zip(&out[ts.start * plane..ts.end * plane]).map(|(&x, &f)| skip * x + scale * f).collect();
        let (loss, dpred) = mse(&pred, eps);
        let mut dout = vec![T::zero(); out.len()];
        dout[ts.start * plane..ts.end * plane].iter_mut().zip(&dpred).for_each(|(d, &g)| *d = scale * g);
        let mut grad = vec![T::zero(); params.len()];
        self.net.backward(params, cache, &dout, &mut grad);
        Ok((loss, grad))
    }

    /// Loss only (no gradient), used by finite-difference checks.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Real>(
        &self,
        params: &[T],
        target: &[T],
        condition: &[T],
        mode: ConditionMode,
        z_norm: f64,
        t: usize,
        eps: &[T],
        sched: &DiffusionSchedule,
    ) -> Result<f64> {
        let noisy = q_sample(target, t, eps, sched)?;
        let pred = self.predict(params, &noisy, condition, mode, z_norm, t, sched, false)?;
        Ok(mse(&pred, eps).0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McDpmConfig {
    pub shape: McDpmShape,
    pub width: usize,
    pub freq_dim: usize,
    pub levels: usize,
    pub optimizer: AdamConfig,
    /// Decay of the parameter average used for sampling.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    /// Training timesteps are drawn as `⌈T·u^p⌉` with `u ~ U(0, 1)`; `p = 1`
    /// is the uniform draw and larger `p` spends more steps at small `t`.
    #[serde(default = "default_timestep_power")]
    pub timestep_power: f64,
}

pub(crate) fn default_ema_decay() -> f64 {
    0.995
}

fn default_timestep_power() -> f64 {
    1.0
}

/// Training timestep in `1..=steps`, uniform for `power == 1`.
pub fn draw_timestep(steps: usize, power: f64, rng: &mut Rng) -> usize {
    if power == 1.0 {
        return rng.gen_range(1..=steps);
    }
    let u: f64 = rng.gen();
    ((steps as f64 * u.powf(power)).ceil() as usize).clamp(1, steps)
}

impl McDpmConfig {
    pub fn new(m: usize, n: usize, h: usize, w: usize, width: usize) -> Self {
        Self {
            shape: McDpmShape { m, n, h, w },
            width,
            freq_dim: 16,
            levels: auto_levels(h, w, 4),
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            ema_decay: default_ema_decay(),
            timestep_power: default_timestep_power(),
        }
    }
}

/// Trainable model: denoiser, parameters, optimizer state and the parameter
/// average used for sampling.
#[derive(Debug, Clone)]
pub struct McDpm {
    pub cfg: McDpmConfig,
    pub denoiser: McDenoiser<UNet>,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
    pub ema: Ema,
    pub seed: u64,
}

impl McDpm {
    pub fn new(cfg: McDpmConfig, seed: u64) -> Result<Self> {
        let denoiser = McDenoiser::unet(cfg.shape, cfg.width, cfg.freq_dim, cfg.levels)?;
        let params = denoiser.net.init_params(&mut rng::rng_at(seed, &[0x1417]));
        let adam = Adam::new(cfg.optimizer, params.len());
        let ema = Ema::new(cfg.ema_decay, &params);
        Ok(Self { cfg, denoiser, params, adam, ema, seed })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Averaged parameters, used for sampling.
    pub fn sampling_params(&self) -> &[f32] {
        &self.ema.shadow
    }

    /// One optimizer step on a prepared batch: every example is diffused at
    /// a `t` from [`draw_timestep`] with fresh noise, and the mean loss is
    /// returned.
    pub fn train_step(&mut self, batch: &[ConditionedExample], sched: &DiffusionSchedule, rng: &mut Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("training batch is empty".into()));
        }
        let s = self.cfg.shape;
        for ex in batch {
            if (ex.m, ex.n, ex.h, ex.w) != (s.m, s.n, s.h, s.w) {
                return Err(Error::shape(&[s.m, s.n, s.h, s.w], &[ex.m, ex.n, ex.h, ex.w]));
            }
        }
        let power = self.cfg.timestep_power;
        let draws: Vec<(usize, u64)> = batch.iter().map(|_| (draw_timestep(sched.steps(), power, rng), rng.gen())).collect();
        let den = &self.denoiser;
        let params = &self.params;
        let results = crate::par::map_range(batch.len(), |i| {
            let (t, seed) = draws[i];
            let eps = rng::standard_normal_vec(&mut rng::rng(seed), batch[i].target.len());
            den.loss_grad(params, &batch[i], t, &eps, sched)
        });
        let (loss, grad) = mean_of(results.into_iter().collect::<Result<Vec<_>>>()?);
        self.adam.update(&mut self.params, &grad);
        self.ema.update(&self.params, self.adam.step);
        Ok(loss)
    }

    /// Draw a batch from encoded volumes (modes from `probs`, uniform window
    /// starts) and take one step. Randomness is keyed on `(seed, step)` so a
    /// resumed run replays the same stream.
    pub fn fit_step(&mut self, volumes: &[Volume<f32>], probs: &ModeProbabilities, batch: usize, sched: &DiffusionSchedule) -> Result<f64> {
        if volumes.is_empty() {
            return Err(Error::Config("no training volumes".into()));
        }
        let mut r = rng::rng_at(self.seed, &[0xBA7C, self.step()]);
        let s = self.cfg.shape;
        let mut examples = Vec::with_capacity(batch);
        for _ in 0..batch {
            let v = &volumes[r.gen_range(0..volumes.len())];
            let mode = sample_condition_mode(probs, &mut r)?;
            examples.push(assemble_training_example(v, s.m, s.n, mode, &mut r)?);
        }
        self.train_step(&examples, sched, &mut r)
    }

    pub fn to_checkpoint(&self, sched: &DiffusionSchedule, config_hash: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: "mask".into(),
                architecture: serde_json::to_value(self.denoiser.net.config()).expect("serializable"),
                hyper: serde_json::to_value(self.cfg).expect("serializable"),
                schedule: Some(sched.spec()),
                step: self.step(),
                num_params: self.params.len(),
                optimizer: self.cfg.optimizer,
                seed: self.seed,
                config_hash: config_hash.into(),
                ema_decay: Some(self.ema.decay),
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
            ema: Some(self.ema.shadow.clone()),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "mask" {
            return Err(Error::Checkpoint(format!("expected a mask checkpoint, got {}", ck.header.kind)));
        }
        let cfg: McDpmConfig = serde_json::from_value(ck.header.hyper.clone())?;
        let mut model = Self::new(cfg, ck.header.seed)?;
        if model.params.len() != ck.params.len() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.params = ck.params.clone();
        model.adam = ck.adam.clone();
        model.ema.shadow = ck.ema.clone().unwrap_or_else(|| ck.params.clone());
        Ok(model)
    }
}

/// Ancestral sampling of the target slices of one window.
///
/// `condition` holds `0` slices (unconditional; yields `m` slices) or `n`
/// slices (yields `m − n`). With `guidance > 1` and a condition present, the
/// null-condition prediction is also computed and combined through
/// [`cfg_combine`]. Output is clamped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_subsequence<N: Network>(
    model: &McDenoiser<N>,
    params: &[f32],
    condition: &[f32],
    mode: ConditionMode,
    z_norm: f64,
    sched: &DiffusionSchedule,
    guidance: f64,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let McDpmShape { m, n, h, w } = model.shape;
    let plane = h * w;
    let c = condition.len() / plane.max(1);
    if !condition.len().is_multiple_of(plane) || c != mode.condition_count(n) {
        return Err(Error::Config(format!(
            "{mode:?} sampling needs {} condition slices, got {}",
            mode.condition_count(n),
            condition.len() as f64 / plane as f64
        )));
    }
    if !(0.0..=1.0).contains(&z_norm) || !z_norm.is_finite() {
        return Err(Error::Config(format!("relative position {z_norm} outside [0, 1]")));
    }
    let count = mode.target_slots(m, n).len() * plane;
    let mut x = rng::standard_normal_vec(rng, count);
    for t in (1..=sched.steps()).rev() {
        let cond = model.predict(params, &x, condition, mode, z_norm, t, sched, false)?;
        let eps = if guidance > 1.0 && c > 0 {
            let null = model.predict(params, &x, condition, mode, z_norm, t, sched, true)?;
            cfg_combine(&null, &cond, guidance)?
        } else {
            cond
        };
        let noise = if t > 1 { rng::standard_normal_vec(rng, count) } else { vec![] };
        x = reverse_step(&x, &eps, t, sched, &noise)?;
    }
    Ok(x.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }).collect())
}
