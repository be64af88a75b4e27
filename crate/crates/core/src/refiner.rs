//! Per-view semantic diffusion refiner.
//!
//! One 2-D denoiser per view predicts noise from a noisy image slice and the
//! matching codec-encoded mask slice. Refinement renoises the volume to step
//! `k`, denoises every slice along the view's axis with `k` reverse steps,
//! and averages the three view results.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::LabelCodec;
use crate::diffusion::{q_sample, reverse_step, DiffusionSchedule, NoisePrediction};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointHeader};
use crate::mcdpm::default_ema_decay;
use crate::nn::optim::{mean_of, mse};
use crate::nn::{auto_levels, Adam, AdamConfig, Ema, Network, UNet, UNetConfig};
use crate::rng::{self, Rng};
use crate::volume::{ImageVolume, MaskVolume, View, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdmConfig {
    pub view: View,
    /// Volume dims `[D, H, W]` the model slices.
    pub dims: [usize; 3],
    pub width: usize,
    pub freq_dim: usize,
    pub levels: usize,
    pub optimizer: AdamConfig,
    /// Decay of the parameter average used for refinement.
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
}

impl SdmConfig {
    pub fn new(view: View, dims: [usize; 3], width: usize) -> Self {
        let (_, rows, cols) = view.geometry(dims);
        Self {
            view,
            dims,
            width,
            freq_dim: 16,
            levels: auto_levels(rows, cols, 3),
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            ema_decay: default_ema_decay(),
        }
    }

    fn slice_dims(&self) -> [usize; 3] {
        let (_, rows, cols) = self.view.geometry(self.dims);
        [1, rows, cols]
    }
}

fn view_key(view: View) -> u64 {
    match view {
        View::Axial => 0xA1,
        View::Coronal => 0xC0,
        View::Sagittal => 0x5A,
    }
}

/// A view's encoded mask slices paired with image slices.
#[derive(Debug, Clone)]
pub struct ViewSlices {
    pub masks: Vec<Vec<f32>>,
    pub images: Vec<Vec<f32>>,
}

impl ViewSlices {
    pub fn new(view: View, codec: &LabelCodec, pairs: &[(MaskVolume, ImageVolume)]) -> Result<Self> {
        let (mut masks, mut images) = (Vec::new(), Vec::new());
        for (m, i) in pairs {
            if m.dims() != i.dims() {
                return Err(Error::shape(&m.dims(), &i.dims()));
            }
            masks.extend(codec.encode(m)?.slices(view));
            images.extend(i.volume().slices(view));
        }
        Ok(Self { masks, images })
    }
}

#[derive(Debug, Clone)]
pub struct SdmModel {
    pub cfg: SdmConfig,
    pub net: UNet,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
    pub ema: Ema,
    pub seed: u64,
}

impl SdmModel {
    pub fn new(cfg: SdmConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(UNetConfig { in_channels: 2, out_channels: 1, width: cfg.width, cond_inputs: 1, freq_dim: cfg.freq_dim, levels: cfg.levels });
        if !net.supports(cfg.slice_dims()) {
            return Err(Error::Config(format!("{} refiner cannot process slices of {:?}", cfg.view.name(), &cfg.slice_dims()[1..])));
        }
        let params = net.init_params(&mut rng::rng_at(seed, &[0x5D0, view_key(cfg.view)]));
        let adam = Adam::new(cfg.optimizer, params.len());
        let ema = Ema::new(cfg.ema_decay, &params);
        Ok(Self { cfg, net, params, adam, ema, seed })
    }

    pub fn view(&self) -> View {
        self.cfg.view
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Noise prediction for one slice, from the averaged parameters.
    pub fn predict(&self, noisy: &[f32], mask: &[f32], t: usize) -> NoisePrediction {
        let mut x = Vec::with_capacity(2 * noisy.len());
        x.extend_from_slice(noisy);
        x.extend_from_slice(mask);
        NoisePrediction(self.net.infer(&self.ema.shadow, &x, self.cfg.slice_dims(), &[t as f64]))
    }

    pub fn fit_step(&mut self, data: &ViewSlices, batch: usize, sched: &DiffusionSchedule) -> Result<f64> {
        if data.images.is_empty() || batch == 0 {
            return Err(Error::Config("refiner needs training slices and a positive batch".into()));
        }
        let sd = self.cfg.slice_dims();
        let plane = sd[1] * sd[2];
        if let Some(s) = data.images.iter().chain(&data.masks).find(|s| s.len() != plane) {
            return Err(Error::shape(&[plane], &[s.len()]));
        }
        let mut r = rng::rng_at(self.seed, &[0xBA7C, view_key(self.cfg.view), self.step()]);
        let draws: Vec<(usize, usize, u64)> = (0..batch).map(|_| (r.gen_range(0..data.images.len()), r.gen_range(1..=sched.steps()), r.gen())).collect();
        let (net, params) = (&self.net, &self.params);
        let results = crate::par::map(&draws, |&(i, t, seed)| -> Result<(f64, Vec<f32>)> {
            let eps = rng::standard_normal_vec(&mut rng::rng(seed), plane);
            let mut x = q_sample(&data.images[i], t, &eps, sched)?;
            x.extend_from_slice(&data.masks[i]);
            let (out, cache) = net.forward(params, &x, sd, &[t as f64]);
            let (loss, dout) = mse(&out, &eps);
            let mut grad = vec![0.0f32; params.len()];
            net.backward(params, cache, &dout, &mut grad);
            Ok((loss, grad))
        });
        let (loss, grad) = mean_of(results.into_iter().collect::<Result<Vec<_>>>()?);
        self.adam.update(&mut self.params, &grad);
        self.ema.update(&self.params, self.adam.step);
        Ok(loss)
    }

    pub fn to_checkpoint(&self, sched: &DiffusionSchedule, config_hash: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: format!("refiner-{}", self.cfg.view.name()),
                architecture: serde_json::to_value(self.net.config()).expect("serializable"),
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
        let cfg: SdmConfig = serde_json::from_value(ck.header.hyper.clone())?;
        if ck.header.kind != format!("refiner-{}", cfg.view.name()) {
            return Err(Error::Checkpoint(format!("unexpected checkpoint kind {}", ck.header.kind)));
        }
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

/// Train one view's model for `steps` optimizer steps.
pub fn train_sdm(model: &mut SdmModel, data: &ViewSlices, steps: usize, batch: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    (0..steps).map(|_| model.fit_step(data, batch, sched)).collect()
}

/// Closed-form forward diffusion of the whole volume to step `k`.
pub fn renoise(image: &ImageVolume, k: usize, sched: &DiffusionSchedule, rng: &mut Rng) -> Result<Volume<f32>> {
    if k > sched.steps() {
        return Err(Error::Timestep { t: k, max: sched.steps() });
    }
    if k == 0 {
        return Ok(image.volume().clone());
    }
    let eps = rng::standard_normal_vec(rng, image.data().len());
    Volume::new(image.dims(), q_sample(image.data(), k, &eps, sched)?)
}

fn refine_view(model: &SdmModel, image: &ImageVolume, enc_mask: &Volume<f32>, k: usize, sched: &DiffusionSchedule, seed: u64) -> Result<Volume<f32>> {
    let view = model.view();
    let key = view_key(view);
    let noisy = renoise(image, k, sched, &mut rng::rng_at(seed, &[key]))?;
    let slices = noisy.slices(view);
    let masks = enc_mask.slices(view);
    let out = crate::par::map_range(slices.len(), |i| -> Result<Vec<f32>> {
        let mut r = rng::rng_at(seed, &[key, i as u64]);
        let mut x = slices[i].clone();
        for t in (1..=k).rev() {
            let eps = model.predict(&x, &masks[i], t);
            let noise = if t > 1 { rng::standard_normal_vec(&mut r, x.len()) } else { vec![] };
            x = reverse_step(&x, &eps, t, sched, &noise)?;
        }
        Ok(x)
    });
    Volume::from_slices(view, image.dims(), &out.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Refine `image` with one model per view and average the views.
///
/// `models` must hold exactly one model for each of the three views, in any
/// order. Branches draw noise from streams keyed on their view, and the mean
/// is accumulated in axial, coronal, sagittal order, so the result does not
/// depend on the order of `models`.
pub fn refine_volume(
    image: &ImageVolume,
    mask: &MaskVolume,
    models: &[&SdmModel],
    k: usize,
    sched: &DiffusionSchedule,
    codec: &LabelCodec,
    rng: &mut Rng,
) -> Result<ImageVolume> {
    if image.dims() != mask.dims() {
        return Err(Error::shape(&mask.dims(), &image.dims()));
    }
    if k > sched.steps() {
        return Err(Error::Timestep { t: k, max: sched.steps() });
    }
    let mut ordered = Vec::with_capacity(3);
    for view in View::ALL {
        let found: Vec<&&SdmModel> = models.iter().filter(|m| m.view() == view).collect();
        match found.as_slice() {
            [m] => {
                if m.cfg.dims != image.dims() {
                    return Err(Error::shape(&m.cfg.dims, &image.dims()));
                }
                ordered.push(**m);
            }
            [] => return Err(Error::Config(format!("no refiner for the {} view", view.name()))),
            _ => return Err(Error::Config(format!("several refiners for the {} view", view.name()))),
        }
    }
    if models.len() != 3 {
        return Err(Error::Config(format!("expected three refiners, got {}", models.len())));
    }
    let seed: u64 = rng.gen();
    if k == 0 {
        return Ok(image.clone());
    }
    let enc = codec.encode(mask)?;
    let views = crate::par::map(&ordered, |m| refine_view(m, image, &enc, k, sched, seed));
    let views = views.into_iter().collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0f32; image.data().len()];
    for v in &views {
        for (s, x) in sum.iter_mut().zip(v.data()) {
            *s += x;
        }
    }
    let mean = sum.into_iter().map(|s| (s / 3.0).clamp(-1.0, 1.0)).map(|v| if v.is_nan() { 0.0 } else { v });
    ImageVolume::new(Volume::new(image.dims(), mean.collect())?)
}
