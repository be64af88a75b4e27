//! Sequential image generator.
//!
//! Image slice `t` is predicted from the encoded mask slices `t` and `t − 1`
//! and the previously generated image slice `t − 1`. Slice 0 sees zero in
//! both "previous" channels. Training uses teacher forcing on ground-truth
//! pairs with an L1 loss in which each pixel is weighted by the inverse
//! square root of its label's frequency in the slice, so small organs are
//! not drowned out by background.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{label_balance, LabelCodec};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointHeader};
use crate::mcdpm::POSITION_SCALE;
use crate::nn::optim::{mean_of, weighted_l1};
use crate::nn::{auto_levels, Adam, AdamConfig, Network, UNet, UNetConfig};
use crate::rng;
use crate::volume::{ImageVolume, MaskVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqGenConfig {
    pub h: usize,
    pub w: usize,
    pub width: usize,
    pub freq_dim: usize,
    pub levels: usize,
    pub optimizer: AdamConfig,
}

impl SeqGenConfig {
    pub fn new(h: usize, w: usize, width: usize) -> Self {
        Self { h, w, width, freq_dim: 8, levels: auto_levels(h, w, 3), optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() } }
    }
}

/// Training pair: codec-encoded mask and its image.
#[derive(Debug, Clone)]
pub struct SeqPair {
    pub mask: Volume<f32>,
    pub image: ImageVolume,
}

impl SeqPair {
    pub fn new(codec: &LabelCodec, mask: &MaskVolume, image: &ImageVolume) -> Result<Self> {
        if mask.dims() != image.dims() {
            return Err(Error::shape(&mask.dims(), &image.dims()));
        }
        Ok(Self { mask: codec.encode(mask)?, image: image.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct SeqGenModel {
    pub cfg: SeqGenConfig,
    pub net: UNet,
    pub params: Vec<f32>,
    pub adam: Adam<f32>,
    pub seed: u64,
}

impl SeqGenModel {
    pub fn new(cfg: SeqGenConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(UNetConfig { in_channels: 3, out_channels: 1, width: cfg.width, cond_inputs: 1, freq_dim: cfg.freq_dim, levels: cfg.levels });
        if !net.supports([1, cfg.h, cfg.w]) {
            return Err(Error::Config(format!("image generator cannot process {}x{} slices", cfg.h, cfg.w)));
        }
        let params = net.init_params(&mut rng::rng_at(seed, &[0x1A6E]));
        let adam = Adam::new(cfg.optimizer, params.len());
        Ok(Self { cfg, net, params, adam, seed })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn input(mask_t: &[f32], mask_prev: Option<&[f32]>, image_prev: Option<&[f32]>) -> Vec<f32> {
        let p = mask_t.len();
        let mut x = Vec::with_capacity(3 * p);
        x.extend_from_slice(mask_t);
        match mask_prev {
            Some(m) => x.extend_from_slice(m),
            None => x.resize(2 * p, 0.0),
        }
        match image_prev {
            Some(i) => x.extend_from_slice(i),
            None => x.resize(3 * p, 0.0),
        }
        x
    }

    /// Predicted image slice `z` of a `depth`-slice volume.
    pub fn predict_slice(&self, mask_t: &[f32], mask_prev: Option<&[f32]>, image_prev: Option<&[f32]>, z: usize, depth: usize) -> Vec<f32> {
        let x = Self::input(mask_t, mask_prev, image_prev);
        let cond = [z as f64 / depth as f64 * POSITION_SCALE];
        self.net.infer(&self.params, &x, [1, self.cfg.h, self.cfg.w], &cond)
    }

    /// One Adam step on `batch` random (volume, slice) draws keyed on
    /// `(seed, step)`. Returns the mean L1 loss.
    pub fn fit_step(&mut self, pairs: &[SeqPair], batch: usize) -> Result<f64> {
        if pairs.is_empty() || batch == 0 {
            return Err(Error::Config("image generator needs training pairs and a positive batch".into()));
        }
        let [h, w] = [self.cfg.h, self.cfg.w];
        if let Some(p) = pairs.iter().find(|p| p.mask.dims()[1..] != [h, w]) {
            return Err(Error::shape(&[p.mask.depth(), h, w], &p.mask.dims()));
        }
        let mut r = rng::rng_at(self.seed, &[0xBA7C, self.step()]);
        let picks: Vec<(usize, usize)> = (0..batch)
            .map(|_| {
                let i = r.gen_range(0..pairs.len());
                (i, r.gen_range(0..pairs[i].mask.depth()))
            })
            .collect();
        let (net, params) = (&self.net, &self.params);
        let results = crate::par::map(&picks, |&(i, z)| {
            let p = &pairs[i];
            let d = p.mask.depth();
            let prev = (z > 0).then(|| z - 1);
            let x = Self::input(p.mask.axial(z), prev.map(|q| p.mask.axial(q)), prev.map(|q| p.image.volume().axial(q)));
            let cond = [z as f64 / d as f64 * POSITION_SCALE];
            let (out, cache) = net.forward(params, &x, [1, h, w], &cond);
            let (loss, dout) = weighted_l1(&out, p.image.volume().axial(z), &label_balance(p.mask.axial(z)));
            let mut grad = vec![0.0f32; params.len()];
            net.backward(params, cache, &dout, &mut grad);
            (loss, grad)
        });
        let (loss, grad) = mean_of(results);
        self.adam.update(&mut self.params, &grad);
        Ok(loss)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: "image".into(),
                architecture: serde_json::to_value(self.net.config()).expect("serializable"),
                hyper: serde_json::to_value(self.cfg).expect("serializable"),
                schedule: None,
                step: self.step(),
                num_params: self.params.len(),
                optimizer: self.cfg.optimizer,
                seed: self.seed,
                config_hash: config_hash.into(),
                ema_decay: None,
            },
            params: self.params.clone(),
            adam: self.adam.clone(),
            ema: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "image" {
            return Err(Error::Checkpoint(format!("expected an image checkpoint, got {}", ck.header.kind)));
        }
        let cfg: SeqGenConfig = serde_json::from_value(ck.header.hyper.clone())?;
        let mut model = Self::new(cfg, ck.header.seed)?;
        if model.params.len() != ck.params.len() {
            return Err(Error::Checkpoint("parameter count does not match architecture".into()));
        }
        model.params = ck.params.clone();
        model.adam = ck.adam.clone();
        Ok(model)
    }
}

/// Train for `steps` additional optimizer steps; returns the per-step losses.
pub fn train_seq_generator(model: &mut SeqGenModel, pairs: &[SeqPair], steps: usize, batch: usize) -> Result<Vec<f64>> {
    (0..steps).map(|_| model.fit_step(pairs, batch)).collect()
}

/// Generate an image for `mask` slice by slice, feeding back each output.
/// Output intensities are clamped to `[-1, 1]`.
pub fn generate_image_volume(model: &SeqGenModel, codec: &LabelCodec, mask: &MaskVolume) -> Result<ImageVolume> {
    let [d, h, w] = mask.dims();
    if [h, w] != [model.cfg.h, model.cfg.w] {
        return Err(Error::shape(&[d, model.cfg.h, model.cfg.w], &mask.dims()));
    }
    let enc = codec.encode(mask)?;
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(d);
    for z in 0..d {
        let prev_mask = (z > 0).then(|| enc.axial(z - 1));
        let prev_img = planes.last().map(|p| p.as_slice());
        let mut slice = model.predict_slice(enc.axial(z), prev_mask, prev_img, z, d);
        for v in &mut slice {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        }
        planes.push(slice);
    }
    ImageVolume::new(Volume::from_axial(h, w, &planes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn output_is_causal_in_the_mask() {
        let spec = PhantomSpec::default().with_dims([6, 16, 16]);
        let codec = spec.codec();
        let (mask, _) = generate_phantom(&spec, 4).unwrap();
        let model = SeqGenModel::new(SeqGenConfig::new(16, 16, 4), 1).unwrap();
        let a = generate_image_volume(&model, &codec, &mask).unwrap();
        assert!(a.in_range());
        // change the mask only in the last slice: earlier slices must not move
        let mut vox = mask.voxels().clone();
        let last = vox.index(5, 0, 0);
        vox.data_mut()[last..].iter_mut().for_each(|l| *l = 3);
        let b = generate_image_volume(&model, &codec, &MaskVolume::new(vox, mask.label_set().to_vec()).unwrap()).unwrap();
        let plane = 16 * 16;
        assert_eq!(a.data()[..5 * plane], b.data()[..5 * plane]);
        assert_ne!(a.data()[5 * plane..], b.data()[5 * plane..]);
    }

    #[test]
    fn loss_decreases_on_one_pair() {
        let spec = PhantomSpec::default().with_dims([4, 16, 16]);
        let codec = spec.codec();
        let (mask, image) = generate_phantom(&spec, 4).unwrap();
        let pairs = [SeqPair::new(&codec, &mask, &image).unwrap()];
        let mut model = SeqGenModel::new(SeqGenConfig::new(16, 16, 8), 2).unwrap();
        let losses = train_seq_generator(&mut model, &pairs, 60, 2).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.6 * head, "{head} -> {tail}");
        assert!(generate_image_volume(&model, &codec, &MaskVolume::new(Volume::filled([4, 8, 8], 0), vec![0]).unwrap()).is_err());
    }
}
