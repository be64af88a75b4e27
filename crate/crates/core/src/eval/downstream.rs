//! Toy downstream segmentation study: train small segmenters on real,
//! synthetic, or mixed pairs and score them on a held-out test set.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::pair_checksum;
use crate::nn::optim::{argmax_channels, mean_of, softmax_xent};
use crate::nn::{Adam, AdamConfig, Dims, Network, Seg3d, Seg3dConfig, UNet, UNetConfig};
use crate::rng;
use crate::volume::{ImageVolume, MaskVolume, Volume};

use super::metrics::per_label_dice;

pub type Pair = (MaskVolume, ImageVolume);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    RealOnly,
    SynthOnly,
    RealPlusSynth,
    SynthPretrainRealFinetune,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::RealOnly, Strategy::SynthOnly, Strategy::RealPlusSynth, Strategy::SynthPretrainRealFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RealOnly => "real-only",
            Strategy::SynthOnly => "synth-only",
            Strategy::RealPlusSynth => "real+synth",
            Strategy::SynthPretrainRealFinetune => "synth-pretrain>real-finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Segmenter {
    /// Slice-wise 2-D encoder-decoder over axial slices.
    Unet2d,
    /// Fully 3-D convolutional segmenter trained on random crops.
    Conv3d,
}

impl Segmenter {
    pub const ALL: [Segmenter; 2] = [Segmenter::Unet2d, Segmenter::Conv3d];

    pub fn name(self) -> &'static str {
        match self {
            Segmenter::Unet2d => "unet-2d",
            Segmenter::Conv3d => "conv-3d",
        }
    }

    fn key(self) -> u64 {
        match self {
            Segmenter::Unet2d => 2,
            Segmenter::Conv3d => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    /// Optimizer steps per training phase.
    pub steps: usize,
    pub batch: usize,
    pub width: usize,
    /// Resolution levels of the 2-D segmenter.
    pub levels: usize,
    /// Crop used by the 3-D segmenter during training.
    pub crop: [usize; 3],
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self { steps: 150, batch: 4, width: 8, levels: 2, crop: [8, 32, 32], optimizer: AdamConfig { lr: 5e-3, ..AdamConfig::default() }, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub strategy: Strategy,
    pub segmenter: Segmenter,
    /// Test Dice per non-background label; `None` when absent from every
    /// test volume and every prediction.
    pub dice: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamTable {
    pub labels: Vec<u8>,
    pub rows: Vec<DownstreamRow>,
}

impl DownstreamTable {
    pub fn row(&self, strategy: Strategy, segmenter: Segmenter) -> Option<&DownstreamRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.segmenter == segmenter)
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("   -  ".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("{:<30}{:<10}", "strategy", "model");
        for l in &self.labels {
            s += &format!("{:>8}", format!("L{l}"));
        }
        s += &format!("{:>8}\n", "mean");
        for r in &self.rows {
            s += &format!("{:<30}{:<10}", r.strategy.name(), r.segmenter.name());
            for d in &r.dice {
                s += &format!("{:>8}", fmt(*d));
            }
            s += &format!("{:>8}\n", fmt(r.mean));
        }
        s
    }
}

struct Sample<'a> {
    image: &'a Volume<f32>,
    labels: &'a Volume<u8>,
}

fn crop(v: &Volume<f32>, l: &Volume<u8>, origin: [usize; 3], size: Dims) -> (Vec<f32>, Vec<usize>) {
    let (mut x, mut y) = (Vec::with_capacity(size.iter().product()), Vec::with_capacity(size.iter().product()));
    for z in 0..size[0] {
        for r in 0..size[1] {
            let i = v.index(origin[0] + z, origin[1] + r, origin[2]);
            x.extend_from_slice(&v.data()[i..i + size[2]]);
            y.extend(l.data()[i..i + size[2]].iter().map(|&c| c as usize));
        }
    }
    (x, y)
}

struct Trainer<N: Network> {
    net: N,
    params: Vec<f32>,
    classes: usize,
    patch: Dims,
    cfg: DownstreamConfig,
}

impl<N: Network> Trainer<N> {
    fn phase(&mut self, data: &[Sample], key: u64) {
        let mut adam = Adam::new(self.cfg.optimizer, self.params.len());
        for step in 0..self.cfg.steps {
            let mut r = rng::rng_at(self.cfg.seed, &[0xD0, key, step as u64]);
            let picks: Vec<(usize, [usize; 3])> = (0..self.cfg.batch)
                .map(|_| {
                    let i = r.gen_range(0..data.len());
                    let d = data[i].image.dims();
                    (i, [0, 1, 2].map(|a| r.gen_range(0..=d[a] - self.patch[a])))
                })
                .collect();
            let (net, params, patch, classes) = (&self.net, &self.params, self.patch, self.classes);
            let results = crate::par::map(&picks, |&(i, o)| {
                let (x, y) = crop(data[i].image, data[i].labels, o, patch);
                let (logits, cache) = net.forward(params, &x, patch, &[]);
                let (loss, dl) = softmax_xent(&logits, &y, classes);
                let mut grad = vec![0.0f32; params.len()];
                net.backward(params, cache, &dl, &mut grad);
                (loss, grad)
            });
            let (_, grad) = mean_of(results);
            adam.update(&mut self.params, &grad);
        }
    }

    fn predict(&self, image: &Volume<f32>, slicewise: bool) -> Result<Volume<u8>> {
        let [d, h, w] = image.dims();
        let labels: Vec<u8> = if slicewise {
            let planes = crate::par::map_range(d, |z| {
                let logits = self.net.infer(&self.params, image.axial(z), [1, h, w], &[]);
                argmax_channels(&logits, self.classes)
            });
            planes.into_iter().flatten().map(|c| c as u8).collect()
        } else {
            let logits = self.net.infer(&self.params, image.data(), [d, h, w], &[]);
            argmax_channels(&logits, self.classes).into_iter().map(|c| c as u8).collect()
        };
        Volume::new([d, h, w], labels)
    }
}

fn check_pairs(name: &str, pairs: &[Pair], dims: [usize; 3], classes: usize) -> Result<()> {
    for (m, i) in pairs {
        if m.dims() != dims || i.dims() != dims {
            return Err(Error::shape(&dims, &m.dims()));
        }
        if let Some(&l) = m.voxels().data().iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Eval(format!("{name} set holds label {l} outside 0..{classes}")));
        }
    }
    Ok(())
}

/// Train every (strategy, segmenter) combination and score on `test`.
///
/// All combinations share the configured seed, so two strategies that see
/// identical training data produce identical scores. Test pairs whose
/// content checksum matches any training pair are rejected.
pub fn downstream_study(
    real: &[Pair],
    synth: &[Pair],
    test: &[Pair],
    classes: usize,
    strategies: &[Strategy],
    segmenters: &[Segmenter],
    cfg: &DownstreamConfig,
) -> Result<DownstreamTable> {
    if test.is_empty() {
        return Err(Error::Eval("downstream study needs a test set".into()));
    }
    let dims = test[0].0.dims();
    check_pairs("real", real, dims, classes)?;
    check_pairs("synthetic", synth, dims, classes)?;
    check_pairs("test", test, dims, classes)?;
    let train_sums: HashSet<String> = real.iter().chain(synth).map(|(m, i)| pair_checksum(m, i)).collect();
    if test.iter().any(|(m, i)| train_sums.contains(&pair_checksum(m, i))) {
        return Err(Error::Eval("test set overlaps the training data".into()));
    }
    for &s in strategies {
        let needs_real = s != Strategy::SynthOnly;
        let needs_synth = s != Strategy::RealOnly;
        if (needs_real && real.is_empty()) || (needs_synth && synth.is_empty()) {
            return Err(Error::Eval(format!("strategy {} lacks training data", s.name())));
        }
    }
    if cfg.crop.iter().zip(dims).any(|(&c, d)| c == 0 || c > d) {
        return Err(Error::Config(format!("crop {:?} does not fit volumes of {dims:?}", cfg.crop)));
    }

    let (real_s, synth_s) = (samples(real), samples(synth));
    let both: Vec<Sample> = samples(real).into_iter().chain(samples(synth)).collect();
    let labels: Vec<u8> = (1..classes as u8).collect();

    let mut rows = Vec::new();
    for &seg in segmenters {
        for &strategy in strategies {
            let phases: Vec<(&[Sample], u64)> = match strategy {
                Strategy::RealOnly => vec![(&real_s, 0)],
                Strategy::SynthOnly => vec![(&synth_s, 0)],
                Strategy::RealPlusSynth => vec![(&both, 0)],
                Strategy::SynthPretrainRealFinetune => vec![(&synth_s, 1), (&real_s, 0)],
            };
            let predicted: Vec<Volume<u8>> = match seg {
                Segmenter::Unet2d => {
                    let net =
                        UNet::new(UNetConfig { in_channels: 1, out_channels: classes, width: cfg.width, cond_inputs: 0, freq_dim: 0, levels: cfg.levels });
                    run(net, [1, dims[1], dims[2]], classes, cfg, seg, &phases, test, true)?
                }
                Segmenter::Conv3d => {
                    let net = Seg3d::new(Seg3dConfig { in_channels: 1, classes, width: cfg.width });
                    run(net, cfg.crop, classes, cfg, seg, &phases, test, false)?
                }
            };
            let mut sums = vec![(0.0, 0usize); labels.len()];
            for (p, (m, _)) in predicted.into_iter().zip(test) {
                let pm = MaskVolume::new(p, (0..classes as u8).collect())?;
                for (l, d) in per_label_dice(&pm, m) {
                    if let (Some(d), Some(k)) = (d, labels.iter().position(|&x| x == l)) {
                        sums[k].0 += d;
                        sums[k].1 += 1;
                    }
                }
            }
            let dice: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
            let present: Vec<f64> = dice.iter().flatten().copied().collect();
            let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            rows.push(DownstreamRow { strategy, segmenter: seg, dice, mean });
        }
    }
    Ok(DownstreamTable { labels, rows })
}

fn samples(pairs: &[Pair]) -> Vec<Sample<'_>> {
    pairs.iter().map(|(m, i)| Sample { image: i.volume(), labels: m.voxels() }).collect()
}

#[allow(clippy::too_many_arguments)]
fn run<N: Network>(
    net: N,
    patch: Dims,
    classes: usize,
    cfg: &DownstreamConfig,
    seg: Segmenter,
    phases: &[(&[Sample], u64)],
    test: &[Pair],
    slicewise: bool,
) -> Result<Vec<Volume<u8>>> {
    let params = net.init_params(&mut rng::rng_at(cfg.seed, &[0x5E6, seg.key()]));
    let mut t = Trainer { net, params, classes, patch, cfg: *cfg };
    for &(data, phase) in phases {
        t.phase(data, seg.key() << 8 | phase);
    }
    test.iter().map(|(_, i)| t.predict(i.volume(), slicewise)).collect()
}
