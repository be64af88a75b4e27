//! Convolutional encoder–decoder with a configurable number of resolution
//! levels.
//!
//! ```text
//! level 0: x ─ conv3 ─(film)─ silu ─ conv3 ─ silu ─────────────── skip ─┐
//! level 1:                             └ pool ─ conv3 ─(film)─ ...      │
//!   ...                                                                 │
//! decode:  up ─ concat(skip) ─ conv3 ─ silu ─ ... ─ conv1 ─ y ◄──────────┘
//! ```
//!
//! Channels double per level up to four times the base width. Scalar
//! conditions are mapped through sinusoidal features and one hidden dense
//! layer, then applied as a per-channel affine modulation `a * (1 + s) + b`
//! on the first conv of every level.

use serde::{Deserialize, Serialize};

use super::layers::{avg_pool2, avg_pool2_backward, silu, silu_backward, sinusoid, upsample2, upsample2_backward, Conv, Dense, Dims, Kernel, ParamBuilder};
use super::network::Network;
use super::real::Real;
use crate::rng::Rng;

fn default_levels() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Number of scalar conditions (0 disables the embedding path).
    pub cond_inputs: usize,
    /// Sinusoidal features per condition.
    pub freq_dim: usize,
    /// Resolution levels; spatial dims must be divisible by `2^(levels-1)`.
    #[serde(default = "default_levels")]
    pub levels: usize,
}

impl UNetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.width << level.min(2)
    }
}

#[derive(Debug, Clone)]
struct Embedding {
    hidden: Dense,
    levels: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    builder: ParamBuilder,
    emb: Option<Embedding>,
    enc: Vec<(Conv, Conv)>,
    dec: Vec<Conv>,
    head: Conv,
}

struct LevelCache<T> {
    cols_a: Vec<T>,
    /// First conv output before and after modulation.
    raw: Vec<T>,
    a1: Vec<T>,
    cols_b: Vec<T>,
    a2: Vec<T>,
}

/// Embedding features, pre-activation, hidden activation and per-level FiLM vectors.
type EmbCache<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<Vec<T>>);

pub struct UNetCache<T> {
    dims: Dims,
    emb: Option<EmbCache<T>>,
    enc: Vec<LevelCache<T>>,
    /// Decoder (cols, pre-activation), indexed by target level.
    dec: Vec<(Vec<T>, Vec<T>)>,
    cols_head: Vec<T>,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Self {
        assert!(cfg.levels >= 1, "a UNet needs at least one level");
        let mut pb = ParamBuilder::new();
        let emb = (cfg.cond_inputs > 0).then(|| {
            let feat = cfg.cond_inputs * cfg.freq_dim;
            let hidden = pb.dense(feat, 2 * cfg.width);
            Embedding { hidden, levels: (0..cfg.levels).map(|l| pb.dense(2 * cfg.width, 2 * cfg.channels(l))).collect() }
        });
        let mut enc = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let a = pb.conv_with_gain(cin, c, Kernel::Square3, 1.4);
            let b = pb.conv_with_gain(c, c, Kernel::Square3, 1.4);
            enc.push((a, b));
            cin = c;
        }
        let dec = (0..cfg.levels - 1).map(|l| pb.conv_with_gain(cfg.channels(l + 1) + cfg.channels(l), cfg.channels(l), Kernel::Square3, 1.4)).collect();
        let head = pb.conv(cfg.width, cfg.out_channels, Kernel::Point);
        Self { cfg, builder: pb, emb, enc, dec, head }
    }

    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    fn level_dims(dims: Dims, l: usize) -> Dims {
        [1, dims[1] >> l, dims[2] >> l]
    }

    #[allow(clippy::type_complexity)]
    fn embed<T: Real>(&self, p: &[T], cond: &[f64]) -> Option<EmbCache<T>> {
        let e = self.emb.as_ref()?;
        assert_eq!(cond.len(), self.cfg.cond_inputs, "condition count");
        let feat = sinusoid::<T>(cond, self.cfg.freq_dim);
        let pre = e.hidden.forward(p, &feat);
        let h = silu(&pre);
        let film = e.levels.iter().map(|d| d.forward(p, &h)).collect();
        Some((feat, pre, h, film))
    }

    fn run<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64], keep: bool) -> (Vec<T>, Option<UNetCache<T>>) {
        assert!(self.supports(dims), "unsupported dims {dims:?}");
        let levels = self.cfg.levels;
        let emb = self.embed(p, cond);

        let mut enc_cache = Vec::with_capacity(levels);
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(levels);
        let mut input = x.to_vec();
        for (l, (ca, cb)) in self.enc.iter().enumerate() {
            let ld = Self::level_dims(dims, l);
            if l > 0 {
                let prev = Self::level_dims(dims, l - 1);
                input = avg_pool2(&skips[l - 1], self.cfg.channels(l - 1), prev[1], prev[2]);
            }
            let (raw, cols_a) = ca.forward(p, &input, ld);
            let a1 = match &emb {
                Some((.., film)) => modulate(&raw, &film[l]),
                None => raw.clone(),
            };
            let (a2, cols_b) = cb.forward(p, &silu(&a1), ld);
            skips.push(silu(&a2));
            if keep {
                enc_cache.push(LevelCache { cols_a, raw, a1, cols_b, a2 });
            }
        }

        let mut dec_cache: Vec<(Vec<T>, Vec<T>)> = Vec::new();
        let mut up = skips.pop().expect("at least one level");
        for l in (0..levels - 1).rev() {
            let below = Self::level_dims(dims, l + 1);
            let mut cat = upsample2(&up, self.cfg.channels(l + 1), below[1], below[2]);
            cat.extend_from_slice(&skips[l]);
            let (a, cols) = self.dec[l].forward(p, &cat, Self::level_dims(dims, l));
            up = silu(&a);
            if keep {
                dec_cache.push((cols, a));
            }
        }
        dec_cache.reverse();
        let (y, cols_head) = self.head.forward(p, &up, dims);
        let cache = keep.then_some(UNetCache { dims, emb, enc: enc_cache, dec: dec_cache, cols_head });
        (y, cache)
    }
}

impl Network for UNet {
    type Cache<T: Real> = UNetCache<T>;

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    fn cond_inputs(&self) -> usize {
        self.cfg.cond_inputs
    }

    fn num_params(&self) -> usize {
        self.builder.len()
    }

    fn init_params<T: Real>(&self, rng: &mut Rng) -> Vec<T> {
        self.builder.init(rng)
    }

    fn supports(&self, dims: Dims) -> bool {
        let f = 1usize << (self.cfg.levels - 1);
        dims[0] == 1 && dims[1] > 0 && dims[2] > 0 && dims[1].is_multiple_of(f) && dims[2].is_multiple_of(f)
    }

    fn forward<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64]) -> (Vec<T>, UNetCache<T>) {
        let (y, c) = self.run(p, x, dims, cond, true);
        (y, c.expect("cache kept"))
    }

    fn infer<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64]) -> Vec<T> {
        self.run(p, x, dims, cond, false).0
    }

    fn backward<T: Real>(&self, p: &[T], c: UNetCache<T>, dout: &[T], grad: &mut [T]) {
        let levels = self.cfg.levels;
        let dims = c.dims;
        let cfg = self.cfg;

        let mut dup = self.head.backward(p, &c.cols_head, dout, dims, grad, true).unwrap();
        // gradients w.r.t. each level's skip output, filled as the decoder unwinds
        let mut dskip: Vec<Option<Vec<T>>> = (0..levels).map(|_| None).collect();
        #[allow(clippy::needless_range_loop)]
        for l in 0..levels - 1 {
            let (cols, a) = &c.dec[l];
            let da = silu_backward(a, &dup);
            let dcat = self.dec[l].backward(p, cols, &da, Self::level_dims(dims, l), grad, true).unwrap();
            let below = Self::level_dims(dims, l + 1);
            let n_up = cfg.channels(l + 1) * below[1] * below[2] * 4;
            let (du, ds) = dcat.split_at(n_up);
            dskip[l] = Some(ds.to_vec());
            dup = upsample2_backward(du, cfg.channels(l + 1), below[1], below[2]);
        }
        dskip[levels - 1] = Some(dup);

        let mut db: Vec<Vec<T>> = vec![Vec::new(); levels];
        let mut carry: Option<Vec<T>> = None;
        for l in (0..levels).rev() {
            let ld = Self::level_dims(dims, l);
            let mut ds = dskip[l].take().unwrap();
            if let Some(dpool) = carry.take() {
                let pooled_back = avg_pool2_backward(&dpool, cfg.channels(l), ld[1], ld[2]);
                ds.iter_mut().zip(pooled_back).for_each(|(a, b)| *a += b);
            }
            let lc = &c.enc[l];
            let da2 = silu_backward(&lc.a2, &ds);
            let (ca, cb) = &self.enc[l];
            let ds1 = cb.backward(p, &lc.cols_b, &da2, ld, grad, true).unwrap();
            let mut da1 = silu_backward(&lc.a1, &ds1);
            if let Some((.., film)) = &c.emb {
                let ch = cfg.channels(l);
                let n = da1.len() / ch;
                let mut dfilm = vec![T::zero(); 2 * ch];
                for (k, (g, x)) in da1.chunks_mut(n).zip(lc.raw.chunks(n)).enumerate() {
                    dfilm[k] = g.iter().zip(x).map(|(&a, &b)| a * b).sum();
                    dfilm[ch + k] = g.iter().copied().sum();
                    let gain = T::one() + film[l][k];
                    g.iter_mut().for_each(|v| *v *= gain);
                }
                db[l] = dfilm;
            }
            carry = ca.backward(p, &lc.cols_a, &da1, ld, grad, l > 0);
        }

        if let (Some(e), Some((feat, pre, hid, _))) = (&self.emb, &c.emb) {
            let mut dh = vec![T::zero(); hid.len()];
            for (d, b) in e.levels.iter().zip(&db) {
                let g = d.backward(p, hid, b, grad);
                dh.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
            }
            let dpre = silu_backward(pre, &dh);
            e.hidden.backward(p, feat, &dpre, grad);
        }
    }
}

/// `x * (1 + s) + b` per channel, with `film = [s; b]`.
fn modulate<T: Real>(x: &[T], film: &[T]) -> Vec<T> {
    let ch = film.len() / 2;
    let n = x.len() / ch;
    let mut y = x.to_vec();
    for (k, row) in y.chunks_mut(n).enumerate() {
        let (gain, bias) = (T::one() + film[k], film[ch + k]);
        row.iter_mut().for_each(|v| *v = *v * gain + bias);
    }
    y
}

/// Deepest level count up to `max` whose coarsest grid is at least 4 pixels
/// on each side and divides `h x w` evenly.
pub fn auto_levels(h: usize, w: usize, max: usize) -> usize {
    (1..=max.max(1))
        .rev()
        .find(|&l| {
            let f = 1 << (l - 1);
            h.is_multiple_of(f) && w.is_multiple_of(f) && (l == 1 || (h / f >= 4 && w / f >= 4))
        })
        .unwrap_or(1)
}
