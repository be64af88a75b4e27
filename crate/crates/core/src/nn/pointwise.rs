//! A tiny per-pixel network: `conv1 -> (+emb) -> silu -> conv1`. Small
//! enough (tens of parameters) for exhaustive finite-difference checks while
//! exercising the same layers as the production networks.

use serde::{Deserialize, Serialize};

use super::layers::{add_channel_bias, channel_sums, silu, silu_backward, sinusoid, Conv, Dense, Dims, Kernel, ParamBuilder};
use super::network::Network;
use super::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwiseConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub cond_inputs: usize,
    pub freq_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PointwiseNet {
    cfg: PointwiseConfig,
    builder: ParamBuilder,
    emb: Option<Dense>,
    inner: Conv,
    outer: Conv,
}

pub struct PointwiseCache<T> {
    dims: Dims,
    feat: Option<Vec<T>>,
    cols_in: Vec<T>,
    a: Vec<T>,
    cols_out: Vec<T>,
}

impl PointwiseNet {
    pub fn new(cfg: PointwiseConfig) -> Self {
        let mut pb = ParamBuilder::new();
        let emb = (cfg.cond_inputs > 0).then(|| pb.dense(cfg.cond_inputs * cfg.freq_dim, cfg.hidden));
        let inner = pb.conv(cfg.in_channels, cfg.hidden, Kernel::Point);
        let outer = pb.conv(cfg.hidden, cfg.out_channels, Kernel::Point);
        Self { cfg, builder: pb, emb, inner, outer }
    }
}

impl Network for PointwiseNet {
    type Cache<T: Real> = PointwiseCache<T>;

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
        dims.iter().all(|&d| d > 0)
    }

    fn forward<T: Real>(&self, p: &[T], x: &[T], dims: Dims, cond: &[f64]) -> (Vec<T>, PointwiseCache<T>) {
        let (mut a, cols_in) = self.inner.forward(p, x, dims);
        let feat = self.emb.as_ref().map(|e| {
            let f = sinusoid::<T>(cond, self.cfg.freq_dim);
            add_channel_bias(&mut a, &e.forward(p, &f));
            f
        });
        let s = silu(&a);
        let (y, cols_out) = self.outer.forward(p, &s, dims);
        (y, PointwiseCache { dims, feat, cols_in, a, cols_out })
    }

    fn backward<T: Real>(&self, p: &[T], c: PointwiseCache<T>, dout: &[T], grad: &mut [T]) {
        let ds = self.outer.backward(p, &c.cols_out, dout, c.dims, grad, true).unwrap();
        let da = silu_backward(&c.a, &ds);
        self.inner.backward(p, &c.cols_in, &da, c.dims, grad, false);
        if let (Some(e), Some(f)) = (&self.emb, &c.feat) {
            e.backward(p, f, &channel_sums(&da, self.cfg.hidden), grad);
        }
    }
}
