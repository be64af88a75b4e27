//! Small fully 3-D segmenter: two 3x3x3 conv blocks and a pointwise head.

use serde::{Deserialize, Serialize};

use super::layers::{silu, silu_backward, Conv, Dims, Kernel, ParamBuilder};
use super::network::Network;
use super::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seg3dConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Seg3d {
    cfg: Seg3dConfig,
    builder: ParamBuilder,
    a: Conv,
    b: Conv,
    head: Conv,
}

pub struct Seg3dCache<T> {
    dims: Dims,
    cols_a: Vec<T>,
    a1: Vec<T>,
    cols_b: Vec<T>,
    a2: Vec<T>,
    cols_head: Vec<T>,
}

impl Seg3d {
    pub fn new(cfg: Seg3dConfig) -> Self {
        let mut pb = ParamBuilder::new();
        let a = pb.conv_with_gain(cfg.in_channels, cfg.width, Kernel::Cube3, 1.4);
        let b = pb.conv_with_gain(cfg.width, cfg.width, Kernel::Cube3, 1.4);
        let head = pb.conv(cfg.width, cfg.classes, Kernel::Point);
        Self { cfg, builder: pb, a, b, head }
    }
}

impl Network for Seg3d {
    type Cache<T: Real> = Seg3dCache<T>;

    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }

    fn out_channels(&self) -> usize {
        self.cfg.classes
    }

    fn cond_inputs(&self) -> usize {
        0
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

    fn forward<T: Real>(&self, p: &[T], x: &[T], dims: Dims, _cond: &[f64]) -> (Vec<T>, Seg3dCache<T>) {
        let (a1, cols_a) = self.a.forward(p, x, dims);
        let (a2, cols_b) = self.b.forward(p, &silu(&a1), dims);
        let (y, cols_head) = self.head.forward(p, &silu(&a2), dims);
        (y, Seg3dCache { dims, cols_a, a1, cols_b, a2, cols_head })
    }

    fn infer<T: Real>(&self, p: &[T], x: &[T], dims: Dims, _cond: &[f64]) -> Vec<T> {
        let a1 = self.a.infer(p, x, dims);
        let a2 = self.b.infer(p, &silu(&a1), dims);
        self.head.infer(p, &silu(&a2), dims)
    }

    fn backward<T: Real>(&self, p: &[T], c: Seg3dCache<T>, dout: &[T], grad: &mut [T]) {
        let ds2 = self.head.backward(p, &c.cols_head, dout, c.dims, grad, true).unwrap();
        let da2 = silu_backward(&c.a2, &ds2);
        let ds1 = self.b.backward(p, &c.cols_b, &da2, c.dims, grad, true).unwrap();
        let da1 = silu_backward(&c.a1, &ds1);
        self.a.backward(p, &c.cols_a, &da1, c.dims, grad, false);
    }
}
