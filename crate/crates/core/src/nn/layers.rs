//! Layers over flat parameter vectors.
//!
//! A layer stores only its shape and the offsets of its weights inside the
//! model's single parameter buffer. Forward passes read from `&[T]`; backward
//! passes accumulate into a gradient buffer with the same layout. Feature maps
//! are channel-major `C x D x H x W` with `D = 1` for 2-D maps.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::real::{gemm, Real};
use crate::rng::Rng;

/// Spatial extent of a feature map, `[depth, height, width]`.
pub type Dims = [usize; 3];

pub fn numel(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// 1x1(x1) pointwise.
    Point,
    /// 3x3 in-plane, same padding.
    Square3,
    /// 3x3x3, same padding.
    Cube3,
}

impl Kernel {
    fn taps(self) -> Vec<[isize; 3]> {
        match self {
            Kernel::Point => vec![[0, 0, 0]],
            Kernel::Square3 => (-1..=1).flat_map(|y| (-1..=1).map(move |x| [0, y, x])).collect(),
            Kernel::Cube3 => (-1..=1).flat_map(|z| (-1..=1).flat_map(move |y| (-1..=1).map(move |x| [z, y, x]))).collect(),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Kernel::Point => 1,
            Kernel::Square3 => 9,
            Kernel::Cube3 => 27,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan {
        fan_in: usize,
        gain: f64,
    },
    Zero,
}

/// Allocates parameter ranges and remembers how to initialise them.
#[derive(Debug, Default, Clone)]
pub struct ParamBuilder {
    len: usize,
    inits: Vec<(usize, usize, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&mut self, n: usize, init: Init) -> usize {
        let off = self.len;
        self.inits.push((off, n, init));
        self.len += n;
        off
    }

    pub fn conv(&mut self, cin: usize, cout: usize, kernel: Kernel) -> Conv {
        self.conv_with_gain(cin, cout, kernel, 1.0)
    }

    pub fn conv_with_gain(&mut self, cin: usize, cout: usize, kernel: Kernel, gain: f64) -> Conv {
        let fan_in = cin * kernel.size();
        let w_off = self.alloc(cout * fan_in, Init::Fan { fan_in, gain });
        let b_off = self.alloc(cout, Init::Zero);
        Conv { cin, cout, kernel, w_off, b_off }
    }

    pub fn dense(&mut self, inp: usize, out: usize) -> Dense {
        let w_off = self.alloc(out * inp, Init::Fan { fan_in: inp, gain: 1.0 });
        let b_off = self.alloc(out, Init::Zero);
        Dense { inp, out, w_off, b_off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn init<T: Real>(&self, rng: &mut Rng) -> Vec<T> {
        let mut p = vec![T::zero(); self.len];
        for &(off, n, init) in &self.inits {
            if let Init::Fan { fan_in, gain } = init {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                for v in &mut p[off..off + n] {
                    *v = T::lit(dist.sample(rng));
                }
            }
        }
        p
    }
}

/// Convolution with stride 1 and same padding, via im2col + gemm.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: Kernel,
    w_off: usize,
    b_off: usize,
}

impl Conv {
    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.w_off..self.w_off + self.cout * self.cin * self.kernel.size()]
    }

    /// Returns the output map and the column buffer needed by [`Conv::backward`].
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], dims: Dims) -> (Vec<T>, Vec<T>) {
        let n = numel(dims);
        assert_eq!(x.len(), self.cin * n, "conv input size");
        let cols = if self.kernel == Kernel::Point { x.to_vec() } else { im2col(x, self.cin, dims, self.kernel) };
        let y = self.apply(p, &cols, n);
        (y, cols)
    }

    /// Forward pass without keeping the column buffer.
    pub fn infer<T: Real>(&self, p: &[T], x: &[T], dims: Dims) -> Vec<T> {
        let n = numel(dims);
        assert_eq!(x.len(), self.cin * n, "conv input size");
        if self.kernel == Kernel::Point {
            self.apply(p, x, n)
        } else {
            self.apply(p, &im2col(x, self.cin, dims, self.kernel), n)
        }
    }

    fn apply<T: Real>(&self, p: &[T], cols: &[T], n: usize) -> Vec<T> {
        let k = self.cin * self.kernel.size();
        let mut y = vec![T::zero(); self.cout * n];
        for (c, row) in y.chunks_mut(n).enumerate() {
            row.fill(p[self.b_off + c]);
        }
        gemm(self.cout, k, n, self.weights(p), false, cols, false, &mut y, true);
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient when
    /// `need_dx`.
    pub fn backward<T: Real>(&self, p: &[T], cols: &[T], dy: &[T], dims: Dims, grad: &mut [T], need_dx: bool) -> Option<Vec<T>> {
        let n = numel(dims);
        let k = self.cin * self.kernel.size();
        assert_eq!(dy.len(), self.cout * n, "conv output grad size");
        {
            let gw = &mut grad[self.w_off..self.w_off + self.cout * k];
            gemm(self.cout, n, k, dy, false, cols, true, gw, true);
        }
        for (c, row) in dy.chunks(n).enumerate() {
            grad[self.b_off + c] += row.iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * n];
        gemm(k, self.cout, n, self.weights(p), true, dy, false, &mut dcols, false);
        if self.kernel == Kernel::Point {
            Some(dcols)
        } else {
            Some(col2im(&dcols, self.cin, dims, self.kernel))
        }
    }
}

/// Copy `src[i + shift]` into `dst[i]`, zero where out of range.
fn shifted_copy<T: Real>(dst: &mut [T], src: &[T], shift: isize) {
    let w = dst.len() as isize;
    for (i, d) in dst.iter_mut().enumerate() {
        let s = i as isize + shift;
        *d = if s >= 0 && s < w { src[s as usize] } else { T::zero() };
    }
}

fn shifted_add<T: Real>(dst: &mut [T], src: &[T], shift: isize) {
    // inverse of shifted_copy: dst[i + shift] += src[i]
    let w = dst.len() as isize;
    for (i, &s) in src.iter().enumerate() {
        let j = i as isize + shift;
        if j >= 0 && j < w {
            dst[j as usize] += s;
        }
    }
}

fn im2col<T: Real>(x: &[T], cin: usize, dims: Dims, kernel: Kernel) -> Vec<T> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let taps = kernel.taps();
    let mut cols = vec![T::zero(); cin * taps.len() * n];
    for c in 0..cin {
        let plane = &x[c * n..(c + 1) * n];
        for (ti, &[dz, dy, dx]) in taps.iter().enumerate() {
            let row = &mut cols[(c * taps.len() + ti) * n..][..n];
            for z in 0..d {
                let sz = z as isize + dz;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[(z * h + y) * w..][..w];
                    if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[(sz as usize * h + sy as usize) * w..][..w];
                    shifted_copy(dst, src, dx);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], cin: usize, dims: Dims, kernel: Kernel) -> Vec<T> {
    let [d, h, w] = dims;
    let n = d * h * w;
    let taps = kernel.taps();
    let mut x = vec![T::zero(); cin * n];
    for c in 0..cin {
        let plane = &mut x[c * n..(c + 1) * n];
        for (ti, &[dz, dy, dx]) in taps.iter().enumerate() {
            let row = &cols[(c * taps.len() + ti) * n..][..n];
            for z in 0..d {
                let sz = z as isize + dz;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[(z * h + y) * w..][..w];
                    let dst = &mut plane[(sz as usize * h + sy as usize) * w..][..w];
                    shifted_add(dst, src, dx);
                }
            }
        }
    }
    x
}

/// Fully connected layer on a single vector.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    w_off: usize,
    b_off: usize,
}

impl Dense {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.inp);
        let w = &p[self.w_off..self.w_off + self.inp * self.out];
        (0..self.out)
            .map(|o| {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                p[self.b_off + o] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect()
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &[T], dy: &[T], grad: &mut [T]) -> Vec<T> {
        let w = &p[self.w_off..self.w_off + self.inp * self.out];
        let mut dx = vec![T::zero(); self.inp];
        for o in 0..self.out {
            let g = dy[o];
            grad[self.b_off + o] += g;
            let gw = &mut grad[self.w_off + o * self.inp..self.w_off + (o + 1) * self.inp];
            for i in 0..self.inp {
                gw[i] += g * x[i];
                dx[i] += g * w[o * self.inp + i];
            }
        }
        dx
    }
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v / (T::one() + (-v).exp())).collect()
}

/// `dx = dy * silu'(a)` where `a` is the pre-activation.
pub fn silu_backward<T: Real>(a: &[T], dy: &[T]) -> Vec<T> {
    a.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = T::one() / (T::one() + (-v).exp());
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Add `bias[c]` to every element of channel `c`.
pub fn add_channel_bias<T: Real>(x: &mut [T], bias: &[T]) {
    let n = x.len() / bias.len();
    for (row, &b) in x.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

pub fn channel_sums<T: Real>(x: &[T], channels: usize) -> Vec<T> {
    let n = x.len() / channels;
    x.chunks(n).map(|r| r.iter().copied().sum()).collect()
}

/// 2x2 average pooling of a `C x H x W` map (H, W even).
pub fn avg_pool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut y = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        let src = &x[ch * h * w..];
        let dst = &mut y[ch * h2 * w2..];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * w2 + j] = (a + b) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                dx[ch * h * w + y * w + x] = dy[ch * h2 * w2 + (y / 2) * w2 + x / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of a `C x H x W` map.
pub fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                y[ch * h2 * w2 + yy * w2 + xx] = x[ch * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dx[ch * h * w + (yy / 2) * w + xx / 2] += dy[ch * h2 * w2 + yy * w2 + xx];
            }
        }
    }
    dx
}

/// Sinusoidal features of each scalar, `dim` per scalar (half sin, half cos).
pub fn sinusoid<T: Real>(values: &[f64], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp()).collect();
        out.extend(freqs.iter().map(|f| T::lit((v * f).sin())));
        out.extend(freqs.iter().map(|f| T::lit((v * f).cos())));
        if dim % 2 == 1 {
            out.push(T::lit(v));
        }
    }
    out
}

/// Uniform draw helper kept here so layer tests need no extra imports.
pub fn uniform_vec<T: Real>(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect()
}
