use serde::{Deserialize, Serialize};

use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self { cfg, step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), grad.len());
        self.step += 1;
        let norm = grad.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.cfg.lr * bc2.sqrt() / bc1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(self.cfg.eps * bc2.sqrt());
        let sc = T::lit(scale);
        for i in 0..params.len() {
            let g = grad[i] * sc;
            self.m[i] = b1t * self.m[i] + (T::one() - b1t) * g;
            self.v[i] = b2t * self.v[i] + (T::one() - b2t) * g * g;
            params[i] -= lr * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Exponential moving average of parameters. The decay applied at optimizer
/// step `s` is `min(decay, (1 + s) / (10 + s))`, so early averages are not
/// dominated by the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f32>,
}

impl Ema {
    pub fn new(decay: f64, params: &[f32]) -> Self {
        Self { decay, shadow: params.to_vec() }
    }

    pub fn update(&mut self, params: &[f32], step: u64) {
        assert_eq!(params.len(), self.shadow.len());
        let s = step as f64;
        let d = self.decay.min((1.0 + s) / (10.0 + s)) as f32;
        for (e, &p) in self.shadow.iter_mut().zip(params) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse<T: Real>(pred: &[T], target: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    let n = T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.to_f64().unwrap().powi(2);
            two * d / n
        })
        .collect();
    (loss / pred.len() as f64, grad)
}

/// Weighted mean absolute error `Σ w·|p − t| / n` and its gradient.
pub fn weighted_l1<T: Real>(pred: &[T], target: &[T], weights: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    assert_eq!(pred.len(), weights.len());
    let n = T::lit(pred.len() as f64);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &t), &w)| {
            let d = p - t;
            loss += (w * d.abs()).to_f64().unwrap();
            if d > T::zero() {
                w / n
            } else if d < T::zero() {
                -w / n
            } else {
                T::zero()
            }
        })
        .collect();
    (loss / pred.len() as f64, grad)
}

/// Mean absolute error and its (sub)gradient.
pub fn l1<T: Real>(pred: &[T], target: &[T]) -> (f64, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    let n = T::lit(pred.len() as f64);
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d.abs().to_f64().unwrap();
            if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            }
        })
        .collect();
    (loss / pred.len() as f64, grad)
}

/// Mean softmax cross-entropy over pixels of channel-major logits
/// (`classes x n`).
pub fn softmax_xent<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    assert_eq!(logits.len(), classes * n);
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for (i, &lab) in labels.iter().enumerate() {
        let mx = (0..classes).map(|c| logits[c * n + i].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..classes).map(|c| (logits[c * n + i].to_f64().unwrap() - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + mx - logits[lab * n + i].to_f64().unwrap();
        for c in 0..classes {
            let pr = exps[c] / z - if c == lab { 1.0 } else { 0.0 };
            grad[c * n + i] = T::lit(pr * inv);
        }
    }
    (loss * inv, grad)
}

/// Per-pixel argmax of channel-major logits.
pub fn argmax_channels<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    let n = logits.len() / classes;
    (0..n).map(|i| (0..classes).max_by(|&a, &b| logits[a * n + i].partial_cmp(&logits[b * n + i]).unwrap()).unwrap()).collect()
}

/// Average per-example `(loss, grad)` pairs in index order.
pub fn mean_of<T: Real>(items: Vec<(f64, Vec<T>)>) -> (f64, Vec<T>) {
    let k = items.len();
    assert!(k > 0, "empty batch");
    let mut iter = items.into_iter();
    let (mut loss, mut grad) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
    }
    let inv = T::lit(1.0 / k as f64);
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss / k as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, clip_norm: None, ..Default::default() }, 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn loss_gradients_match_differences() {
        let pred = [0.3f64, -0.2, 0.9, 0.1];
        let tgt = [0.0f64, 0.5, 0.4, 0.1 + 1e-3];
        let h = 1e-7;
        for (f, name) in [(mse::<f64> as fn(&[f64], &[f64]) -> (f64, Vec<f64>), "mse"), (l1::<f64>, "l1")] {
            let (_, g) = f(&pred, &tgt);
            for i in 0..4 {
                let mut a = pred;
                let mut b = pred;
                a[i] += h;
                b[i] -= h;
                let fd = (f(&a, &tgt).0 - f(&b, &tgt).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6, "{name} {i}");
            }
        }
        let w = [0.5f64, 2.0, 1.0, 0.25];
        let (_, g) = weighted_l1(&pred, &tgt, &w);
        for i in 0..4 {
            let mut a = pred;
            let mut b = pred;
            a[i] += h;
            b[i] -= h;
            let fd = (weighted_l1(&a, &tgt, &w).0 - weighted_l1(&b, &tgt, &w).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "weighted l1 {i}");
        }
        assert_eq!(weighted_l1(&pred, &tgt, &[1.0; 4]).0, l1(&pred, &tgt).0);
        let logits = [0.2f64, -1.0, 0.5, 0.3, 1.2, -0.4];
        let labels = [2usize, 0];
        let (_, g) = softmax_xent(&logits, &labels, 3);
        for i in 0..6 {
            let mut a = logits;
            let mut b = logits;
            a[i] += h;
            b[i] -= h;
            let fd = (softmax_xent(&a, &labels, 3).0 - softmax_xent(&b, &labels, 3).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let logits = [0.0f32, 5.0, 1.0, 0.0];
        assert_eq!(argmax_channels(&logits, 2), vec![1, 0]);
    }
}
