//! Autoregressive stitching of `m`-slice windows into a full-depth volume.
//!
//! An initial window is drawn unconditionally at a random start `z0` in
//! `0..=L−m`. Forward windows then take the last `n` generated slices as
//! condition and extend the volume toward depth `L`; backward windows take
//! the first `n` and extend toward depth 0. Slices that overshoot either end
//! are trimmed.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::LabelCodec;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::mcdpm::{sample_subsequence, ConditionMode, McDenoiser, McDpmShape};
use crate::nn::Network;
use crate::rng::Rng;
use crate::volume::{MaskVolume, Volume};

/// Produces the target slices of one window.
pub trait BlockSampler: Sync {
    fn shape(&self) -> McDpmShape;

    /// `condition` holds `0` or `n` slices; the result holds `m` or `m − n`.
    fn sample(&self, condition: &[f32], mode: ConditionMode, z_norm: f64, rng: &mut Rng) -> Result<Vec<f32>>;
}

/// [`BlockSampler`] backed by a trained denoiser.
pub struct DiffusionSampler<'a, N: Network = crate::nn::UNet> {
    pub model: &'a McDenoiser<N>,
    pub params: &'a [f32],
    pub schedule: &'a DiffusionSchedule,
    pub guidance: f64,
}

impl<N: Network> BlockSampler for DiffusionSampler<'_, N> {
    fn shape(&self) -> McDpmShape {
        self.model.shape
    }

    fn sample(&self, condition: &[f32], mode: ConditionMode, z_norm: f64, rng: &mut Rng) -> Result<Vec<f32>> {
        sample_subsequence(self.model, self.params, condition, mode, z_norm, self.schedule, self.guidance, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Output depth `L`.
    pub depth: usize,
    /// Guidance scale `s >= 1`.
    pub guidance: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { depth: 32, guidance: 1.0 }
    }
}

/// One sampler call during stitching. Slice positions are in output depth
/// coordinates and may fall outside `0..L` before trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchStep {
    pub mode: ConditionMode,
    pub z_norm: f64,
    /// Positions of the condition slices, `[start, end)`.
    pub condition: (i64, i64),
    /// Positions of the produced slices, `[start, end)`.
    pub produced: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchTrace {
    pub depth: usize,
    pub z0: usize,
    /// Number of valid initial starts, `L − (m − 1)`.
    pub start_range: usize,
    pub steps: Vec<StitchStep>,
    /// Extent before trimming, `[start, end)`.
    pub untrimmed: (i64, i64),
}

/// Stitch an encoded `L x H x W` volume from windows.
pub fn stitch(sampler: &dyn BlockSampler, depth: usize, rng: &mut Rng) -> Result<(Volume<f32>, StitchTrace)> {
    let McDpmShape { m, n, h, w } = sampler.shape();
    if n == 0 || n >= m {
        return Err(Error::Config(format!("need 1 <= n < m, got n={n}, m={m}")));
    }
    if depth < m {
        return Err(Error::Config(format!("target depth {depth} is shorter than the window length {m}")));
    }
    let plane = h * w;
    let step = (m - n) as i64;
    let (l, mi, ni) = (depth as i64, m as i64, n as i64);
    let mut slices: BTreeMap<i64, Vec<f32>> = BTreeMap::new();
    let mut steps = Vec::new();

    let mut run = |mode: ConditionMode, cond: (i64, i64), start: i64, z_norm: f64, slices: &mut BTreeMap<i64, Vec<f32>>, rng: &mut Rng| -> Result<()> {
        let condition: Vec<f32> = (cond.0..cond.1).flat_map(|z| slices[&z].iter().copied()).collect();
        let out = sampler.sample(&condition, mode, z_norm, rng)?;
        let count = out.len() / plane.max(1);
        let expected = mode.target_slots(m, n).len();
        if out.len() != expected * plane {
            return Err(Error::shape(&[expected, h, w], &[count, h, w]));
        }
        for (k, s) in out.chunks_exact(plane).enumerate() {
            slices.insert(start + k as i64, s.to_vec());
        }
        steps.push(StitchStep { mode, z_norm, condition: cond, produced: (start, start + count as i64) });
        Ok(())
    };

    let z0 = rng.gen_range(0..=depth - m);
    let z0i = z0 as i64;
    run(ConditionMode::Unconditional, (0, 0), z0i, z0 as f64 / depth as f64, &mut slices, rng)?;

    let mut end = z0i + mi;
    while end < l {
        let window = end - ni;
        run(ConditionMode::Forward, (window, end), end, window as f64 / depth as f64, &mut slices, rng)?;
        end += step;
    }
    let mut start = z0i;
    while start > 0 {
        let window = start - step;
        run(ConditionMode::Backward, (start, start + ni), window, window.max(0) as f64 / depth as f64, &mut slices, rng)?;
        start = window;
    }

    let mut data = Vec::with_capacity(depth * plane);
    for z in 0..l {
        data.extend_from_slice(&slices[&z]);
    }
    let trace = StitchTrace { depth, z0, start_range: depth - (m - 1), steps, untrimmed: (start, end) };
    Ok((Volume::new([depth, h, w], data)?, trace))
}

/// Stitch and decode a label volume.
pub fn generate_mask_volume(sampler: &dyn BlockSampler, codec: &LabelCodec, cfg: &GenerationConfig, rng: &mut Rng) -> Result<(MaskVolume, StitchTrace)> {
    if !(cfg.guidance.is_finite() && cfg.guidance >= 1.0) {
        return Err(Error::Config(format!("guidance scale must be >= 1, got {}", cfg.guidance)));
    }
    let (enc, trace) = stitch(sampler, cfg.depth, rng)?;
    Ok((codec.decode(&enc), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Emits slices whose constant value is their depth position: the
    /// unconditional block reads its start from `z_norm`, conditioned blocks
    /// continue from their condition values.
    struct Ramp {
        shape: McDpmShape,
        depth: usize,
    }

    impl BlockSampler for Ramp {
        fn shape(&self) -> McDpmShape {
            self.shape
        }

        fn sample(&self, condition: &[f32], mode: ConditionMode, z_norm: f64, _: &mut Rng) -> Result<Vec<f32>> {
            let McDpmShape { m, n, h, w } = self.shape;
            let p = h * w;
            let vals: Vec<f32> = match mode {
                ConditionMode::Unconditional => {
                    let z0 = (z_norm * self.depth as f64).round() as f32;
                    (0..m).map(|k| z0 + k as f32).collect()
                }
                ConditionMode::Forward => {
                    let last = condition[(n - 1) * p];
                    (1..=m - n).map(|k| last + k as f32).collect()
                }
                ConditionMode::Backward => {
                    let first = condition[0];
                    (0..m - n).map(|k| first - (m - n - k) as f32).collect()
                }
            };
            Ok(vals.into_iter().flat_map(|v| std::iter::repeat_n(v, p)).collect())
        }
    }

    #[test]
    fn stitched_ramp_over_grid() {
        for m in [4usize, 6] {
            for n in [1usize, 2] {
                for depth in 6..=40 {
                    if depth < m {
                        continue;
                    }
                    let ramp = Ramp { shape: McDpmShape { m, n, h: 1, w: 2 }, depth };
                    for seed in 0..4 {
                        let (vol, trace) = stitch(&ramp, depth, &mut rng::rng(seed)).unwrap();
                        assert_eq!(vol.dims(), [depth, 1, 2]);
                        for z in 0..depth {
                            assert_eq!(vol.axial(z), &[z as f32; 2][..], "m={m} n={n} L={depth}");
                        }
                        assert!(trace.z0 + m <= depth);
                        assert_eq!(trace.steps[0].mode, ConditionMode::Unconditional);
                        assert!(trace.steps[1..].iter().all(|s| s.mode != ConditionMode::Unconditional));
                        assert!(trace.steps.iter().all(|s| (0.0..1.0).contains(&s.z_norm)));
                        assert!(trace.untrimmed.0 > -((m - n) as i64) && trace.untrimmed.1 < (depth + m - n) as i64);
                    }
                }
            }
        }
    }

    #[test]
    fn single_block_when_depth_equals_window() {
        let ramp = Ramp { shape: McDpmShape { m: 6, n: 1, h: 1, w: 1 }, depth: 6 };
        let (_, trace) = stitch(&ramp, 6, &mut rng::rng(0)).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.start_range, 1);
        assert!(stitch(&ramp, 5, &mut rng::rng(0)).is_err());
    }

    #[test]
    fn start_position_is_uniform() {
        let depth = 10;
        let ramp = Ramp { shape: McDpmShape { m: 4, n: 1, h: 1, w: 1 }, depth };
        let mut counts = [0usize; 7];
        let mut r = rng::rng(5);
        for _ in 0..7000 {
            counts[stitch(&ramp, depth, &mut r).unwrap().1.z0] += 1;
        }
        assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
    }
}
