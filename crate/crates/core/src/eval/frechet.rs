//! Fréchet distance between Gaussian fits of handcrafted slice features.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{View, Volume};

pub const INTENSITY_BINS: usize = 16;
pub const GRADIENT_BINS: usize = 8;
pub const BLOCK_GRID: usize = 8;
/// Gradient magnitudes at or above this fall into the last bin.
pub const GRADIENT_MAX: f32 = 1.0;
pub const RIDGE: f64 = 1e-6;

pub fn feature_len() -> usize {
    INTENSITY_BINS + GRADIENT_BINS + BLOCK_GRID * BLOCK_GRID
}

/// Normalized intensity histogram over `[-1, 1]`, normalized
/// gradient-magnitude histogram over `[0, GRADIENT_MAX]` (forward
/// differences), and the mean of each cell of an 8×8 block grid.
pub fn slice_features(slice: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let n = (rows * cols) as f64;
    let mut f = vec![0.0; feature_len()];
    for &v in slice {
        let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * INTENSITY_BINS as f32) as usize).min(INTENSITY_BINS - 1);
        f[b] += 1.0 / n;
    }
    for r in 0..rows {
        for c in 0..cols {
            let v = slice[r * cols + c];
            let gx = if c + 1 < cols { slice[r * cols + c + 1] - v } else { 0.0 };
            let gy = if r + 1 < rows { slice[(r + 1) * cols + c] - v } else { 0.0 };
            let g = (gx * gx + gy * gy).sqrt();
            let b = ((g / GRADIENT_MAX * GRADIENT_BINS as f32) as usize).min(GRADIENT_BINS - 1);
            f[INTENSITY_BINS + b] += 1.0 / n;
        }
    }
    let base = INTENSITY_BINS + GRADIENT_BINS;
    let mut counts = [0usize; BLOCK_GRID * BLOCK_GRID];
    for r in 0..rows {
        let br = r * BLOCK_GRID / rows;
        for c in 0..cols {
            let cell = br * BLOCK_GRID + c * BLOCK_GRID / cols;
            f[base + cell] += slice[r * cols + c] as f64;
            counts[cell] += 1;
        }
    }
    for (cell, &k) in counts.iter().enumerate() {
        if k > 0 {
            f[base + cell] /= k as f64;
        }
    }
    f
}

/// Features of every slice of every volume along `view`.
pub fn view_features(volumes: &[&Volume<f32>], view: View) -> Vec<Vec<f64>> {
    let per_volume = crate::par::map(volumes, |v| {
        let (_, rows, cols) = view.geometry(v.dims());
        v.slices(view).iter().map(|s| slice_features(s, rows, cols)).collect::<Vec<_>>()
    });
    per_volume.into_iter().flatten().collect()
}

/// Sample mean and unbiased covariance.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::Eval("need at least two feature vectors".into()));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_column_slice(f) - &mu;
        cov.ger(1.0, &x, &x, 1.0);
    }
    Ok((mu, cov / (n - 1.0)))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|μ1 − μ2|² + tr(Σ1 + Σ2 − 2 (Σ1^½ Σ2 Σ1^½)^½)` with `RIDGE` added to
/// both covariance diagonals.
pub fn frechet_gaussian(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let d = mu1.len();
    let ridge = DMatrix::identity(d, d) * RIDGE;
    let (s1, s2) = (s1 + &ridge, s2 + &ridge);
    let r1 = psd_sqrt(&s1);
    let cross = psd_sqrt(&(&r1 * &s2 * &r1));
    let v = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    v.max(0.0)
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    if m1.len() != m2.len() {
        return Err(Error::shape(&[m1.len()], &[m2.len()]));
    }
    Ok(frechet_gaussian(&m1, &s1, &m2, &s2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetScores {
    pub per_view: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Per-view Fréchet distances between two volume sets and their mean.
pub fn frechet_proxy(real: &[&Volume<f32>], synth: &[&Volume<f32>]) -> Result<FrechetScores> {
    if real.len() < 2 || synth.len() < 2 {
        return Err(Error::Eval("each volume set needs at least two volumes".into()));
    }
    let mut per_view = BTreeMap::new();
    for view in View::ALL {
        let d = frechet_distance(&view_features(real, view), &view_features(synth, view))?;
        per_view.insert(view.name().to_string(), d);
    }
    let mean = per_view.values().sum::<f64>() / per_view.len() as f64;
    Ok(FrechetScores { per_view, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn unit_gaussians_one_apart() {
        let h = 0.5f64.sqrt();
        let a = vec![vec![-h], vec![h]];
        let b = vec![vec![1.0 - h], vec![1.0 + h]];
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn covariance_term_in_one_dimension() {
        // unbiased variances 2 and 8: (√2 − √8)² = 2
        let a = vec![vec![-1.0], vec![1.0]];
        let b = vec![vec![-2.0], vec![2.0]];
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn identity_symmetry_and_ordering() {
        let spec = PhantomSpec::default().with_dims([8, 16, 16]);
        let mut other = spec.clone();
        for b in &mut other.bands {
            b.mean = -b.mean;
        }
        let gen =
            |s: &PhantomSpec, seeds: std::ops::Range<u64>| -> Vec<Volume<f32>> { seeds.map(|i| generate_phantom(s, i).unwrap().1.into_volume()).collect() };
        let a = gen(&spec, 0..3);
        let b = gen(&spec, 10..13);
        let c = gen(&other, 20..23);
        fn r(v: &[Volume<f32>]) -> Vec<&Volume<f32>> {
            v.iter().collect()
        }
        let self_d = frechet_proxy(&r(&a), &r(&a)).unwrap();
        assert!(self_d.mean < 1e-3, "{self_d:?}");
        let ab = frechet_proxy(&r(&a), &r(&b)).unwrap();
        let ba = frechet_proxy(&r(&b), &r(&a)).unwrap();
        assert!((ab.mean - ba.mean).abs() < 1e-6 * (1.0 + ab.mean));
        let ac = frechet_proxy(&r(&a), &r(&c)).unwrap();
        assert!(ab.mean < ac.mean, "{} vs {}", ab.mean, ac.mean);
        assert!(frechet_proxy(&r(&a[..1]), &r(&b)).is_err());
    }
}
