use crate::error::{Error, Result};
use crate::phantom::PhantomSpec;
use crate::volume::{ImageVolume, MaskVolume, Volume};

/// Dice of two label maps for one label; `None` when the label appears in
/// neither.
pub fn dice(a: &[u8], b: &[u8], label: u8) -> Option<f64> {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    (na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64)
}

/// Dice per label over the union of both label sets, in label order.
pub fn per_label_dice(pred: &MaskVolume, truth: &MaskVolume) -> Vec<(u8, Option<f64>)> {
    let mut labels: Vec<u8> = pred.label_set().iter().chain(truth.label_set()).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    labels.into_iter().map(|l| (l, dice(pred.voxels().data(), truth.voxels().data(), l))).collect()
}

/// Mean of the present (non-`None`) Dice values among labels other than 0.
pub fn mean_foreground(dices: &[(u8, Option<f64>)]) -> Option<f64> {
    let v: Vec<f64> = dices.iter().filter(|(l, _)| *l != 0).filter_map(|(_, d)| *d).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-label Dice between the intensity-band reading of `image` and `mask`.
pub fn alignment_dice(image: &ImageVolume, mask: &MaskVolume, spec: &PhantomSpec) -> Result<Vec<(u8, Option<f64>)>> {
    if image.dims() != mask.dims() {
        return Err(Error::shape(&mask.dims(), &image.dims()));
    }
    spec.validate()?;
    Ok(per_label_dice(&spec.band_classify(image), mask))
}

/// Mean over unordered pairs of the mean absolute voxel difference.
pub fn diversity_score(volumes: &[&Volume<f32>]) -> Result<f64> {
    if volumes.len() < 2 {
        return Err(Error::Eval("diversity needs at least two volumes".into()));
    }
    let dims = volumes[0].dims();
    if let Some(v) = volumes.iter().find(|v| v.dims() != dims) {
        return Err(Error::shape(&dims, &v.dims()));
    }
    let pairs: Vec<(usize, usize)> = (0..volumes.len()).flat_map(|i| (i + 1..volumes.len()).map(move |j| (i, j))).collect();
    let dists = crate::par::map(&pairs, |&(i, j)| {
        let (a, b) = (volumes[i].data(), volumes[j].data());
        a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
    });
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Mean per-depth occupancy of each label in `labels`, concatenated
/// label-major. Depth is resampled to `bins` by nearest relative position so
/// volumes of different depth are comparable.
pub fn occupancy_profile(masks: &[&MaskVolume], labels: &[u8], bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * bins];
    for m in masks {
        let d = m.dims()[0];
        for (li, &l) in labels.iter().enumerate() {
            let prof = m.occupancy_profile(l);
            for b in 0..bins {
                let z = ((b as f64 + 0.5) / bins as f64 * d as f64).floor() as usize;
                out[li * bins + b] += prof[z.min(d - 1)] / masks.len() as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;

    fn mask(data: Vec<u8>) -> MaskVolume {
        let n = data.len();
        MaskVolume::new(Volume::new([1, 1, n], data).unwrap(), vec![0, 1, 2]).unwrap()
    }

    #[test]
    fn dice_basics() {
        assert_eq!(dice(&[1, 1, 0], &[1, 0, 0], 1), Some(2.0 / 3.0));
        assert_eq!(dice(&[0, 0], &[0, 0], 1), None);
        assert_eq!(dice(&[1, 0], &[0, 0], 1), Some(0.0));
        let m = mask(vec![0, 1, 2, 2]);
        let d = per_label_dice(&m, &m);
        assert!(d.iter().all(|(_, v)| *v == Some(1.0)));
        assert_eq!(mean_foreground(&d), Some(1.0));
    }

    #[test]
    fn alignment_on_ground_truth_and_constant_images() {
        let spec = PhantomSpec::default().with_dims([12, 32, 32]);
        let (m, img) = generate_phantom(&spec, 8).unwrap();
        let d = alignment_dice(&img, &m, &spec).unwrap();
        assert!(d.iter().all(|(_, v)| v.is_none_or(|x| x >= 0.99)), "{d:?}");

        let flat = ImageVolume::new(Volume::filled(m.dims(), spec.bands[0].mean as f32)).unwrap();
        let d = alignment_dice(&flat, &m, &spec).unwrap();
        let bg_frac = m.voxels().data().iter().filter(|&&l| l == 0).count() as f64 / m.voxels().data().len() as f64;
        // everything classified as background: Dice = 2f / (1 + f)
        assert!((d[0].1.unwrap() - 2.0 * bg_frac / (1.0 + bg_frac)).abs() < 1e-12);
        assert!(d[1..].iter().all(|(_, v)| *v == Some(0.0)));
    }

    #[test]
    fn band_painted_image_aligns_perfectly() {
        let spec = PhantomSpec::default().with_dims([8, 16, 16]);
        let (m, _) = generate_phantom(&spec, 2).unwrap();
        let img = ImageVolume::new(m.voxels().map(|l| spec.bands[l as usize].mean as f32)).unwrap();
        let d = alignment_dice(&img, &m, &spec).unwrap();
        assert!(d.iter().all(|(_, v)| v.is_none_or(|x| x == 1.0)));
    }

    #[test]
    fn diversity_arithmetic() {
        let a = Volume::filled([2, 2, 2], 0.1f32);
        let b = Volume::filled([2, 2, 2], 0.6f32);
        assert_eq!(diversity_score(&[&a, &a, &a]).unwrap(), 0.0);
        assert!((diversity_score(&[&a, &b]).unwrap() - 0.5).abs() < 1e-7);
        assert!(diversity_score(&[&a]).is_err());
        let c = Volume::filled([1, 2, 2], 0.0f32);
        assert!(diversity_score(&[&a, &c]).is_err());
        let ab = diversity_score(&[&a, &b, &a]).unwrap();
        let ba = diversity_score(&[&b, &a, &a]).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn pearson_sanity() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
