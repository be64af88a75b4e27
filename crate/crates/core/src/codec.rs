use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume};

/// Maps `K` discrete labels onto `K` evenly spaced values spanning `[-1, 1]`
/// (a single label maps to `-1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCodec {
    labels: Vec<u8>,
}

impl LabelCodec {
    pub fn new(mut labels: Vec<u8>) -> Result<Self> {
        labels.sort_unstable();
        let n = labels.len();
        labels.dedup();
        if labels.is_empty() || labels.len() != n {
            return Err(Error::Config("codec labels must be non-empty and distinct".into()));
        }
        Ok(Self { labels })
    }

    /// Codec for labels `0..k`.
    pub fn contiguous(k: usize) -> Result<Self> {
        if k == 0 || k > 256 {
            return Err(Error::Config(format!("label count {k} outside 1..=256")));
        }
        Self::new((0..k).map(|l| l as u8).collect())
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn value_of_index(&self, i: usize) -> f32 {
        let k = self.labels.len();
        if k == 1 {
            -1.0
        } else {
            (-1.0 + 2.0 * i as f64 / (k - 1) as f64) as f32
        }
    }

    pub fn encode_label(&self, label: u8) -> Result<f32> {
        self.labels.binary_search(&label).map(|i| self.value_of_index(i)).map_err(|_| Error::UnknownLabel(label))
    }

    /// Nearest encoded value's label; exact midpoints go to the smaller label.
    pub fn decode_value(&self, v: f32) -> u8 {
        let k = self.labels.len();
        if k == 1 {
            return self.labels[0];
        }
        let pos = (v as f64 + 1.0) * (k - 1) as f64 / 2.0;
        let idx = (pos - 0.5).ceil().clamp(0.0, (k - 1) as f64) as usize;
        self.labels[idx]
    }

    pub fn encode(&self, mask: &MaskVolume) -> Result<Volume<f32>> {
        let table: Vec<Option<f32>> = (0..=255u8).map(|l| self.encode_label(l).ok()).collect();
        let mut data = Vec::with_capacity(mask.voxels().data().len());
        for &l in mask.voxels().data() {
            data.push(table[l as usize].ok_or(Error::UnknownLabel(l))?);
        }
        Volume::new(mask.dims(), data)
    }

    pub fn encode_slice(&self, labels: &[u8]) -> Result<Vec<f32>> {
        labels.iter().map(|&l| self.encode_label(l)).collect()
    }

    pub fn decode(&self, values: &Volume<f32>) -> MaskVolume {
        let vox = values.map(|v| self.decode_value(v));
        let mut set = self.labels.clone();
        if !set.contains(&0) {
            set.push(0);
        }
        MaskVolume::new(vox, set).expect("decoded labels come from the codec")
    }
}

/// Per-voxel weights `∝ 1/√(frequency of the voxel's label)` over a run of
/// encoded values, normalized to mean 1.
pub fn label_balance(values: &[f32]) -> Vec<f32> {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for v in values {
        match counts.iter_mut().find(|(b, _)| *b == v.to_bits()) {
            Some((_, c)) => *c += 1,
            None => counts.push((v.to_bits(), 1)),
        }
    }
    let raw = |v: &f32| -> f64 {
        let c = counts.iter().find(|(b, _)| *b == v.to_bits()).map_or(1, |&(_, c)| c);
        1.0 / (c as f64).sqrt()
    };
    let mean = values.iter().map(raw).sum::<f64>() / values.len().max(1) as f64;
    values.iter().map(|v| (raw(v) / mean) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_balance_has_unit_mean_and_inverse_sqrt_ratio() {
        // 12 pixels of one value, 3 of another
        let slice: Vec<f32> = [vec![-1.0f32; 12], vec![0.2; 3]].concat();
        let w = label_balance(&slice);
        let mean = w.iter().sum::<f32>() / w.len() as f32;
        assert!((mean - 1.0).abs() < 1e-6);
        assert!((w[14] / w[0] - 2.0).abs() < 1e-6);
        assert!(label_balance(&[0.5; 9]).iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    use proptest::prelude::*;

    #[test]
    fn even_spacing() {
        let c2 = LabelCodec::contiguous(2).unwrap();
        assert_eq!((c2.encode_label(0).unwrap(), c2.encode_label(1).unwrap()), (-1.0, 1.0));
        let c3 = LabelCodec::contiguous(3).unwrap();
        let v: Vec<f32> = (0..3).map(|l| c3.encode_label(l).unwrap()).collect();
        assert_eq!(v, vec![-1.0, 0.0, 1.0]);
        assert!(matches!(c3.encode_label(3), Err(Error::UnknownLabel(3))));
    }

    #[test]
    fn decode_nearest_with_low_tie_break() {
        let c3 = LabelCodec::contiguous(3).unwrap();
        assert_eq!(c3.decode_value(-0.5), 0);
        assert_eq!(c3.decode_value(0.5), 1);
        assert_eq!(c3.decode_value(0.9), 2);
        assert_eq!(c3.decode_value(-7.0), 0);
        assert_eq!(c3.decode_value(7.0), 2);
        let sparse = LabelCodec::new(vec![0, 4, 9]).unwrap();
        assert_eq!(sparse.decode_value(0.2), 4);
    }

    #[test]
    fn encode_rejects_unknown_labels() {
        let vox = Volume::new([1, 1, 2], vec![0u8, 2]).unwrap();
        let mask = MaskVolume::new(vox, vec![0, 2]).unwrap();
        assert!(LabelCodec::contiguous(2).unwrap().encode(&mask).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(k in 2usize..9, seed in any::<u64>()) {
            use rand::Rng;
            let mut r = crate::rng::rng(seed);
            let codec = LabelCodec::contiguous(k).unwrap();
            let data: Vec<u8> = (0..60).map(|_| r.gen_range(0..k as u8)).collect();
            let mask = MaskVolume::new(Volume::new([3, 4, 5], data).unwrap(), codec.labels().to_vec()).unwrap();
            let enc = codec.encode(&mask).unwrap();
            prop_assert!(enc.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let dec = codec.decode(&enc);
            prop_assert_eq!(dec.voxels(), mask.voxels());
        }

        #[test]
        fn decode_is_idempotent(v in -2.0f32..2.0, k in 1usize..9) {
            let codec = LabelCodec::contiguous(k).unwrap();
            let l = codec.decode_value(v);
            prop_assert_eq!(codec.decode_value(codec.encode_label(l).unwrap()), l);
        }
    }
}
