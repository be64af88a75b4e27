//! Procedural multi-label phantoms: a body shell spanning every slice and a
//! set of organ-like blobs, each confined to its own depth range, painted in
//! priority order. Images sample each voxel from its label's intensity band
//! plus a smooth low-frequency field.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::LabelCodec;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::volume::{ImageVolume, MaskVolume, Volume};

/// Inclusive-exclusive uniform range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(self, rng: &mut Rng) -> f64 {
        if self.1 > self.0 {
            rng.gen_range(self.0..self.1)
        } else {
            self.0
        }
    }

    fn valid(self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

/// Elliptic cross-section radii and centre, as fractions of the in-plane
/// extent, plus the depth placement as fractions of `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganGeometry {
    pub depth_center: Range,
    pub depth_radius: Range,
    pub center_y: Range,
    pub center_x: Range,
    pub radius_y: Range,
    pub radius_x: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyGeometry {
    pub radius_y: Range,
    pub radius_x: Range,
    /// Relative amplitude of the slow radius modulation along depth.
    pub taper: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    /// Labels including background (0) and the body shell (1).
    pub labels: usize,
    pub body: BodyGeometry,
    /// One entry per organ label `2..labels`.
    pub organs: Vec<OrganGeometry>,
    /// One band per label.
    pub bands: Vec<Band>,
    /// Relative amplitude of angular boundary wobble.
    pub deformation: f64,
    /// Amplitude of the smooth additive intensity field.
    pub field_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = |dc: (f64, f64), cy: (f64, f64), cx: (f64, f64), r: (f64, f64)| OrganGeometry {
            depth_center: Range(dc.0, dc.1),
            depth_radius: Range(0.2, 0.26),
            center_y: Range(cy.0, cy.1),
            center_x: Range(cx.0, cx.1),
            radius_y: Range(r.0, r.1),
            radius_x: Range(r.0, r.1),
        };
        let band = |mean| Band { mean, std: 0.03 };
        Self {
            dims: [32, 64, 64],
            labels: 6,
            body: BodyGeometry { radius_y: Range(0.36, 0.42), radius_x: Range(0.38, 0.44), taper: Range(0.03, 0.08) },
            organs: vec![
                organ((0.22, 0.3), (0.42, 0.5), (0.3, 0.38), (0.12, 0.15)),
                organ((0.38, 0.46), (0.48, 0.56), (0.62, 0.7), (0.12, 0.15)),
                organ((0.56, 0.64), (0.5, 0.58), (0.44, 0.52), (0.11, 0.14)),
                organ((0.72, 0.8), (0.36, 0.44), (0.44, 0.56), (0.1, 0.13)),
            ],
            // label -> band; non-monotone so intensity is not a rescaled label
            bands: vec![band(-0.85), band(0.17), band(-0.51), band(0.85), band(-0.17), band(0.51)],
            deformation: 0.08,
            field_amplitude: 0.03,
        }
    }
}

impl PhantomSpec {
    /// Same geometry family with a different volume extent.
    pub fn with_dims(mut self, dims: [usize; 3]) -> Self {
        self.dims = dims;
        self
    }

    /// Background-only phantom.
    pub fn background_only(dims: [usize; 3]) -> Self {
        Self { dims, labels: 1, organs: vec![], bands: vec![Band { mean: -0.85, std: 0.03 }], ..Self::default() }
    }

    pub fn codec(&self) -> LabelCodec {
        LabelCodec::contiguous(self.labels).expect("validated label count")
    }

    pub fn label_set(&self) -> Vec<u8> {
        (0..self.labels as u8).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.labels == 0 || self.labels > 255 {
            return bad(format!("label count {} outside 1..=255", self.labels));
        }
        let organs = self.labels.saturating_sub(2);
        if self.organs.len() != organs {
            return bad(format!("{} labels need {} organ geometries, got {}", self.labels, organs, self.organs.len()));
        }
        if self.bands.len() != self.labels {
            return bad(format!("need one intensity band per label ({}), got {}", self.labels, self.bands.len()));
        }
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.mean.is_finite() && (-1.0..=1.0).contains(&b.mean) && b.std.is_finite() && b.std >= 0.0) {
                return bad(format!("band {i} must have mean in [-1,1] and std >= 0"));
            }
        }
        for i in 0..self.bands.len() {
            for j in i + 1..self.bands.len() {
                let (a, b) = (self.bands[i], self.bands[j]);
                let pooled = ((a.std * a.std + b.std * b.std) / 2.0).sqrt();
                if (a.mean - b.mean).abs() < 3.0 * pooled || a.mean == b.mean {
                    return bad(format!("bands {i} and {j} are not separated by 3 pooled std"));
                }
            }
        }
        let ranges = [self.body.radius_y, self.body.radius_x, self.body.taper]
            .into_iter()
            .chain(self.organs.iter().flat_map(|o| [o.depth_center, o.depth_radius, o.center_y, o.center_x, o.radius_y, o.radius_x]));
        if ranges.clone().any(|r| !r.valid()) {
            return bad("geometry ranges must be finite with lo <= hi".into());
        }
        if !(0.0..0.5).contains(&self.deformation) || !(0.0..=0.5).contains(&self.field_amplitude) {
            return bad("deformation must be in [0, 0.5) and field amplitude in [0, 0.5]".into());
        }
        Ok(())
    }

    /// Label whose band mean is nearest to `v` (smaller label on ties).
    pub fn classify_intensity(&self, v: f32) -> u8 {
        let mut best = 0;
        let mut dist = f64::INFINITY;
        for (l, b) in self.bands.iter().enumerate() {
            let d = (v as f64 - b.mean).abs();
            if d < dist {
                dist = d;
                best = l;
            }
        }
        best as u8
    }

    /// Intensity-band oracle: recover a mask from an image.
    pub fn band_classify(&self, image: &ImageVolume) -> MaskVolume {
        let vox = image.volume().map(|v| self.classify_intensity(v));
        MaskVolume::new(vox, self.label_set()).expect("band labels are in range")
    }
}

/// One generated (mask, image) pair with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub id: String,
    pub seed: u64,
    pub mask: MaskVolume,
    pub image: ImageVolume,
}

impl PhantomPair {
    pub fn checksum(&self) -> String {
        crate::io::pair_checksum(&self.mask, &self.image)
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    harmonic: f64,
    phase: f64,
    amp: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64, scale: f64) -> bool {
        if scale <= 0.0 {
            return false;
        }
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = dy.atan2(dx);
        let wobble = 1.0 + self.amp * (self.harmonic * theta + self.phase).sin();
        let (ry, rx) = (self.ry * scale * wobble, self.rx * scale * wobble);
        (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
    }
}

/// Deterministic in `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(MaskVolume, ImageVolume)> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mut r = rng::rng(seed);
    let mut labels = Volume::filled(spec.dims, 0u8);

    if spec.labels >= 2 {
        let ellipse = |rng: &mut Rng, cy: f64, cx: f64, ry: Range, rx: Range| Ellipse {
            cy,
            cx,
            ry: ry.sample(rng) * h as f64,
            rx: rx.sample(rng) * w as f64,
            harmonic: rng.gen_range(2..=3) as f64,
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: spec.deformation,
        };
        let body = ellipse(&mut r, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0, spec.body.radius_y, spec.body.radius_x);
        let taper = spec.body.taper.sample(&mut r);
        let taper_phase = r.gen_range(0.0..2.0 * PI);
        let body_scale = |z: usize| 1.0 + taper * (2.0 * PI * z as f64 / d as f64 + taper_phase).sin();

        let organs: Vec<(Ellipse, f64, f64)> = spec
            .organs
            .iter()
            .map(|g| {
                let cy = g.center_y.sample(&mut r) * h as f64;
                let cx = g.center_x.sample(&mut r) * w as f64;
                let e = ellipse(&mut r, cy, cx, g.radius_y, g.radius_x);
                let zc = g.depth_center.sample(&mut r) * d as f64;
                let rz = (g.depth_radius.sample(&mut r) * d as f64).max(0.5);
                (e, zc, rz)
            })
            .collect();

        for z in 0..d {
            let bs = body_scale(z);
            // parabolic depth profile keeps cross-sections shrinking gradually
            let scales: Vec<f64> = organs.iter().map(|(_, zc, rz)| 1.0 - ((z as f64 - zc) / rz).powi(2)).collect();
            for y in 0..h {
                for x in 0..w {
                    let (fy, fx) = (y as f64, x as f64);
                    if !body.contains(fy, fx, bs) {
                        continue;
                    }
                    let mut lab = 1u8;
                    for (k, (e, ..)) in organs.iter().enumerate() {
                        if e.contains(fy, fx, scales[k]) {
                            lab = (k + 2) as u8;
                        }
                    }
                    let idx = labels.index(z, y, x);
                    labels.data_mut()[idx] = lab;
                }
            }
        }
    }

    let field = smooth_field(&mut r, spec.dims, spec.field_amplitude);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<f32> = labels
        .data()
        .iter()
        .zip(&field)
        .map(|(&l, &f)| {
            let b = spec.bands[l as usize];
            (b.mean + b.std * normal.sample(&mut r) + f).clamp(-1.0, 1.0) as f32
        })
        .collect();
    let image = ImageVolume::new(Volume::new(spec.dims, data)?)?;
    let mask = MaskVolume::new(labels, spec.label_set())?;
    Ok((mask, image))
}

/// Sum of two low-frequency plane waves, peak amplitude `amp`.
fn smooth_field(r: &mut Rng, dims: [usize; 3], amp: f64) -> Vec<f64> {
    let [d, h, w] = dims;
    let waves: Vec<[f64; 4]> = (0..2)
        .map(|_| [r.gen_range(0.2..0.8) / d as f64, r.gen_range(0.2..0.8) / h as f64, r.gen_range(0.2..0.8) / w as f64, r.gen_range(0.0..2.0 * PI)])
        .collect();
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let s: f64 = waves.iter().map(|[fz, fy, fx, ph]| (2.0 * PI * (fz * z as f64 + fy * y as f64 + fx * x as f64) + ph).sin()).sum();
                out.push(0.5 * amp * s);
            }
        }
    }
    out
}

/// Generated phantom set with a train/validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub train: Vec<PhantomPair>,
    pub val: Vec<PhantomPair>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &PhantomPair> {
        self.train.iter().chain(&self.val)
    }
}

/// Validation share used by [`make_dataset`].
pub const VAL_FRACTION: f64 = 0.2;

/// `(train, val)` sizes for `count` volumes.
pub fn split_sizes(count: usize) -> (usize, usize) {
    let val = ((count as f64 * VAL_FRACTION).round() as usize).clamp(1, count.saturating_sub(1).max(1));
    (count - val, val)
}

pub fn make_dataset(count: usize, spec: &PhantomSpec, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::Config(format!("dataset count must be at least 2, got {count}")));
    }
    spec.validate()?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| rng::derive(seed, i)).collect();
    let pairs = crate::par::map_range(count, |i| {
        generate_phantom(spec, seeds[i]).map(|(mask, image)| PhantomPair { id: format!("case_{i:03}"), seed: seeds[i], mask, image })
    });
    let mut pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let (n_train, _) = split_sizes(count);
    let val = pairs.split_off(n_train);
    Ok(Dataset { spec: spec.clone(), seed, train: pairs, val })
}

/// Mean symmetric distance (voxels) between each label's in-plane boundary
/// on adjacent axial slices, over all labels and slice pairs where the label
/// is present in both.
pub fn boundary_displacement(mask: &MaskVolume) -> f64 {
    let [d, h, w] = mask.dims();
    let vox = mask.voxels();
    let boundary = |z: usize, lab: u8| -> Vec<(f64, f64)> {
        let plane = vox.axial(z);
        let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && plane[y as usize * w + x as usize] == lab;
        let mut pts = vec![];
        for y in 0..h as isize {
            for x in 0..w as isize {
                if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                    pts.push((y as f64, x as f64));
                }
            }
        }
        pts
    };
    let mean_nearest = |a: &[(f64, f64)], b: &[(f64, f64)]| -> f64 {
        a.iter().map(|p| b.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
    };
    let (mut total, mut count) = (0.0, 0usize);
    for &lab in mask.label_set().iter().filter(|&&l| l != 0) {
        let mut prev = boundary(0, lab);
        for z in 1..d {
            let cur = boundary(z, lab);
            if !prev.is_empty() && !cur.is_empty() {
                total += 0.5 * (mean_nearest(&prev, &cur) + mean_nearest(&cur, &prev));
                count += 1;
            }
            prev = cur;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
