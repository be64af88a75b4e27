//! Dense `D x H x W` volumes and views along each axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which volume axis is treated as the slice axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Slices along depth (axis 0); planes are `H x W`.
    Axial,
    /// Slices along height (axis 1); planes are `D x W`.
    Coronal,
    /// Slices along width (axis 2); planes are `D x H`.
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    pub fn axis(self) -> usize {
        match self {
            View::Axial => 0,
            View::Coronal => 1,
            View::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }

    /// Number of slices and plane shape `(rows, cols)` for a volume.
    pub fn geometry(self, dims: [usize; 3]) -> (usize, usize, usize) {
        let [d, h, w] = dims;
        match self {
            View::Axial => (d, h, w),
            View::Coronal => (h, d, w),
            View::Sagittal => (w, d, h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Config(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(&dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Axial slice `z` as a contiguous plane.
    pub fn axial(&self, z: usize) -> &[T] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }

    /// Slice `i` along `view`, row-major over the plane shape reported by
    /// [`View::geometry`].
    pub fn slice(&self, view: View, i: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        match view {
            View::Axial => self.axial(i).to_vec(),
            View::Coronal => (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| self.get(z, i, x)).collect(),
            View::Sagittal => (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| self.get(z, y, i)).collect(),
        }
    }

    pub fn slices(&self, view: View) -> Vec<Vec<T>> {
        let (count, ..) = view.geometry(self.dims);
        (0..count).map(|i| self.slice(view, i)).collect()
    }

    /// Inverse of [`Volume::slices`].
    pub fn from_slices(view: View, dims: [usize; 3], slices: &[Vec<T>]) -> Result<Self> {
        let (count, rows, cols) = view.geometry(dims);
        if slices.len() != count || slices.iter().any(|s| s.len() != rows * cols) {
            return Err(Error::shape(&[count, rows * cols], &[slices.len(), slices.first().map_or(0, Vec::len)]));
        }
        let mut vol = Self::filled(dims, T::default());
        for (i, s) in slices.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    let (z, y, x) = match view {
                        View::Axial => (i, r, c),
                        View::Coronal => (r, i, c),
                        View::Sagittal => (r, c, i),
                    };
                    let idx = vol.index(z, y, x);
                    vol.data[idx] = s[r * cols + c];
                }
            }
        }
        Ok(vol)
    }

    /// Stack equally sized axial planes.
    pub fn from_axial(h: usize, w: usize, planes: &[Vec<T>]) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.len() != h * w {
                return Err(Error::shape(&[h * w], &[p.len()]));
            }
            data.extend_from_slice(p);
        }
        Self::new([planes.len(), h, w], data)
    }
}

/// Discrete-label volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskVolume {
    voxels: Volume<u8>,
    label_set: Vec<u8>,
}

impl MaskVolume {
    /// Every voxel must carry a label from `label_set` (which must include 0).
    pub fn new(voxels: Volume<u8>, mut label_set: Vec<u8>) -> Result<Self> {
        label_set.sort_unstable();
        label_set.dedup();
        if label_set.first() != Some(&0) {
            return Err(Error::Config("label set must contain background label 0".into()));
        }
        if let Some(&bad) = voxels.data().iter().find(|v| label_set.binary_search(v).is_err()) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self { voxels, label_set })
    }

    pub fn voxels(&self) -> &Volume<u8> {
        &self.voxels
    }

    pub fn label_set(&self) -> &[u8] {
        &self.label_set
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }

    /// Fraction of each axial slice occupied by `label`.
    pub fn occupancy_profile(&self, label: u8) -> Vec<f64> {
        let [d, h, w] = self.dims();
        (0..d).map(|z| self.voxels.axial(z).iter().filter(|&&v| v == label).count() as f64 / (h * w) as f64).collect()
    }
}

/// Continuous-intensity volume with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVolume(Volume<f32>);

impl ImageVolume {
    pub fn new(v: Volume<f32>) -> Result<Self> {
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("image volume contains non-finite values".into()));
        }
        Ok(Self(v))
    }

    /// Clamp into `[-1, 1]`; NaN becomes 0.
    pub fn clamped(mut v: Volume<f32>) -> Self {
        for x in v.data_mut() {
            *x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
        }
        Self(v)
    }

    pub fn volume(&self) -> &Volume<f32> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<f32> {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn in_range(&self) -> bool {
        self.0.data().iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x))
    }
}
