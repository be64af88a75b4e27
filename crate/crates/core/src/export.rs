//! PNG contact sheets of every slice along each view.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use crate::error::Result;
use crate::volume::{ImageVolume, MaskVolume, View, Volume};

/// Tile all slices of `vol` along `view` into a near-square grid, mapping
/// values through `to_byte`. Tiles are separated by a one-pixel gap.
pub fn slice_grid<T: Copy + Default>(vol: &Volume<T>, view: View, to_byte: impl Fn(T) -> u8) -> GrayImage {
    let (count, rows, cols) = view.geometry(vol.dims());
    let grid_cols = (count as f64).sqrt().ceil() as usize;
    let grid_rows = count.div_ceil(grid_cols);
    let (tw, th) = (cols + 1, rows + 1);
    let mut img = GrayImage::new((grid_cols * tw) as u32, (grid_rows * th) as u32);
    for (i, s) in vol.slices(view).iter().enumerate() {
        let (gy, gx) = (i / grid_cols, i % grid_cols);
        for r in 0..rows {
            for c in 0..cols {
                img.put_pixel((gx * tw + c) as u32, (gy * th + r) as u32, Luma([to_byte(s[r * cols + c])]));
            }
        }
    }
    img
}

pub fn image_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Evenly spread gray levels over the label set.
pub fn mask_byte(mask: &MaskVolume) -> impl Fn(u8) -> u8 {
    let max = mask.label_set().iter().copied().max().unwrap_or(0).max(1) as f64;
    move |l| (l as f64 / max * 255.0).round() as u8
}

/// Write `<prefix>_<kind>_<view>.png` grids for the provided volumes.
pub fn export_slices(out_dir: &Path, prefix: &str, mask: Option<&MaskVolume>, image: Option<&ImageVolume>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for view in View::ALL {
        if let Some(m) = mask {
            let p = out_dir.join(format!("{prefix}_mask_{}.png", view.name()));
            slice_grid(m.voxels(), view, mask_byte(m)).save(&p)?;
            written.push(p);
        }
        if let Some(i) = image {
            let p = out_dir.join(format!("{prefix}_image_{}.png", view.name()));
            slice_grid(i.volume(), view, image_byte).save(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}
