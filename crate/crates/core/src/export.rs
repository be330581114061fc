//! Map files: raw `.npy` arrays and color heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::inference::AnomalyMap;

/// Write the map as a 2-D float64 `.npy` array.
pub fn write_npy(map: &AnomalyMap, path: &Path) -> Result<()> {
    let arr = Array2::from_shape_vec((map.height(), map.width()), map.data().to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))
}

/// Jet-style color for `v` clamped to [0, 1].
pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let ramp = |c: f64| ((1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// Render on a fixed 0-to-1 color scale: calibrated normal pixels (<= 0)
/// are dark blue, values >= 1 saturate to dark red.
pub fn heatmap(map: &AnomalyMap) -> RgbImage {
    let w = map.width();
    RgbImage::from_fn(w as u32, map.height() as u32, |x, y| {
        Rgb(colormap(map.data()[y as usize * w + x as usize]))
    })
}

pub fn write_heatmap(map: &AnomalyMap, path: &Path) -> Result<()> {
    heatmap(map).save(path).map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::MapKind;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 128]);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(1.0), [128, 0, 0]);
        assert_eq!(colormap(0.5), [128, 255, 128]);
    }

    #[test]
    fn npy_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let m = AnomalyMap::new(2, 3, vec![0.0, 0.1, 0.2, -1.0, 5.0, 0.5], MapKind::Combined, true).unwrap();
        let p = d.path().join("m.npy");
        write_npy(&m, &p).unwrap();
        let back: Array2<f64> = ndarray_npy::read_npy(&p).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.iter().copied().collect::<Vec<_>>(), m.data());
        let hp = d.path().join("m.png");
        write_heatmap(&m, &hp).unwrap();
        assert_eq!(image::image_dimensions(&hp).unwrap(), (3, 2));
    }
}
