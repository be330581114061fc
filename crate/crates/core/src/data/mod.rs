//! MVTec-style dataset directories and the synthetic scene generator.
//!
//! Layout under a category root:
//!
//! ```text
//! train/good/*.png
//! validation/good/*.png          (optional)
//! test/<defect>/*.png            ("good" holds normal test images)
//! ground_truth/<defect>/<stem>_mask.png   or   ground_truth/<defect>/<stem>/*.png
//! ```

mod synthetic;

pub use synthetic::{
    generate_synthetic, render_logical, render_normal, render_structural, LogicalDefect, ObjectSpec,
    Rendered, ShapeKind, StructuralDefect, SyntheticCounts, SyntheticSceneSpec, LOGICAL_FOLDER,
    STRUCTURAL_FOLDER,
};

use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::ImageTensor;

pub const GOOD: &str = "good";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn folder(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One image on disk with its label and ground-truth files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// `<split>/<defect>/<stem>`, unique within a dataset.
    pub id: String,
    pub path: PathBuf,
    pub defect: String,
    pub anomalous: bool,
    /// Mask files whose union is the ground truth; empty for normal images
    /// and for anomalous images in mask-optional mode.
    pub masks: Vec<PathBuf>,
}

/// Binary ground truth, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|v| *v)
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// A category directory in the benchmark layout.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "dataset root {} is not a directory",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn category(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    }

    fn good_images(&self, split: Split) -> Result<Option<Vec<Sample>>> {
        let dir = self.root.join(split.folder()).join(GOOD);
        if !dir.is_dir() {
            return Ok(None);
        }
        let samples = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .map(|path| Sample {
                id: format!("{}/{GOOD}/{}", split.folder(), stem(&path)),
                path,
                defect: GOOD.into(),
                anomalous: false,
                masks: Vec::new(),
            })
            .collect();
        Ok(Some(samples))
    }

    /// Normal training images; a missing or empty `train/good` is a data error.
    pub fn train(&self) -> Result<Vec<Sample>> {
        match self.good_images(Split::Train)? {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::Data(format!(
                "no training images under {}",
                self.root.join("train/good").display()
            ))),
        }
    }

    /// Images of `validation/good`, if that folder exists.
    pub fn validation(&self) -> Result<Option<Vec<Sample>>> {
        self.good_images(Split::Validation)
    }

    /// Training and validation samples. Without a validation folder, a seeded
    /// `holdout` fraction of the training images is set aside.
    pub fn train_validation(&self, holdout: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let train = self.train()?;
        match self.validation()? {
            Some(v) if !v.is_empty() => Ok((train, v)),
            _ => split_holdout(train, holdout, seed),
        }
    }

    /// Test images over all defect folders, with ground truth resolved.
    pub fn test(&self, mask_optional: bool) -> Result<Vec<Sample>> {
        let dir = self.root.join(Split::Test.folder());
        if !dir.is_dir() {
            return Err(Error::Data(format!("no test folder at {}", dir.display())));
        }
        let mut out = Vec::new();
        for defect_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let defect = stem(&defect_dir);
            let anomalous = defect != GOOD;
            for path in sorted_entries(&defect_dir)?.into_iter().filter(|p| is_image(p)) {
                let s = stem(&path);
                let masks = if anomalous {
                    self.mask_files(&defect, &s, mask_optional)?
                } else {
                    Vec::new()
                };
                out.push(Sample {
                    id: format!("test/{defect}/{s}"),
                    path,
                    defect: defect.clone(),
                    anomalous,
                    masks,
                });
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!("no test images under {}", dir.display())));
        }
        Ok(out)
    }

    fn mask_files(&self, defect: &str, stem: &str, optional: bool) -> Result<Vec<PathBuf>> {
        let gt = self.root.join("ground_truth").join(defect);
        let single = gt.join(format!("{stem}_mask.png"));
        if single.is_file() {
            return Ok(vec![single]);
        }
        let dir = gt.join(stem);
        if dir.is_dir() {
            let files: Vec<PathBuf> = sorted_entries(&dir)?
                .into_iter()
                .filter(|p| is_image(p))
                .collect();
            if !files.is_empty() {
                return Ok(files);
            }
        }
        if optional {
            log::warn!("no ground truth for test/{defect}/{stem}");
            Ok(Vec::new())
        } else {
            Err(Error::Data(format!(
                "missing ground truth for anomalous image test/{defect}/{stem} (looked for {} and {})",
                single.display(),
                dir.display()
            )))
        }
    }
}

/// Deterministically move `ceil(fraction * n)` (at least one) samples to a
/// validation set.
pub fn split_holdout(samples: Vec<Sample>, fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::Data(
            "need at least two training images to hold out validation data".into(),
        ));
    }
    let n_val = ((fraction * samples.len() as f64).ceil() as usize).clamp(1, samples.len() - 1);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx: Vec<usize> = idx[..n_val].to_vec();
    val_idx.sort_unstable();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if val_idx.binary_search(&i).is_ok() {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

/// Pixel dimensions `(height, width)` of an image file.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    Ok((h as usize, w as usize))
}

/// Ground truth of `sample` at its image's resolution: the union of its mask
/// files (nonzero = anomalous), or all-normal when there are none.
pub fn load_mask(sample: &Sample) -> Result<Mask> {
    let (h, w) = image_dims(&sample.path)?;
    let mut mask = Mask::empty(h, w);
    for p in &sample.masks {
        let img = image::open(p).map_err(|e| Error::image(p, e))?.to_luma8();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(Error::Data(format!(
                "mask {} is {}x{} but its image is {h}x{w}",
                p.display(),
                img.height(),
                img.width()
            )));
        }
        for (m, px) in mask.data.iter_mut().zip(img.pixels()) {
            *m |= px[0] != 0;
        }
    }
    if sample.anomalous && !sample.masks.is_empty() && !mask.any() {
        log::warn!("ground truth of {} is empty", sample.id);
    }
    Ok(mask)
}

/// Load and preprocess images in order.
pub fn load_images(samples: &[Sample], size: usize, device: &Device) -> Result<Vec<ImageTensor>> {
    samples
        .iter()
        .map(|s| ImageTensor::load(&s.path, size, device))
        .collect()
}
