//! Seeded synthetic scenes: colored objects on a noisy gradient. Structural
//! defects damage pixels locally; logical defects remove, duplicate or move
//! whole objects while leaving every other pixel identical to the normal
//! scene drawn from the same seed.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetLayout, GOOD};
use crate::error::{Error, Result};

pub const STRUCTURAL_FOLDER: &str = "structural_anomalies";
pub const LOGICAL_FOLDER: &str = "logical_anomalies";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Canonical centre `[x, y]` in pixels.
    pub center: [f64; 2],
    /// Half-extent in pixels.
    pub radius: f64,
}

impl ObjectSpec {
    fn covers(&self, center: (f64, f64), x: usize, y: usize) -> bool {
        let dx = (x as f64 - center.0).abs();
        let dy = (y as f64 - center.1).abs();
        let r = self.radius;
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx <= r && dy <= r,
            ShapeKind::Diamond => dx + dy <= r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub canvas: usize,
    pub objects: Vec<ObjectSpec>,
    /// Gradient end colors (top-left, bottom-right).
    pub background: [[u8; 3]; 2],
    /// Maximum per-object position jitter, in whole pixels.
    pub jitter: i32,
    /// Standard deviation of the per-pixel noise, in gray levels.
    pub noise: f64,
    pub scratch_length: [f64; 2],
    pub scratch_width: f64,
    pub patch_size: [usize; 2],
    pub displacement: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        let obj = |shape, color, x, y| ObjectSpec {
            shape,
            color,
            center: [x, y],
            radius: 12.0,
        };
        Self {
            canvas: 128,
            objects: vec![
                obj(ShapeKind::Circle, [200, 40, 40], 32.0, 32.0),
                obj(ShapeKind::Square, [40, 170, 60], 96.0, 32.0),
                obj(ShapeKind::Diamond, [50, 70, 210], 32.0, 96.0),
                obj(ShapeKind::Circle, [220, 200, 40], 96.0, 96.0),
            ],
            background: [[90, 90, 100], [150, 150, 160]],
            jitter: 2,
            noise: 4.0,
            scratch_length: [30.0, 60.0],
            scratch_width: 2.0,
            patch_size: [10, 18],
            displacement: 24.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.objects.is_empty() {
            return bad("the object inventory is empty".into());
        }
        if self.canvas < 16 {
            return bad(format!("canvas {} is too small", self.canvas));
        }
        if self.jitter < 0 || !(self.noise >= 0.0) || !(self.scratch_width > 0.0) {
            return bad("jitter, noise and scratch width must be non-negative".into());
        }
        if !(self.scratch_length[0] > 0.0 && self.scratch_length[0] <= self.scratch_length[1]) {
            return bad("scratch_length must be an increasing positive range".into());
        }
        if self.patch_size[0] == 0
            || self.patch_size[0] > self.patch_size[1]
            || self.patch_size[1] > self.canvas
        {
            return bad("patch_size must be an increasing range within the canvas".into());
        }
        for o in &self.objects {
            if !(o.radius > 0.0) {
                return bad(format!("object radius {} must be positive", o.radius));
            }
        }
        Ok(())
    }

    /// The grid point farthest from every canonical object centre; duplicates
    /// land here and displaced objects move towards it.
    fn free_slot(&self) -> (f64, f64) {
        let n = 9;
        let c = self.canvas as f64;
        let mut best = (c / 2.0, c / 2.0, f64::MIN);
        for i in 1..n {
            for j in 1..n {
                let (x, y) = (c * i as f64 / n as f64, c * j as f64 / n as f64);
                let d = self
                    .objects
                    .iter()
                    .map(|o| (o.center[0] - x).hypot(o.center[1] - y) - o.radius)
                    .fold(f64::MAX, f64::min);
                if d > best.2 {
                    best = (x, y, d);
                }
            }
        }
        (best.0, best.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralDefect {
    Scratch,
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicalDefect {
    Missing,
    Duplicate,
    Displaced,
}

/// A rendered image and the pixels its defect altered (all false for
/// normal scenes).
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: RgbImage,
    pub mask: Vec<bool>,
}

impl Rendered {
    pub fn mask_image(&self) -> GrayImage {
        let (w, h) = self.image.dimensions();
        GrayImage::from_fn(w, h, |x, y| {
            Luma([if self.mask[(y * w + x) as usize] { 255 } else { 0 }])
        })
    }
}

struct Scene {
    centers: Vec<(f64, f64)>,
    noise: Vec<f64>,
}

fn scene_rng(spec: &SyntheticSceneSpec, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    rng
}

fn sample_scene(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let j = spec.jitter;
    let centers = spec
        .objects
        .iter()
        .map(|o| {
            let dx = rng.gen_range(-j..=j) as f64;
            let dy = rng.gen_range(-j..=j) as f64;
            (o.center[0] + dx, o.center[1] + dy)
        })
        .collect();
    let n = spec.canvas * spec.canvas * 3;
    let noise = if spec.noise > 0.0 {
        let dist = Normal::new(0.0, spec.noise).expect("validated noise level");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Scene { centers, noise }
}

/// Draw objects `(inventory index, centre)` in order over the background,
/// then add the scene noise.
fn compose(spec: &SyntheticSceneSpec, placements: &[(usize, (f64, f64))], noise: &[f64]) -> RgbImage {
    let s = spec.canvas;
    let [a, b] = spec.background;
    RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let t = (x + y) as f64 / (2 * (s - 1)) as f64;
        let mut c = [0f64; 3];
        for k in 0..3 {
            c[k] = a[k] as f64 * (1.0 - t) + b[k] as f64 * t;
        }
        for &(i, centre) in placements {
            let o = &spec.objects[i];
            if o.covers(centre, x, y) {
                c = o.color.map(f64::from);
            }
        }
        let base = (y * s + x) * 3;
        Rgb(std::array::from_fn(|k| {
            (c[k] + noise[base + k]).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn footprint(spec: &SyntheticSceneSpec, obj: usize, centre: (f64, f64), mask: &mut [bool]) {
    let s = spec.canvas;
    for y in 0..s {
        for x in 0..s {
            if spec.objects[obj].covers(centre, x, y) {
                mask[y * s + x] = true;
            }
        }
    }
}

fn normal_placements(scene: &Scene) -> Vec<(usize, (f64, f64))> {
    scene.centers.iter().copied().enumerate().collect()
}

/// The normal scene of `stream`.
pub fn render_normal(spec: &SyntheticSceneSpec, stream: u64) -> Result<Rendered> {
    spec.validate()?;
    let scene = sample_scene(spec, &mut scene_rng(spec, stream));
    Ok(Rendered {
        image: compose(spec, &normal_placements(&scene), &scene.noise),
        mask: vec![false; spec.canvas * spec.canvas],
    })
}

/// The normal scene of `stream` with one object removed, duplicated or
/// displaced. The mask is the union of the affected object footprints.
pub fn render_logical(spec: &SyntheticSceneSpec, stream: u64, defect: LogicalDefect) -> Result<Rendered> {
    spec.validate()?;
    let mut rng = scene_rng(spec, stream);
    let scene = sample_scene(spec, &mut rng);
    let target = rng.gen_range(0..spec.objects.len());
    let mut placements = normal_placements(&scene);
    let mut mask = vec![false; spec.canvas * spec.canvas];
    let old = scene.centers[target];
    let slot = spec.free_slot();
    match defect {
        LogicalDefect::Missing => {
            placements.remove(target);
            footprint(spec, target, old, &mut mask);
        }
        LogicalDefect::Duplicate => {
            placements.push((target, slot));
            footprint(spec, target, slot, &mut mask);
        }
        LogicalDefect::Displaced => {
            let (dx, dy) = (slot.0 - old.0, slot.1 - old.1);
            let len = dx.hypot(dy).max(1e-9);
            let step = spec.displacement.min(len);
            let new = (
                (old.0 + dx / len * step).round(),
                (old.1 + dy / len * step).round(),
            );
            placements[target].1 = new;
            footprint(spec, target, old, &mut mask);
            footprint(spec, target, new, &mut mask);
        }
    }
    Ok(Rendered {
        image: compose(spec, &placements, &scene.noise),
        mask,
    })
}

/// The normal scene of `stream` with a scratch or an occluding patch painted
/// on top. The mask is exactly the painted pixels.
pub fn render_structural(
    spec: &SyntheticSceneSpec,
    stream: u64,
    defect: StructuralDefect,
) -> Result<Rendered> {
    spec.validate()?;
    let mut rng = scene_rng(spec, stream);
    let scene = sample_scene(spec, &mut rng);
    let mut image = compose(spec, &normal_placements(&scene), &scene.noise);
    let s = spec.canvas;
    let mut mask = vec![false; s * s];
    let light: bool = rng.gen();
    match defect {
        StructuralDefect::Scratch => {
            let len = rng.gen_range(spec.scratch_length[0]..=spec.scratch_length[1]);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (ux, uy) = (angle.cos(), angle.sin());
            let margin = len / 2.0;
            let lo = margin.min(s as f64 / 2.0);
            let hi = (s as f64 - margin).max(lo + 1.0);
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let half_w = spec.scratch_width / 2.0;
            let color = if light { [235u8, 235, 230] } else { [25u8, 25, 30] };
            for y in 0..s {
                for x in 0..s {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let along = (px * ux + py * uy).clamp(-len / 2.0, len / 2.0);
                    let d = (px - along * ux).hypot(py - along * uy);
                    if d <= half_w {
                        mask[y * s + x] = true;
                        image.put_pixel(x as u32, y as u32, Rgb(color));
                    }
                }
            }
        }
        StructuralDefect::Patch => {
            let size = rng.gen_range(spec.patch_size[0]..=spec.patch_size[1]);
            let x0 = rng.gen_range(0..=s - size);
            let y0 = rng.gen_range(0..=s - size);
            let (c0, c1) = if light {
                ([240u8, 240, 240], [120u8, 60, 20])
            } else {
                ([20u8, 20, 20], [200u8, 120, 200])
            };
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let cell = ((x - x0) / 2 + (y - y0) / 2) % 2 == 0;
                    mask[y * s + x] = true;
                    image.put_pixel(x as u32, y as u32, Rgb(if cell { c0 } else { c1 }));
                }
            }
        }
    }
    Ok(Rendered { image, mask })
}

/// Number of images per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCounts {
    pub train: usize,
    pub validation: usize,
    pub test_good: usize,
    pub structural: usize,
    pub logical: usize,
}

impl Default for SyntheticCounts {
    fn default() -> Self {
        Self {
            train: 40,
            validation: 10,
            test_good: 20,
            structural: 20,
            logical: 20,
        }
    }
}

// stream tags; each image draws from its own ChaCha stream
const TAG_TRAIN: u64 = 1;
const TAG_VALID: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_STRUCT: u64 = 4;
const TAG_LOGIC: u64 = 5;

fn stream(tag: u64, index: usize) -> u64 {
    (tag << 32) | index as u64
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::image(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write a complete benchmark-layout dataset under `root`.
pub fn generate_synthetic(
    spec: &SyntheticSceneSpec,
    counts: &SyntheticCounts,
    root: &Path,
) -> Result<DatasetLayout> {
    spec.validate()?;
    if counts.train == 0 || counts.validation == 0 {
        return Err(Error::Config(
            "synthetic dataset needs training and validation images".into(),
        ));
    }
    for (split, tag, n) in [
        ("train", TAG_TRAIN, counts.train),
        ("validation", TAG_VALID, counts.validation),
        ("test", TAG_TEST, counts.test_good),
    ] {
        let dir = root.join(split).join(GOOD);
        mkdir(&dir)?;
        for i in 0..n {
            save_rgb(
                &render_normal(spec, stream(tag, i))?.image,
                &dir.join(format!("{i:03}.png")),
            )?;
        }
    }
    for (folder, n) in [
        (STRUCTURAL_FOLDER, counts.structural),
        (LOGICAL_FOLDER, counts.logical),
    ] {
        if n == 0 {
            continue;
        }
        let img_dir = root.join("test").join(folder);
        let gt_dir = root.join("ground_truth").join(folder);
        mkdir(&img_dir)?;
        mkdir(&gt_dir)?;
        for i in 0..n {
            let r = if folder == STRUCTURAL_FOLDER {
                let kind = [StructuralDefect::Scratch, StructuralDefect::Patch][i % 2];
                render_structural(spec, stream(TAG_STRUCT, i), kind)?
            } else {
                let kind = [
                    LogicalDefect::Missing,
                    LogicalDefect::Duplicate,
                    LogicalDefect::Displaced,
                ][i % 3];
                render_logical(spec, stream(TAG_LOGIC, i), kind)?
            };
            save_rgb(&r.image, &img_dir.join(format!("{i:03}.png")))?;
            let mask_path = gt_dir.join(format!("{i:03}_mask.png"));
            r.mask_image()
                .save(&mask_path)
                .map_err(|e| Error::image(&mask_path, e))?;
        }
    }
    DatasetLayout::open(root)
}
