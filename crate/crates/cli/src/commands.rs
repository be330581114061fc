use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use candle_core::Device;
use serde::Serialize;
use ulsad_core::checkpoint::{load_bundle, save_bundle};
use ulsad_core::data::{
    generate_synthetic, image_dims, load_images, load_mask, DatasetLayout, Sample, SyntheticCounts,
    SyntheticSceneSpec, GOOD,
};
use ulsad_core::export::{write_heatmap, write_npy};
use ulsad_core::features::{FeatureExtractor, ImageTensor};
use ulsad_core::inference::{AnomalyMap, Detector, InferenceConfig, Prediction};
use ulsad_core::metrics::{aupro, auroc, pixel_auroc, MaskedMap, DEFAULT_FPR_LIMIT};
use ulsad_core::model::ModelBundle;
use ulsad_core::trainer::train;

use crate::config::RunConfig;
use crate::report::{MetricRow, Table};

/// One row of a results file. `label` is empty when unknown.
#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    id: &'a str,
    score: f64,
    label: Option<u8>,
}

fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        ulsad_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub struct SynthArgs {
    pub output: PathBuf,
    pub scene: Option<PathBuf>,
    pub seed: Option<u64>,
    pub counts: SyntheticCounts,
}

pub fn synth_gen(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.scene {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticSceneSpec>(&text)
                .map_err(|e| ulsad_core::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let layout = generate_synthetic(&spec, &a.counts, &a.output)?;
    let dump = toml::to_string_pretty(&spec)?;
    std::fs::write(a.output.join("scene.toml"), dump)?;
    println!(
        "wrote {} ({} train, {} validation, {} test images)",
        layout.root().display(),
        a.counts.train,
        a.counts.validation,
        a.counts.test_good + a.counts.structural + a.counts.logical
    );
    Ok(())
}

fn validation_set(cfg: &RunConfig, layout: &DatasetLayout) -> Result<(Vec<Sample>, Vec<Sample>)> {
    Ok(layout.train_validation(cfg.data.validation_holdout, cfg.data.split_seed)?)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    cfg.train.validate()?;
    let layout = DatasetLayout::open(cfg.data_root()?)?;
    let (train_s, val_s) = validation_set(cfg, &layout)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let dumped = cfg.dump(out, "train_config.toml")?;
    log::info!(
        "{}: {} training images ({} held for calibration)",
        layout.category(),
        train_s.len(),
        val_s.len()
    );
    let dev = Device::Cpu;
    let ex = FeatureExtractor::new(&model_cfg.backbone, &dev)?;
    let images = load_images(&train_s, model_cfg.backbone.image_size, &dev)?;
    let t0 = Instant::now();
    let (model, log) = train(&ex, &model_cfg, &images, &cfg.train)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_bundle(&model, &ckpt)?;
    let mut w = csv::Writer::from_path(out.join("train_steps.csv"))?;
    for s in &log.steps {
        w.serialize(s)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("train_epochs.csv"))?;
    for e in &log.epochs {
        w.serialize(e)?;
    }
    w.flush()?;
    if let Some(last) = log.epochs.last() {
        println!(
            "trained {} epochs in {:.1}s, final loss {:.5} (local {:.5}, global {:.5}, coupling {:.5})",
            log.epochs.len(),
            t0.elapsed().as_secs_f64(),
            last.total,
            last.local,
            last.global,
            last.coupling
        );
    }
    println!("checkpoint: {}", ckpt.display());
    println!("config: {}", dumped.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(FeatureExtractor, ModelBundle)> {
    let dev = Device::Cpu;
    let model = load_bundle(path, None, &dev)?;
    let ex = FeatureExtractor::new(&model.config().backbone, &dev)?;
    log::debug!("loaded {} ({})", path.display(), model.fingerprint());
    Ok((ex, model))
}

pub fn calibrate_cmd(cfg: &RunConfig) -> Result<()> {
    cfg.inference.validate()?;
    let layout = DatasetLayout::open(cfg.data_root()?)?;
    let ckpt = cfg.checkpoint_path();
    let (ex, mut model) = load_model(&ckpt)?;
    let (_, val_s) = validation_set(cfg, &layout)?;
    let images = load_images(&val_s, model.config().backbone.image_size, model.device())?;
    let cal = Detector::new(&ex, &model)?.calibrate(&images, &cfg.inference)?;
    println!(
        "calibrated on {} images: local q_alpha {:.6} q_beta {:.6}, global q_alpha {:.6} q_beta {:.6}",
        images.len(),
        cal.q_alpha_l,
        cal.q_beta_l,
        cal.q_alpha_g,
        cal.q_beta_g
    );
    model.calibration = Some(cal);
    save_bundle(&model, &ckpt)?;
    cfg.dump(&cfg.output_dir, "calibrate_config.toml")?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// Predictions for `paths`, loading one inference batch at a time.
fn predict_samples(
    det: &Detector,
    paths: &[PathBuf],
    icfg: &InferenceConfig,
    mut each: impl FnMut(usize, Prediction) -> Result<()>,
) -> Result<()> {
    let size = det.model.config().backbone.image_size;
    let mut idx = 0;
    for chunk in paths.chunks(icfg.batch_size) {
        let images: Vec<ImageTensor> = chunk
            .iter()
            .map(|p| ImageTensor::load(p, size, det.model.device()))
            .collect::<Result<_, _>>()?;
        let sizes: Vec<(usize, usize)> = chunk.iter().map(|p| image_dims(p)).collect::<Result<_, _>>()?;
        for p in det.predict(&images, &sizes, icfg)? {
            each(idx, p)?;
            idx += 1;
        }
    }
    Ok(())
}

fn metric(v: ulsad_core::Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(v) => Ok(Some(v)),
        // undefined for single-class subsets
        Err(ulsad_core::Error::Metric(m)) => {
            log::debug!("metric undefined: {m}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn subset_row(
    category: &str,
    subset: &str,
    idx: &[usize],
    scores: &[f64],
    labels: &[bool],
    maps: &[MaskedMap],
) -> Result<MetricRow> {
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    let m: Vec<MaskedMap> = idx.iter().map(|&i| maps[i].clone()).collect();
    Ok(MetricRow {
        category: category.to_string(),
        subset: subset.to_string(),
        images: idx.len(),
        image_auroc: metric(auroc(&s, &l))?,
        pixel_auroc: metric(pixel_auroc(&m))?,
        aupro: metric(aupro(&m, DEFAULT_FPR_LIMIT))?,
    })
}

/// Evaluate one checkpoint per dataset root.
pub fn evaluate_cmd(cfg: &RunConfig, checkpoints: &[PathBuf], roots: &[PathBuf]) -> Result<()> {
    cfg.inference.validate()?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut table = Table::default();
    let mut results = Vec::new();
    for (ckpt, root) in checkpoints.iter().zip(roots) {
        let layout = DatasetLayout::open(root)?;
        let category = layout.category();
        let test = layout.test(false)?;
        let (ex, model) = load_model(ckpt)?;
        let det = Detector::new(&ex, &model)?;
        let paths: Vec<PathBuf> = test.iter().map(|s| s.path.clone()).collect();
        let mut scores = vec![0.0; test.len()];
        let mut maps = Vec::with_capacity(test.len());
        predict_samples(&det, &paths, &cfg.inference, |i, p| {
            let mask = load_mask(&test[i])?;
            scores[i] = p.score;
            maps.push(MaskedMap::new(
                mask.height,
                mask.width,
                p.combined.data().to_vec(),
                mask.data,
            )?);
            Ok(())
        })?;
        let labels: Vec<bool> = test.iter().map(|s| s.anomalous).collect();
        let mut folders: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in test.iter().enumerate() {
            folders.entry(s.defect.as_str()).or_default().push(i);
        }
        let good = folders.get(GOOD).cloned().unwrap_or_default();
        for (folder, idx) in folders.iter().filter(|(f, _)| **f != GOOD) {
            let mut subset = good.clone();
            subset.extend(idx);
            table
                .rows
                .push(subset_row(&category, folder, &subset, &scores, &labels, &maps)?);
        }
        let all: Vec<usize> = (0..test.len()).collect();
        table
            .categories
            .push(subset_row(&category, "all", &all, &scores, &labels, &maps)?);
        for (i, s) in test.iter().enumerate() {
            results.push((format!("{category}/{}", s.id), scores[i], s.anomalous));
        }
    }
    let rows: Vec<ResultRow> = results
        .iter()
        .map(|(id, score, l)| ResultRow {
            id,
            score: *score,
            label: Some(*l as u8),
        })
        .collect();
    write_results(&out.join("results.csv"), &rows)?;
    table.write_csv(&out.join("metrics.csv"))?;
    cfg.dump(out, "evaluate_config.toml")?;
    print!("{}", table.render());
    Ok(())
}

pub fn predict_cmd(cfg: &RunConfig, images: &[PathBuf], emit_branch_maps: bool) -> Result<()> {
    cfg.inference.validate()?;
    // fail on a bad path before loading the model
    for p in images {
        image_dims(p)?;
    }
    let out = &cfg.output_dir;
    create_dir(out)?;
    let (ex, model) = load_model(&cfg.checkpoint_path())?;
    let det = Detector::new(&ex, &model)?;
    let names = unique_stems(images);
    let mut scores = Vec::with_capacity(images.len());
    predict_samples(&det, images, &cfg.inference, |i, p| {
        let name = &names[i];
        let write = |m: &AnomalyMap, suffix: &str| -> Result<()> {
            write_npy(m, &out.join(format!("{name}{suffix}.npy")))?;
            write_heatmap(m, &out.join(format!("{name}{suffix}.png")))?;
            Ok(())
        };
        write(&p.combined, "")?;
        if emit_branch_maps {
            write(&p.local, "_local")?;
            write(&p.global, "_global")?;
            write(&p.combined, "_combined")?;
        }
        println!("{}\t{:.6}", images[i].display(), p.score);
        scores.push(p.score);
        Ok(())
    })?;
    let ids: Vec<String> = images.iter().map(|p| p.display().to_string()).collect();
    let rows: Vec<ResultRow> = ids
        .iter()
        .zip(&scores)
        .map(|(id, s)| ResultRow {
            id,
            score: *s,
            label: None,
        })
        .collect();
    write_results(&out.join("scores.csv"), &rows)?;
    cfg.dump(out, "predict_config.toml")?;
    Ok(())
}

/// File stems, suffixed with `_N` where two inputs share one.
fn unique_stems(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let n = seen.entry(stem.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{}", *n - 1)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_made_unique() {
        let p: Vec<PathBuf> = ["a/x.png", "b/x.png", "c/y.png", "d/x.png"]
            .iter()
            .map(PathBuf::from)
            .collect();
        assert_eq!(unique_stems(&p), ["x", "x_1", "y", "x_2"]);
    }
}
