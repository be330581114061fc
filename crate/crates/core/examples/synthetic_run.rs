//! Train, calibrate and evaluate on a freshly generated synthetic dataset.
//!
//! Knobs (environment): SYN_WIDTH, SYN_EPOCHS, SYN_LR, SYN_BATCH, SYN_ARCH,
//! SYN_SEED, SYN_SIGMA.

use std::time::Instant;

use candle_core::Device;
use ulsad_core::data::{generate_synthetic, load_images, load_mask, SyntheticCounts, SyntheticSceneSpec};
use ulsad_core::features::{Architecture, BackboneConfig, FeatureExtractor, WeightsSource};
use ulsad_core::inference::{Detector, InferenceConfig};
use ulsad_core::metrics::{aupro, auroc, pixel_auroc, MaskedMap, DEFAULT_FPR_LIMIT};
use ulsad_core::model::ModelConfig;
use ulsad_core::trainer::{train, TrainConfig};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> ulsad_core::Result<()> {
    env_logger::init();
    let dev = Device::Cpu;
    let dir = tempfile::tempdir().expect("temp dir");
    let t0 = Instant::now();
    let spec = SyntheticSceneSpec {
        jitter: env("SYN_JITTER", 2),
        noise: env("SYN_NOISE", 4.0),
        ..Default::default()
    };
    let ds = generate_synthetic(&spec, &SyntheticCounts::default(), dir.path())?;
    let arch: Architecture = env("SYN_ARCH", "wide_resnet50_2".to_string()).parse()?;
    let bb = BackboneConfig {
        architecture: arch,
        feature_width: env("SYN_WIDTH", 64),
        image_size: 128,
        weights: WeightsSource::Random {
            seed: env("SYN_SEED", 0),
        },
        ..Default::default()
    };
    let ex = FeatureExtractor::new(&bb, &dev)?;
    let cfg = ModelConfig::from_backbone(bb)?;
    let tc = TrainConfig {
        epochs: env("SYN_EPOCHS", 30),
        learning_rate: env("SYN_LR", 2e-4),
        batch_size: env("SYN_BATCH", 8),
        seed: env("SYN_SEED", 0),
        ..Default::default()
    };
    let (train_s, val_s) = ds.train_validation(0.1, 0)?;
    let train_imgs = load_images(&train_s, 128, &dev)?;
    println!("data ready {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let (mut model, log) = train(&ex, &cfg, &train_imgs, &tc)?;
    println!("trained {:.1}s", t1.elapsed().as_secs_f64());
    for e in log.epochs.iter().step_by(5) {
        println!(
            "  epoch {:3} total {:.4} local {:.4} global {:.4} coupling {:.4}",
            e.epoch, e.total, e.local, e.global, e.coupling
        );
    }
    let icfg = InferenceConfig {
        smoothing_sigma: env("SYN_SIGMA", 4.0),
        ..Default::default()
    };
    let val_imgs = load_images(&val_s, 128, &dev)?;
    let cal = Detector::new(&ex, &model)?.calibrate(&val_imgs, &icfg)?;
    println!("calibration {cal:?}");
    model.calibration = Some(cal);
    let det = Detector::new(&ex, &model)?;
    let test = ds.test(false)?;
    let imgs = load_images(&test, 128, &dev)?;
    let masks: Vec<_> = test.iter().map(load_mask).collect::<Result<_, _>>()?;
    let sizes: Vec<_> = masks.iter().map(|m| (m.height, m.width)).collect();
    let preds = det.predict(&imgs, &sizes, &icfg)?;
    for defect in ["structural_anomalies", "logical_anomalies"] {
        let idx: Vec<usize> = (0..test.len())
            .filter(|&i| test[i].defect == defect || test[i].defect == "good")
            .collect();
        let scores: Vec<f64> = idx.iter().map(|&i| preds[i].score).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| test[i].anomalous).collect();
        let items: Vec<MaskedMap> = idx
            .iter()
            .map(|&i| {
                MaskedMap::new(
                    masks[i].height,
                    masks[i].width,
                    preds[i].combined.data().to_vec(),
                    masks[i].data.clone(),
                )
            })
            .collect::<Result<_, _>>()?;
        let l_scores: Vec<f64> = idx.iter().map(|&i| preds[i].local.max().unwrap()).collect();
        let g_scores: Vec<f64> = idx.iter().map(|&i| preds[i].global.max().unwrap()).collect();
        println!(
            "{defect}: image {:.3} (local {:.3}, global {:.3}) pixel {:.3} aupro {:.3}",
            auroc(&scores, &labels)?,
            auroc(&l_scores, &labels)?,
            auroc(&g_scores, &labels)?,
            pixel_auroc(&items)?,
            aupro(&items, DEFAULT_FPR_LIMIT)?
        );
        if defect == "logical_anomalies" {
            let anom: Vec<usize> = idx.iter().copied().filter(|&i| test[i].anomalous).collect();
            let wins = anom
                .iter()
                .filter(|&&i| preds[i].global.max() > preds[i].local.max())
                .count();
            println!("  global>local on {wins}/{}", anom.len());
            let kinds = ["missing", "duplicate", "displaced"];
            for (k, name) in kinds.iter().enumerate() {
                let of_kind: Vec<usize> = anom
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|(j, _)| j % 3 == k)
                    .map(|(_, i)| i)
                    .collect();
                let w = of_kind
                    .iter()
                    .filter(|&&i| preds[i].global.max() > preds[i].local.max())
                    .count();
                println!("    {name}: {w}/{}", of_kind.len());
            }
        }
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
