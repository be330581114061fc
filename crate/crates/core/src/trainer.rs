//! Joint training of both branches over cached, normalized target features.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    flatten, stack_images, ChannelStats, ChannelStatsAccumulator, FeatureExtractor, ImageTensor,
};
use crate::global::{attention_consistency, loss_lg, loss_pg_direct, GlobalLoss};
use crate::local::loss_pl;
use crate::model::{ModelBundle, ModelConfig};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Mini-batches whose gradients are summed before each update.
    pub accumulation_steps: usize,
    pub seed: u64,
    pub use_global: bool,
    pub global_loss: GlobalLoss,
    pub use_lg: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 2e-4,
            weight_decay: 2e-5,
            batch_size: 8,
            accumulation_steps: 1,
            seed: 0,
            use_global: true,
            global_loss: GlobalLoss::Attention,
            use_lg: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// Loss terms of one optimization step, as scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub local: f64,
    pub global: f64,
    pub coupling: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub local: f64,
    pub global: f64,
    pub coupling: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Training images with their normalized target features, computed once since
/// the backbone is frozen and no augmentation is applied.
pub struct TrainingSet {
    images: Tensor,
    features: Tensor,
}

impl TrainingSet {
    /// Run the backbone over `images`, fit channel statistics on the result and
    /// cache the normalized features.
    pub fn prepare(
        extractor: &FeatureExtractor,
        images: &[ImageTensor],
        batch_size: usize,
    ) -> Result<(ChannelStats, Self)> {
        if images.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        let mut acc = ChannelStatsAccumulator::new();
        let mut raw = Vec::new();
        for chunk in images.chunks(batch_size.max(1)) {
            let u = extractor.extract(&stack_images(chunk)?)?;
            acc.push(&u)?;
            raw.push(u);
        }
        let stats = acc.finish()?;
        let features = stats.normalize(&Tensor::cat(&raw, 0)?)?;
        let images = stack_images(images)?;
        Ok((stats, Self { images, features }))
    }

    /// Build from already-normalized features.
    pub fn from_tensors(images: Tensor, features: Tensor) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        let (m, _, _, _) = features.dims4()?;
        if n != m || n == 0 {
            return Err(Error::Data(format!("{n} images but {m} feature maps")));
        }
        Ok(Self { images, features })
    }

    pub fn len(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, idx: &[usize], device: &Device) -> Result<(Tensor, Tensor)> {
        let ids = Tensor::from_vec(
            idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            idx.len(),
            device,
        )?;
        Ok((
            self.images.index_select(&ids, 0)?,
            self.features.index_select(&ids, 0)?,
        ))
    }
}

/// Scalar value of a loss term, rejecting non-finite values.
fn checked(term: &'static str, t: &Tensor, epoch: usize, batch: usize) -> Result<f64> {
    let value = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term,
            value,
            epoch,
            batch,
        });
    }
    Ok(value)
}

/// Objective terms for one mini-batch: `(l_l, l_g, l_lg, total)`. The total
/// is accumulated in double precision.
fn objective(model: &ModelBundle, images: &Tensor, u: &Tensor, cfg: &TrainConfig) -> Result<[Tensor; 4]> {
    let loss_cfg = &model.config().loss;
    let rec = model.reconstruct(u, true)?;
    let z = flatten(u)?;
    let l_l = loss_pl(&flatten(&rec.structural)?, &z, loss_cfg)?;
    let zero = Tensor::zeros((), DType::F32, u.device())?;
    let (l_g, l_lg) = if cfg.use_global {
        let z_hat = flatten(&model.encode_global(images, true)?)?;
        let l_g = match cfg.global_loss {
            GlobalLoss::Attention => attention_consistency(&z, &z_hat, loss_cfg)?,
            GlobalLoss::Direct => loss_pg_direct(&z_hat, &z, loss_cfg)?,
        };
        let l_lg = if cfg.use_lg {
            loss_lg(&flatten(&rec.coupling)?, &z_hat, loss_cfg)?
        } else {
            zero
        };
        (l_g, l_lg)
    } else {
        (zero.clone(), zero)
    };
    let total = ((l_l.to_dtype(DType::F64)? + l_g.to_dtype(DType::F64)?)? + l_lg.to_dtype(DType::F64)?)?;
    Ok([l_l, l_g, l_lg, total])
}

/// Optimize `model` in place. `observer` sees every step after its update.
pub fn train_bundle(
    model: &mut ModelBundle,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepRecord, &ModelBundle),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.use_lg && !cfg.use_global {
        log::warn!("use_lg has no effect without the global branch");
    }
    let device = model.device().clone();
    let vars = model
        .params()
        .trainable_vars()
        .into_iter()
        .filter(|(name, _)| cfg.use_global || name.starts_with(crate::model::FRN_PREFIX))
        .collect();
    let mut opt = Adam::new(vars, cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_da7a);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0f64; 4];
        let mut pending: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut accumulated = 0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (batch, idx) in batches.iter().enumerate() {
            let (images, u) = data.batch(idx, &device)?;
            let [l_l, l_g, l_lg, total] = objective(model, &images, &u, cfg)?;
            let rec = StepRecord {
                epoch,
                batch,
                local: checked("local", &l_l, epoch, batch)?,
                global: checked("global", &l_g, epoch, batch)?,
                coupling: checked("coupling", &l_lg, epoch, batch)?,
                total: checked("total", &total, epoch, batch)?,
            };
            let grads = opt.collect(&total.backward()?);
            for (name, g) in grads {
                let g = match pending.remove(&name) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                pending.insert(name, g);
            }
            accumulated += 1;
            if accumulated == cfg.accumulation_steps || batch + 1 == batches.len() {
                opt.step(&pending)?;
                pending.clear();
                accumulated = 0;
            }
            for (s, v) in sums
                .iter_mut()
                .zip([rec.local, rec.global, rec.coupling, rec.total])
            {
                *s += v;
            }
            observer(&rec, model);
            log.steps.push(rec);
        }
        let n = batches.len() as f64;
        let e = EpochRecord {
            epoch,
            local: sums[0] / n,
            global: sums[1] / n,
            coupling: sums[2] / n,
            total: sums[3] / n,
        };
        log::info!(
            "epoch {}/{}: total {:.5} (local {:.5}, global {:.5}, coupling {:.5})",
            epoch + 1,
            cfg.epochs,
            e.total,
            e.local,
            e.global,
            e.coupling
        );
        log.epochs.push(e);
    }
    Ok(log)
}

/// Fit channel statistics, initialize both networks from `cfg.seed` and
/// train. With zero epochs the initial parameters are returned.
pub fn train(
    extractor: &FeatureExtractor,
    model_cfg: &ModelConfig,
    images: &[ImageTensor],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if extractor.config() != &model_cfg.backbone {
        return Err(Error::Config(
            "feature extractor does not match the model configuration".into(),
        ));
    }
    let device = images
        .first()
        .map(|i| i.tensor().device().clone())
        .unwrap_or(Device::Cpu);
    let mut model = ModelBundle::new(model_cfg.clone(), cfg.seed, &device)?;
    let (stats, data) = TrainingSet::prepare(extractor, images, cfg.batch_size)?;
    model.stats = Some(stats);
    let log = train_bundle(&mut model, &data, cfg, |_, _| {})?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Architecture, BackboneConfig, WeightsSource};

    fn setup() -> (FeatureExtractor, ModelConfig, Vec<ImageTensor>) {
        let bb = BackboneConfig {
            architecture: Architecture::Resnet18,
            feature_width: 8,
            image_size: 64,
            weights: WeightsSource::Random { seed: 3 },
            ..Default::default()
        };
        let ex = FeatureExtractor::new(&bb, &Device::Cpu).unwrap();
        let cfg = ModelConfig::from_backbone(bb).unwrap();
        let imgs = (0..5)
            .map(|i| {
                let t = Tensor::randn(0f32, 1., (3, 64, 64), &Device::Cpu).unwrap();
                ImageTensor::new((t * (1.0 + i as f64 * 0.1)).unwrap()).unwrap()
            })
            .collect();
        (ex, cfg, imgs)
    }

    fn small(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (ex, cfg, imgs) = setup();
        let (m, log) = train(&ex, &cfg, &imgs, &small(0)).unwrap();
        let fresh = ModelBundle::new(cfg, 0, &Device::Cpu).unwrap();
        assert!(log.steps.is_empty());
        assert!(m.stats.is_some());
        assert_eq!(m.psi_digest().unwrap(), fresh.psi_digest().unwrap());
        assert_eq!(m.phi_digest().unwrap(), fresh.phi_digest().unwrap());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (ex, cfg, imgs) = setup();
        let (a, la) = train(&ex, &cfg, &imgs, &small(2)).unwrap();
        let (b, lb) = train(&ex, &cfg, &imgs, &small(2)).unwrap();
        assert_eq!(la.steps, lb.steps);
        assert_eq!(a.psi_digest().unwrap(), b.psi_digest().unwrap());
        assert_eq!(la.steps.len(), 6);
        assert_eq!(la.epochs.len(), 2);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let (ex, cfg, imgs) = setup();
        let (_, log) = train(&ex, &cfg, &imgs, &small(1)).unwrap();
        for s in &log.steps {
            assert!((s.total - (s.local + s.global + s.coupling)).abs() < 1e-6);
            assert!(s.global > -1e-6 && s.coupling > 0.0, "{s:?}");
        }
    }

    #[test]
    fn local_only_leaves_global_parameters() {
        let (ex, cfg, imgs) = setup();
        let tc = TrainConfig {
            use_global: false,
            ..small(1)
        };
        let (m, log) = train(&ex, &cfg, &imgs, &tc).unwrap();
        let fresh = ModelBundle::new(cfg, 0, &Device::Cpu).unwrap();
        assert_eq!(m.phi_digest().unwrap(), fresh.phi_digest().unwrap());
        assert_ne!(m.psi_digest().unwrap(), fresh.psi_digest().unwrap());
        assert!(log.steps.iter().all(|s| s.global == 0.0 && s.coupling == 0.0));
    }

    #[test]
    fn non_finite_input_aborts_with_term() {
        let (ex, cfg, imgs) = setup();
        let (stats, _) = TrainingSet::prepare(&ex, &imgs, 2).unwrap();
        let mut m = ModelBundle::new(cfg, 0, &Device::Cpu).unwrap();
        m.stats = Some(stats);
        let images = stack_images(&imgs).unwrap();
        let feats = Tensor::full(f32::NAN, (5, 8, 8, 8), &Device::Cpu).unwrap();
        let data = TrainingSet::from_tensors(images, feats).unwrap();
        match train_bundle(&mut m, &data, &small(1), |_, _| {}) {
            Err(Error::NonFinite {
                term, epoch, batch, ..
            }) => {
                assert_eq!((term, epoch, batch), ("local", 0, 0));
            }
            other => panic!("expected a non-finite error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
