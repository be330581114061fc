use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distance::LossConfig;
use crate::error::{Error, Result};
use crate::features::{BackboneConfig, ChannelStats, WeightsSource};
use crate::global::{GlobalAeConfig, GlobalAutoencoder};
use crate::inference::QuantileCalibration;
use crate::local::{Frn, FrnConfig, ReconstructedFeatures};
use crate::nn::ParamStore;

/// Parameter-name prefix of the feature reconstruction network (psi).
pub const FRN_PREFIX: &str = "frn";
/// Parameter-name prefix of the global autoencoder (phi).
pub const GAE_PREFIX: &str = "gae";

/// Everything that fixes the network shapes and the scoring rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub frn: FrnConfig,
    pub global: GlobalAeConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Derive the reference FRN and autoencoder layouts from the backbone shape.
    pub fn from_backbone(backbone: BackboneConfig) -> Result<Self> {
        backbone.validate()?;
        let c = backbone.feature_width;
        let h = backbone.feature_size();
        Ok(Self {
            frn: FrnConfig::for_width(c),
            global: GlobalAeConfig::for_sizes(backbone.image_size, c, h)?,
            backbone,
            loss: LossConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        let c = self.backbone.feature_width;
        let h = self.backbone.feature_size();
        if self.frn.feature_width != c || self.global.feature_width != c {
            return Err(Error::Config(format!(
                "feature width mismatch: backbone {c}, FRN {}, global {}",
                self.frn.feature_width, self.global.feature_width
            )));
        }
        if self.global.feature_size != h || self.global.image_size != self.backbone.image_size {
            return Err(Error::Config(format!(
                "global autoencoder shape ({}px -> {}) does not match backbone ({}px -> {h})",
                self.global.image_size, self.global.feature_size, self.backbone.image_size
            )));
        }
        self.frn.validate(h)?;
        self.global.validate()
    }

    /// Stable digest of the shape-determining configuration. The location of a
    /// weights file does not enter the digest; its presence does.
    pub fn fingerprint(&self) -> String {
        let mut arch = self.clone();
        if let WeightsSource::File { path } = &mut arch.backbone.weights {
            path.clear();
        }
        arch.loss = LossConfig::default();
        let json = serde_json::to_string(&(&arch.backbone, &arch.frn, &arch.global))
            .expect("model config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Trained networks plus the statistics needed to run them.
pub struct ModelBundle {
    config: ModelConfig,
    store: ParamStore,
    frn: Frn,
    global: GlobalAutoencoder,
    pub stats: Option<ChannelStats>,
    pub calibration: Option<QuantileCalibration>,
}

impl ModelBundle {
    /// Freshly initialized networks (seeded) without statistics.
    pub fn new(config: ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, device, DType::F32);
        let frn = Frn::new(&store, FRN_PREFIX, &config.frn)?;
        let global = GlobalAutoencoder::new(&store, GAE_PREFIX, &config.global)?;
        Ok(Self {
            config,
            store,
            frn,
            global,
            stats: None,
            calibration: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn frn(&self) -> &Frn {
        &self.frn
    }

    pub fn global(&self) -> &GlobalAutoencoder {
        &self.global
    }

    pub fn stats(&self) -> Result<&ChannelStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Contract("channel statistics have not been fitted".into()))
    }

    pub fn calibration(&self) -> Result<&QuantileCalibration> {
        self.calibration
            .as_ref()
            .ok_or_else(|| Error::Contract("model has not been calibrated".into()))
    }

    /// Normalize raw aggregated features with the fitted channel statistics.
    pub fn normalize(&self, raw: &Tensor) -> Result<Tensor> {
        self.stats()?.normalize(raw)
    }

    pub fn reconstruct(&self, u: &Tensor, train: bool) -> Result<ReconstructedFeatures> {
        self.frn.forward_t(u, train)
    }

    pub fn encode_global(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.global.forward_t(images, train)
    }

    pub fn psi_digest(&self) -> Result<String> {
        self.store.digest(&format!("{FRN_PREFIX}."))
    }

    pub fn phi_digest(&self) -> Result<String> {
        self.store.digest(&format!("{GAE_PREFIX}."))
    }
}
