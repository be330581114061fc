//! Frozen pre-trained feature extraction, multi-scale aggregation, the
//! flatten/unflatten patch transform and channel-wise normalization.

mod aggregate;
mod backbone;
mod image;
mod patches;
mod stats;

pub use aggregate::{channel_pool_matrix, FeatureAggregator};
pub use backbone::{Architecture, Backbone, BackboneConfig, WeightsSource};
pub use image::{stack_images, ImageTensor, IMAGENET_MEAN, IMAGENET_STD};
pub use patches::{flatten, unflatten, FeatureMap, PatchMatrix, ShapeInfo};
pub use stats::{ChannelStats, ChannelStatsAccumulator, SIGMA_FLOOR};

use candle_core::{Device, Tensor};

use crate::error::Result;

/// Backbone plus aggregator: images in, raw (un-normalized) `U` out.
pub struct FeatureExtractor {
    backbone: Backbone,
    aggregator: FeatureAggregator,
}

impl FeatureExtractor {
    pub fn new(cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        let backbone = Backbone::new(cfg, device)?;
        let aggregator =
            FeatureAggregator::new(cfg.concat_channels(), cfg.feature_width, cfg.upsample, device)?;
        Ok(Self { backbone, aggregator })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    /// `(b, 3, H, W) -> (b, c*, h*, w*)`.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let (shallow, deep) = self.backbone.extract(images)?;
        self.aggregator.aggregate(&shallow, &deep)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}
