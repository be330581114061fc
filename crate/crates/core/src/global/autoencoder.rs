use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::local::LayerSpec;
use crate::nn::{Activation, BatchNorm2d, Conv2d, ParamStore};
use crate::resize::{resize, UpsampleMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalAeConfig {
    pub image_size: usize,
    /// Output width `c*`.
    pub feature_width: usize,
    /// Output spatial size `h* = w*`.
    pub feature_size: usize,
    /// Strided convolutions followed by the bottleneck convolution.
    pub encoder: Vec<LayerSpec>,
    /// Bilinear resize targets; each is followed by a `k4 s1 p2` convolution
    /// that grows the map by one pixel.
    pub decoder_ladder: Vec<usize>,
    pub decoder_width: usize,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
}

impl GlobalAeConfig {
    /// Reference layout: stride-2 `k4` convolutions (32, 32, then 64 wide)
    /// down to 8x8, a `k8` bottleneck, and a resize ladder that ends exactly at
    /// `h*` before two `k3` convolutions.
    pub fn for_sizes(image_size: usize, feature_width: usize, feature_size: usize) -> Result<Self> {
        if image_size < 16 || !image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "global autoencoder needs a power-of-two image size >= 16, got {image_size}"
            )));
        }
        let downs = (image_size / 8).trailing_zeros() as usize;
        let mut encoder: Vec<LayerSpec> = (0..downs)
            .map(|i| LayerSpec::new(if i < 2 { 32 } else { 64 }, 4, 2, 1))
            .collect();
        encoder.push(LayerSpec::new(64, 8, 1, 1));
        let decoder_ladder = (0..4)
            .rev()
            .map(|m| feature_size >> m)
            // a 1x1 rung would leave batch norm nothing to normalize over
            .filter(|s| *s >= 4)
            .map(|s| s - 1)
            .collect();
        Ok(Self {
            image_size,
            feature_width,
            feature_size,
            encoder,
            decoder_ladder,
            decoder_width: 64,
            encoder_activation: Activation::LeakyRelu { slope: 0.01 },
            decoder_activation: Activation::Relu,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Error::Config(format!("global autoencoder: {m}"));
        let mut s = self.image_size;
        for l in &self.encoder {
            let padded = s + 2 * l.padding;
            if padded < l.kernel {
                return Err(bad(format!("layer {l:?} does not fit a {s}x{s} input")));
            }
            s = (padded - l.kernel) / l.stride + 1;
        }
        if self.decoder_ladder.contains(&0) {
            return Err(bad("decoder ladder contains a zero size".into()));
        }
        if self.feature_width == 0 || self.feature_size == 0 {
            return Err(bad("empty output shape".into()));
        }
        Ok(())
    }
}

/// Global autoencoder `N_phi`: image in, `c* x h* x w*` feature map out.
pub struct GlobalAutoencoder {
    cfg: GlobalAeConfig,
    encoder: Vec<(Conv2d, BatchNorm2d)>,
    ladder: Vec<(Conv2d, BatchNorm2d)>,
    refine: (Conv2d, BatchNorm2d),
    head: Conv2d,
}

impl GlobalAutoencoder {
    pub fn new(store: &ParamStore, prefix: &str, cfg: &GlobalAeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut in_ch = 3;
        let mut encoder = Vec::new();
        for (i, l) in cfg.encoder.iter().enumerate() {
            let name = format!("{prefix}.encoder.{i}");
            let conv = Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                l.out_channels,
                l.kernel,
                l.stride,
                l.padding,
                true,
            )?;
            let bn = BatchNorm2d::new(store, &format!("{name}.bn"), l.out_channels)?;
            encoder.push((conv, bn));
            in_ch = l.out_channels;
        }
        let dw = cfg.decoder_width;
        let mut ladder = Vec::new();
        for i in 0..cfg.decoder_ladder.len() {
            let name = format!("{prefix}.decoder.{i}");
            let conv = Conv2d::new(store, &format!("{name}.conv"), in_ch, dw, 4, 1, 2, true)?;
            let bn = BatchNorm2d::new(store, &format!("{name}.bn"), dw)?;
            ladder.push((conv, bn));
            in_ch = dw;
        }
        let refine = (
            Conv2d::new(store, &format!("{prefix}.refine.conv"), in_ch, dw, 3, 1, 1, true)?,
            BatchNorm2d::new(store, &format!("{prefix}.refine.bn"), dw)?,
        );
        let head = Conv2d::new(
            store,
            &format!("{prefix}.head"),
            dw,
            cfg.feature_width,
            3,
            1,
            1,
            true,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            ladder,
            refine,
            head,
        })
    }

    pub fn config(&self) -> &GlobalAeConfig {
        &self.cfg
    }

    /// `(b, 3, H, W)` -> `(b, c*, h*, w*)`.
    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| shape_err!("expected (b, 3, H, W) images, got {:?}", images.dims()))?;
        let s = self.cfg.image_size;
        if (c, h, w) != (3, s, s) {
            return Err(shape_err!(
                "global autoencoder expects 3x{s}x{s}, got {c}x{h}x{w}"
            ));
        }
        let mut x = images.clone();
        for (conv, bn) in &self.encoder {
            x = bn.forward_t(&self.cfg.encoder_activation.apply(&conv.forward(&x)?)?, train)?;
        }
        for ((conv, bn), &size) in self.ladder.iter().zip(&self.cfg.decoder_ladder) {
            x = resize(&x, size, size, UpsampleMode::Bilinear)?;
            x = bn.forward_t(&self.cfg.decoder_activation.apply(&conv.forward(&x)?)?, train)?;
        }
        let hs = self.cfg.feature_size;
        x = resize(&x, hs, hs, UpsampleMode::Bilinear)?;
        let (conv, bn) = &self.refine;
        x = bn.forward_t(&self.cfg.decoder_activation.apply(&conv.forward(&x)?)?, train)?;
        self.head.forward(&x)
    }
}
