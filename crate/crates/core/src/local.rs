//! Local branch: the shared feature reconstruction network (FRN) with its
//! dual-head decoder, and the patch reconstruction loss.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::distance::{patch_loss, LossConfig};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvTranspose2d, ParamStore};

/// One convolution (or transposed convolution) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        padded.checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }

    fn conv_transpose_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrnConfig {
    /// Input width `c*`; the decoder emits `2 c*`.
    pub feature_width: usize,
    pub encoder: Vec<LayerSpec>,
    /// Transposed convolutions; the last one must emit `2 c*` channels.
    pub decoder: Vec<LayerSpec>,
    pub encoder_activation: Activation,
    pub decoder_activation: Activation,
}

impl FrnConfig {
    /// The reference encoder/decoder layout with widths scaled to `c*`
    /// (`c* = 384` gives 768/1536/1536 and 768/384 hidden widths).
    pub fn for_width(c: usize) -> Self {
        Self {
            feature_width: c,
            encoder: vec![
                LayerSpec::new(2 * c, 3, 2, 1),
                LayerSpec::new(4 * c, 3, 2, 1),
                LayerSpec::new(4 * c, 3, 1, 1),
            ],
            decoder: vec![
                LayerSpec::new(2 * c, 4, 2, 1),
                LayerSpec::new(c, 4, 2, 1),
                LayerSpec::new(2 * c, 5, 1, 2),
            ],
            encoder_activation: Activation::LeakyRelu { slope: 0.01 },
            decoder_activation: Activation::Relu,
        }
    }

    /// Check that a `size x size` input comes back at the same size with `2 c*` channels.
    pub fn validate(&self, size: usize) -> Result<()> {
        let bad = |m: String| Error::Config(format!("FRN: {m}"));
        let last = self.decoder.last().ok_or_else(|| bad("empty decoder".into()))?;
        if last.out_channels != 2 * self.feature_width {
            return Err(bad(format!(
                "decoder must emit 2c* = {} channels, got {}",
                2 * self.feature_width,
                last.out_channels
            )));
        }
        let mut s = size;
        for l in &self.encoder {
            s = l
                .conv_out(s)
                .filter(|v| *v > 0)
                .ok_or_else(|| bad(format!("encoder layer {l:?} collapses {s}")))?;
        }
        for l in &self.decoder {
            s = l
                .conv_transpose_out(s)
                .filter(|v| *v > 0)
                .ok_or_else(|| bad(format!("decoder layer {l:?} collapses {s}")))?;
        }
        if s != size {
            return Err(bad(format!("output size {s} differs from input size {size}")));
        }
        Ok(())
    }
}

/// Both heads of the FRN decoder output.
#[derive(Debug, Clone)]
pub struct ReconstructedFeatures {
    /// First `c*` channels: structural reconstruction `U'`.
    pub structural: Tensor,
    /// Last `c*` channels: coupling head `U''`, matched to the global branch.
    pub coupling: Tensor,
}

struct Stage<L> {
    layer: L,
    bn: Option<BatchNorm2d>,
}

/// Feature reconstruction network `N_psi`.
pub struct Frn {
    cfg: FrnConfig,
    encoder: Vec<Stage<Conv2d>>,
    decoder: Vec<Stage<ConvTranspose2d>>,
}

impl Frn {
    pub fn new(store: &ParamStore, prefix: &str, cfg: &FrnConfig) -> Result<Self> {
        let mut in_ch = cfg.feature_width;
        let mut encoder = Vec::new();
        for (i, l) in cfg.encoder.iter().enumerate() {
            let name = format!("{prefix}.encoder.{i}");
            let layer = Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                l.out_channels,
                l.kernel,
                l.stride,
                l.padding,
                true,
            )?;
            let bn = Some(BatchNorm2d::new(store, &format!("{name}.bn"), l.out_channels)?);
            encoder.push(Stage { layer, bn });
            in_ch = l.out_channels;
        }
        let mut decoder = Vec::new();
        let n = cfg.decoder.len();
        for (i, l) in cfg.decoder.iter().enumerate() {
            let name = format!("{prefix}.decoder.{i}");
            let layer = ConvTranspose2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                l.out_channels,
                l.kernel,
                l.stride,
                l.padding,
                true,
            )?;
            // the output layer regresses normalized features: no activation, no norm
            let bn = if i + 1 < n {
                Some(BatchNorm2d::new(store, &format!("{name}.bn"), l.out_channels)?)
            } else {
                None
            };
            decoder.push(Stage { layer, bn });
            in_ch = l.out_channels;
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &FrnConfig {
        &self.cfg
    }

    /// `(b, c*, h, w)` -> both `(b, c*, h, w)` heads.
    pub fn forward_t(&self, u: &Tensor, train: bool) -> Result<ReconstructedFeatures> {
        let (_, c, h, w) = u
            .dims4()
            .map_err(|_| shape_err!("FRN expects (b, c*, h, w), got {:?}", u.dims()))?;
        let cs = self.cfg.feature_width;
        if c != cs {
            return Err(shape_err!("FRN expects {cs} channels, got {c}"));
        }
        let mut x = u.clone();
        for s in &self.encoder {
            x = self.cfg.encoder_activation.apply(&s.layer.forward(&x)?)?;
            if let Some(bn) = &s.bn {
                x = bn.forward_t(&x, train)?;
            }
        }
        for s in &self.decoder {
            x = s.layer.forward(&x)?;
            if let Some(bn) = &s.bn {
                x = bn.forward_t(&self.cfg.decoder_activation.apply(&x)?, train)?;
            }
        }
        let (_, c2, h2, w2) = x.dims4()?;
        if (c2, h2, w2) != (2 * cs, h, w) {
            return Err(shape_err!(
                "FRN produced {c2}x{h2}x{w2}, expected {}x{h}x{w}",
                2 * cs
            ));
        }
        Ok(ReconstructedFeatures {
            structural: x.narrow(1, 0, cs)?,
            coupling: x.narrow(1, cs, cs)?,
        })
    }
}

/// Patch reconstruction loss between the structural head and the target
/// patches: mean over columns of `l_v + lambda_l * l_d`.
pub fn loss_pl(z_tilde_prime: &Tensor, z: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    patch_loss(z_tilde_prime, z, cfg.lambda_l, cfg.epsilon_norm)
}
