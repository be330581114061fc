//! Frozen ResNet-family feature extractor.
//!
//! Weight names follow the torchvision state-dict layout (`layer2.0.conv1.weight`,
//! `layer2.0.downsample.1.running_var`, ...), so an exported state dict saved as
//! safetensors loads unchanged. Batch-norm layers are folded into the preceding
//! convolution at load time.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::nn::normal_tensor;
use crate::resize::UpsampleMode;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
    Resnet152,
    WideResnet50_2,
    WideResnet101_2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Basic,
    Bottleneck,
}

impl Architecture {
    fn blocks(self) -> [usize; 4] {
        match self {
            Architecture::Resnet18 => [2, 2, 2, 2],
            Architecture::Resnet34 | Architecture::Resnet50 | Architecture::WideResnet50_2 => [3, 4, 6, 3],
            Architecture::Resnet101 | Architecture::WideResnet101_2 => [3, 4, 23, 3],
            Architecture::Resnet152 => [3, 8, 36, 3],
        }
    }

    fn block_kind(self) -> BlockKind {
        match self {
            Architecture::Resnet18 | Architecture::Resnet34 => BlockKind::Basic,
            _ => BlockKind::Bottleneck,
        }
    }

    fn width_factor(self) -> usize {
        match self {
            Architecture::WideResnet50_2 | Architecture::WideResnet101_2 => 2,
            _ => 1,
        }
    }

    /// Output channels of residual stage `layer` (1-based).
    pub fn layer_channels(self, layer: usize) -> usize {
        let planes = 64 << (layer - 1);
        match self.block_kind() {
            BlockKind::Basic => planes,
            BlockKind::Bottleneck => planes * 4,
        }
    }

    /// Total downsampling factor at the output of stage `layer`.
    pub fn layer_stride(layer: usize) -> usize {
        4 << (layer - 1)
    }

    pub fn all() -> [Architecture; 7] {
        [
            Architecture::Resnet18,
            Architecture::Resnet34,
            Architecture::Resnet50,
            Architecture::Resnet101,
            Architecture::Resnet152,
            Architecture::WideResnet50_2,
            Architecture::WideResnet101_2,
        ]
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet34 => "resnet34",
            Architecture::Resnet50 => "resnet50",
            Architecture::Resnet101 => "resnet101",
            Architecture::Resnet152 => "resnet152",
            Architecture::WideResnet50_2 => "wide_resnet50_2",
            Architecture::WideResnet101_2 => "wide_resnet101_2",
        };
        f.write_str(s)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::all()
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone architecture {s:?}")))
    }
}

/// Where the frozen backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightsSource {
    /// No weights configured; constructing the backbone fails.
    #[default]
    Unset,
    /// torchvision-layout safetensors file.
    File { path: PathBuf },
    /// Seeded He-normal initialization (no pre-training).
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    /// Tapped residual stages `j` and `j + 1` (1-based).
    pub taps: [usize; 2],
    /// Width `c*` of the aggregated feature map.
    pub feature_width: usize,
    pub image_size: usize,
    pub upsample: UpsampleMode,
    pub weights: WeightsSource,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::WideResnet50_2,
            taps: [2, 3],
            feature_width: 384,
            image_size: 256,
            upsample: UpsampleMode::Bilinear,
            weights: WeightsSource::Unset,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let [j, j1] = self.taps;
        if j == 0 || j1 != j + 1 || j1 > 4 {
            return Err(Error::Config(format!(
                "taps must be consecutive stages within 1..=4, got {:?}",
                self.taps
            )));
        }
        let deep = Architecture::layer_stride(j1);
        if self.image_size == 0 || self.image_size % deep != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {deep} for taps {:?}",
                self.image_size, self.taps
            )));
        }
        let concat = self.concat_channels();
        if self.feature_width == 0 || self.feature_width > concat {
            return Err(Error::Config(format!(
                "feature width {} must be in 1..={concat}",
                self.feature_width
            )));
        }
        Ok(())
    }

    /// Channels after concatenating both taps.
    pub fn concat_channels(&self) -> usize {
        self.architecture.layer_channels(self.taps[0]) + self.architecture.layer_channels(self.taps[1])
    }

    /// Spatial size `h* = w*` of the aggregated map.
    pub fn feature_size(&self) -> usize {
        self.image_size / Architecture::layer_stride(self.taps[0])
    }
}

struct ConvBn {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

struct Block {
    convs: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(&y)?;
            if i != last {
                y = y.relu()?;
            }
        }
        let identity = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

trait WeightSource {
    fn conv(&mut self, name: &str, dims: [usize; 4]) -> Result<Tensor>;
    /// (weight, bias, running_mean, running_var)
    fn bn(&mut self, name: &str, channels: usize) -> Result<[Tensor; 4]>;
}

struct FileWeights {
    tensors: HashMap<String, Tensor>,
}

impl FileWeights {
    fn get(&self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("backbone weights missing {name}")))?;
        if t.dims() != dims {
            return Err(Error::Config(format!(
                "backbone weight {name} has shape {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(DType::F32)?)
    }
}

impl WeightSource for FileWeights {
    fn conv(&mut self, name: &str, dims: [usize; 4]) -> Result<Tensor> {
        self.get(&format!("{name}.weight"), &dims)
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<[Tensor; 4]> {
        Ok([
            self.get(&format!("{name}.weight"), &[c])?,
            self.get(&format!("{name}.bias"), &[c])?,
            self.get(&format!("{name}.running_mean"), &[c])?,
            self.get(&format!("{name}.running_var"), &[c])?,
        ])
    }
}

struct RandomWeights {
    rng: ChaCha8Rng,
    device: Device,
}

impl WeightSource for RandomWeights {
    fn conv(&mut self, _name: &str, dims: [usize; 4]) -> Result<Tensor> {
        // He-normal, fan-out mode
        let fan_out = dims[0] * dims[2] * dims[3];
        normal_tensor(&mut self.rng, &dims, (2.0 / fan_out as f64).sqrt(), &self.device)
    }

    fn bn(&mut self, _name: &str, c: usize) -> Result<[Tensor; 4]> {
        let ones = Tensor::ones(c, DType::F32, &self.device)?;
        let zeros = Tensor::zeros(c, DType::F32, &self.device)?;
        Ok([ones.clone(), zeros.clone(), zeros, ones])
    }
}

fn conv_bn(
    src: &mut dyn WeightSource,
    conv: &str,
    bn: &str,
    dims: [usize; 4],
    stride: usize,
    padding: usize,
) -> Result<ConvBn> {
    let w = src.conv(conv, dims)?;
    let [gamma, beta, mean, var] = src.bn(bn, dims[0])?;
    let scale = (gamma / (var + BN_EPS)?.sqrt()?)?;
    let weight = w.broadcast_mul(&scale.reshape((dims[0], 1, 1, 1))?)?;
    let bias = (beta - (mean * &scale)?)?.reshape((1, dims[0], 1, 1))?;
    Ok(ConvBn {
        weight,
        bias,
        stride,
        padding,
    })
}

/// Frozen convolutional backbone returning the two tapped stage outputs.
pub struct Backbone {
    cfg: BackboneConfig,
    stem: ConvBn,
    layers: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut src: Box<dyn WeightSource> = match &cfg.weights {
            WeightsSource::Unset => {
                return Err(Error::Config(
                    "backbone weights are not configured (set a weights file or opt into random init)".into(),
                ))
            }
            WeightsSource::File { path } => {
                let tensors = candle_core::safetensors::load(path, device).map_err(|e| {
                    Error::Config(format!("cannot read backbone weights {}: {e}", path.display()))
                })?;
                Box::new(FileWeights { tensors })
            }
            WeightsSource::Random { seed } => Box::new(RandomWeights {
                rng: ChaCha8Rng::seed_from_u64(*seed),
                device: device.clone(),
            }),
        };
        Self::build(cfg, src.as_mut())
    }

    fn build(cfg: &BackboneConfig, src: &mut dyn WeightSource) -> Result<Self> {
        let arch = cfg.architecture;
        let stem = conv_bn(src, "conv1", "bn1", [64, 3, 7, 7], 2, 3)?;
        let kind = arch.block_kind();
        let mut in_ch = 64;
        let mut layers = Vec::new();
        for layer in 1..=cfg.taps[1] {
            let planes = 64 << (layer - 1);
            let width = planes * arch.width_factor();
            let out_ch = arch.layer_channels(layer);
            let mut blocks = Vec::new();
            for b in 0..arch.blocks()[layer - 1] {
                let stride = if b == 0 && layer > 1 { 2 } else { 1 };
                let p = format!("layer{layer}.{b}");
                let convs = match kind {
                    BlockKind::Basic => vec![
                        conv_bn(
                            src,
                            &format!("{p}.conv1"),
                            &format!("{p}.bn1"),
                            [out_ch, in_ch, 3, 3],
                            stride,
                            1,
                        )?,
                        conv_bn(
                            src,
                            &format!("{p}.conv2"),
                            &format!("{p}.bn2"),
                            [out_ch, out_ch, 3, 3],
                            1,
                            1,
                        )?,
                    ],
                    BlockKind::Bottleneck => vec![
                        conv_bn(
                            src,
                            &format!("{p}.conv1"),
                            &format!("{p}.bn1"),
                            [width, in_ch, 1, 1],
                            1,
                            0,
                        )?,
                        conv_bn(
                            src,
                            &format!("{p}.conv2"),
                            &format!("{p}.bn2"),
                            [width, width, 3, 3],
                            stride,
                            1,
                        )?,
                        conv_bn(
                            src,
                            &format!("{p}.conv3"),
                            &format!("{p}.bn3"),
                            [out_ch, width, 1, 1],
                            1,
                            0,
                        )?,
                    ],
                };
                let downsample = if stride != 1 || in_ch != out_ch {
                    Some(conv_bn(
                        src,
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        [out_ch, in_ch, 1, 1],
                        stride,
                        0,
                    )?)
                } else {
                    None
                };
                blocks.push(Block { convs, downsample });
                in_ch = out_ch;
            }
            layers.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// SHA-256 over every folded weight and bias, in network order.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        let convs = std::iter::once(&self.stem).chain(
            self.layers
                .iter()
                .flatten()
                .flat_map(|b| b.convs.iter().chain(b.downsample.iter())),
        );
        for c in convs {
            for t in [&c.weight, &c.bias] {
                for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Run `(b, 3, H, W)` images through the network and return the outputs of
    /// stages `j` and `j + 1`. Inputs are detached; nothing here is trainable.
    pub fn extract(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::Input(format!("expected (b, 3, H, W) images, got {:?}", images.dims())))?;
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Input(format!(
                "backbone expects 3x{s}x{s} images, got {c}x{h}x{w}"
            )));
        }
        let x = images.detach().to_dtype(DType::F32)?;
        let x = self.stem.forward(&x)?.relu()?;
        // ReLU output is non-negative, so zero padding acts as -inf padding for max-pool.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        let mut taps = Vec::with_capacity(2);
        for (i, blocks) in self.layers.iter().enumerate() {
            for b in blocks {
                x = b.forward(&x)?;
            }
            if i + 1 >= self.cfg.taps[0] {
                taps.push(x.clone());
            }
        }
        let deep = taps
            .pop()
            .ok_or_else(|| shape_err!("backbone produced no taps"))?;
        let shallow = taps
            .pop()
            .ok_or_else(|| shape_err!("backbone produced one tap"))?;
        Ok((shallow, deep))
    }
}
