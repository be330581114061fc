//! Minimal seeded layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialization
//! draws from a ChaCha stream so a given seed always produces the same network.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};

#[derive(Clone)]
struct Param {
    var: Var,
    trainable: bool,
}

/// Named, seeded parameter registry shared by the trainable networks.
pub struct ParamStore {
    params: Mutex<BTreeMap<String, Param>>,
    rng: Mutex<ChaCha8Rng>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            params: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            device: device.clone(),
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&self, name: &str, tensor: Tensor, trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&tensor)?;
        let mut params = self.params.lock().expect("param store poisoned");
        if params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        params.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Uniform(-bound, bound) trainable parameter.
    pub fn uniform(&self, name: &str, dims: &[usize], bound: f64) -> Result<Var> {
        let n = dims.iter().product::<usize>();
        let values: Vec<f64> = {
            let mut rng = self.rng.lock().expect("rng poisoned");
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| dist.sample(&mut *rng)).collect()
        };
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t, true)
    }

    pub fn constant(&self, name: &str, dims: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let t = (Tensor::ones(dims, self.dtype, &self.device)? * value)?;
        self.insert(name, t, trainable)
    }

    /// All parameters (trainable or not) in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let params = self.params.lock().expect("param store poisoned");
        params.iter().map(|(k, p)| (k.clone(), p.var.clone())).collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let params = self.params.lock().expect("param store poisoned");
        params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    /// Overwrite parameter values in place. Every stored name must be present.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let params = self.params.lock().expect("param store poisoned");
        for (name, p) in params.iter() {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Persistence(format!("missing parameter {name}")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Persistence(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over the raw values of every parameter whose name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.named_vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            hasher.update(name.as_bytes());
            let values = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Seeded normal samples, used for frozen-network initialization.
pub(crate) fn normal_tensor(
    rng: &mut ChaCha8Rng,
    dims: &[usize],
    std: f64,
    device: &Device,
) -> Result<Tensor> {
    let n = dims.iter().product::<usize>();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let values: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Ok(Tensor::from_vec(values, dims, device)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.relu()?,
            Activation::LeakyRelu { slope } => x.maximum(&(x * *slope)?)?,
        })
    }
}

/// 2-D convolution with fan-in scaled uniform init.
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[out_ch], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed 2-D convolution; weights are laid out `(in, out, k, k)`.
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_ch * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[out_ch], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Spatial batch normalization with running statistics.
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0, true)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0, true)?,
            running_mean: store.constant(&format!("{name}.running_mean"), &[channels], 0.0, false)?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let n = b * h * w;
            if n < 2 {
                return Err(shape_err!(
                    "batch norm in training mode needs more than one value per channel, got {:?}",
                    x.dims()
                ));
            }
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let m = self.momentum;
            let unbiased = n as f64 / (n as f64 - 1.0);
            let new_mean =
                ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Numerically stable softmax along `dim`; the shift carries no gradient.
pub fn stable_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}
