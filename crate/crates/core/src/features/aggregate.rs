use candle_core::{Device, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::resize::{resize, UpsampleMode};

/// Fixed `(c*, c_in)` channel-pooling matrix: output channel `i` averages input
/// channels `floor(i * c_in / c*) .. ceil((i + 1) * c_in / c*)`.
pub fn channel_pool_matrix(c_in: usize, c_out: usize) -> Result<Vec<f32>> {
    if c_out == 0 || c_out > c_in {
        return Err(Error::Config(format!(
            "cannot pool {c_in} channels down to {c_out}"
        )));
    }
    let mut m = vec![0f32; c_out * c_in];
    for i in 0..c_out {
        let start = i * c_in / c_out;
        let end = ((i + 1) * c_in).div_ceil(c_out);
        let w = 1.0 / (end - start) as f32;
        for j in start..end {
            m[i * c_in + j] = w;
        }
    }
    Ok(m)
}

/// Multi-scale feature aggregator: upsample the deeper tap to the shallower
/// tap's resolution, concatenate along channels and apply a fixed 1x1 projection
/// to `c*` channels.
pub struct FeatureAggregator {
    projection: Option<Tensor>,
    mode: UpsampleMode,
    in_channels: usize,
    out_channels: usize,
}

impl FeatureAggregator {
    pub fn new(in_channels: usize, out_channels: usize, mode: UpsampleMode, device: &Device) -> Result<Self> {
        let projection = if in_channels == out_channels {
            None
        } else {
            let m = channel_pool_matrix(in_channels, out_channels)?;
            Some(Tensor::from_vec(m, (out_channels, in_channels), device)?)
        };
        Ok(Self {
            projection,
            mode,
            in_channels,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `(b, c_j, h, w)` and `(b, c_j1, h', w')` -> `(b, c*, h, w)`.
    pub fn aggregate(&self, shallow: &Tensor, deep: &Tensor) -> Result<Tensor> {
        let (b, cj, h, w) = shallow.dims4()?;
        let (b2, cj1, h1, w1) = deep.dims4()?;
        if b != b2 {
            return Err(shape_err!("tap batch sizes differ: {b} vs {b2}"));
        }
        if h1 == 0 || w1 == 0 || h % h1 != 0 || w % w1 != 0 {
            return Err(shape_err!(
                "deeper tap {h1}x{w1} does not divide shallower tap {h}x{w}"
            ));
        }
        if cj + cj1 != self.in_channels {
            return Err(shape_err!(
                "aggregator expects {} concatenated channels, got {}",
                self.in_channels,
                cj + cj1
            ));
        }
        let up = resize(deep, h, w, self.mode)?;
        let cat = Tensor::cat(&[shallow, &up], 1)?;
        match &self.projection {
            None => Ok(cat),
            Some(p) => {
                // (c*, C) x (C, b*h*w), batch moved next to the pixels
                let flat = cat
                    .transpose(0, 1)?
                    .contiguous()?
                    .reshape((self.in_channels, b * h * w))?;
                let p = p.to_dtype(flat.dtype())?;
                Ok(p.matmul(&flat)?
                    .reshape((self.out_channels, b, h, w))?
                    .transpose(0, 1)?
                    .contiguous()?)
            }
        }
    }
}
