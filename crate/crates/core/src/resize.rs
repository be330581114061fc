//! Separable spatial resampling expressed as matrix products, so the same code
//! path is differentiable inside networks and usable for anomaly-map upsampling.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Row-stochastic `(out, in)` interpolation weights with half-pixel centers
/// (the `align_corners = false` convention).
pub fn interpolation_weights(input: usize, output: usize, mode: UpsampleMode) -> Vec<Vec<f64>> {
    let scale = input as f64 / output as f64;
    let mut rows = vec![vec![0.0; input]; output];
    for (i, row) in rows.iter_mut().enumerate() {
        match mode {
            UpsampleMode::Nearest => {
                let src = ((i as f64 * scale).floor() as usize).min(input - 1);
                row[src] = 1.0;
            }
            UpsampleMode::Bilinear => {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
                let frac = src - i0 as f64;
                row[i0] += 1.0 - frac;
                row[i1] += frac;
            }
        }
    }
    rows
}

fn weight_tensor(
    input: usize,
    output: usize,
    mode: UpsampleMode,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let flat: Vec<f64> = interpolation_weights(input, output, mode)
        .into_iter()
        .flatten()
        .collect();
    Ok(Tensor::from_vec(flat, (output, input), device)?.to_dtype(dtype)?)
}

/// Resize the two trailing dimensions of `x` to `(out_h, out_w)`.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: UpsampleMode) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(shape_err!("resize needs at least 2 dims, got {:?}", x.dims()));
    }
    let h = x.dim(rank - 2)?;
    let w = x.dim(rank - 1)?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("cannot resize {h}x{w} to {out_h}x{out_w}"));
    }
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let (dtype, device) = (x.dtype(), x.device());
    let mw = weight_tensor(w, out_w, mode, dtype, device)?;
    let mh = weight_tensor(h, out_h, mode, dtype, device)?;
    // plain 2-D products only: batched matmul against a broadcast (stride-0)
    // operand is not reliable on every backend
    let lead = &x.dims()[..rank - 2];
    let n: usize = lead.iter().product();
    // (n*h, w) x (w, W) -> (n, h, W)
    let y = x.contiguous()?.reshape((n * h, w))?.matmul(&mw.t()?)?;
    // (n, W, h) -> (n*W, h) x (h, H) -> (n, W, H) -> (n, H, W)
    let y = y
        .reshape((n, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * out_w, h))?
        .matmul(&mh.t()?)?
        .reshape((n, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?;
    let mut dims = lead.to_vec();
    dims.extend([out_h, out_w]);
    Ok(y.reshape(dims)?)
}
