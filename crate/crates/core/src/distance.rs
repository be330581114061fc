//! Patch-feature distances shared by every loss and anomaly map:
//! `l_v` (squared Euclidean) and `l_d` (cosine distance), combined per column as
//! `l_v + lambda * l_d`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Weights of the direction term and the norm guard used by the cosine distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub epsilon_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_l: 0.5,
            lambda_g: 0.5,
            epsilon_norm: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l >= 0.0 && self.lambda_g >= 0.0) {
            return Err(crate::Error::Config(format!(
                "lambda weights must be non-negative, got l={} g={}",
                self.lambda_l, self.lambda_g
            )));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(crate::Error::Config("epsilon_norm must be positive".into()));
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err!("vector lengths differ: {} vs {}", a.len(), b.len()));
    }
    Ok(())
}

/// `||a - b||^2`.
pub fn distance_v(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `1 - cos(a, b)` with both norms floored at `eps`.
pub fn distance_d(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    check_len(a, b)?;
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < eps || nb < eps {
        log::debug!("cosine distance on a near-zero vector (norms {na:e}, {nb:e})");
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na.max(eps) * nb.max(eps)))
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "operand shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    if a.rank() < 2 {
        return Err(shape_err!("expected (.., c, k) operands, got {:?}", a.dims()));
    }
    Ok(())
}

/// Per-column `l_v + lambda * l_d` over the channel axis of `(.., c, k)`
/// tensors; returns `(.., k)`.
pub fn column_distance(a: &Tensor, b: &Tensor, lambda: f64, eps: f64) -> Result<Tensor> {
    check_same(a, b)?;
    let ch = a.rank() - 2;
    let diff = (a - b)?;
    let lv = diff.sqr()?.sum(ch)?;
    if lambda == 0.0 {
        return Ok(lv);
    }
    // max(||x||^2, eps^2) keeps sqrt differentiable at the zero vector
    let floor = eps * eps;
    let na = a.sqr()?.sum(ch)?.maximum(floor)?.sqrt()?;
    let nb = b.sqr()?.sum(ch)?.maximum(floor)?.sqrt()?;
    let dot = (a * b)?.sum(ch)?;
    let cos = (dot / (na * nb)?)?;
    let ld = cos.affine(-1.0, 1.0)?;
    Ok((lv + (ld * lambda)?)?)
}

/// Mean of [`column_distance`] over all columns (and any leading batch axes).
pub fn patch_loss(a: &Tensor, b: &Tensor, lambda: f64, eps: f64) -> Result<Tensor> {
    Ok(column_distance(a, b, lambda, eps)?.mean_all()?)
}
