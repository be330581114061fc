use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Floor applied to every channel's standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Channel-wise mean and standard deviation of the aggregated features over the
/// normal training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl ChannelStats {
    pub fn new(mu: Vec<f32>, sigma: Vec<f32>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(shape_err!(
                "mu has {} channels, sigma has {}",
                mu.len(),
                sigma.len()
            ));
        }
        if let Some(c) = sigma.iter().position(|s| !(*s as f64 >= SIGMA_FLOOR * 0.999)) {
            return Err(Error::Calibration(format!(
                "sigma[{c}] = {} is below the floor {SIGMA_FLOOR}",
                sigma[c]
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Calibration("non-finite channel mean".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Zero mean, unit deviation: normalization is the identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// `(U - mu) / sigma` per channel on `(.., c, h, w)` tensors.
    pub fn normalize(&self, u: &Tensor) -> Result<Tensor> {
        let r = u.rank();
        if r < 3 || u.dim(r - 3)? != self.channels() {
            return Err(shape_err!(
                "cannot normalize {:?} with {}-channel stats",
                u.dims(),
                self.channels()
            ));
        }
        let mut shape = vec![1usize; r];
        shape[r - 3] = self.channels();
        let mu = Tensor::from_slice(&self.mu, shape.as_slice(), u.device())?.to_dtype(u.dtype())?;
        let sigma = Tensor::from_slice(&self.sigma, shape.as_slice(), u.device())?.to_dtype(u.dtype())?;
        Ok(u.broadcast_sub(&mu)?.broadcast_div(&sigma)?)
    }
}

/// Single-pass pooled moments, merged per batch (Chan et al. parallel update).
#[derive(Debug, Clone, Default)]
pub struct ChannelStatsAccumulator {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelStatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a `(b, c, h, w)` batch of features.
    pub fn push(&mut self, u: &Tensor) -> Result<()> {
        let (b, c, h, w) = u.dims4()?;
        if !self.mean.is_empty() && self.mean.len() != c {
            return Err(shape_err!(
                "channel count changed from {} to {c}",
                self.mean.len()
            ));
        }
        let n = (b * h * w) as f64;
        if n == 0.0 {
            return Ok(());
        }
        let per_channel = u
            .to_dtype(DType::F64)?
            .transpose(0, 1)?
            .reshape((c, b * h * w))?
            .to_vec2::<f64>()?;
        if self.mean.is_empty() {
            self.mean = vec![0.0; c];
            self.m2 = vec![0.0; c];
        }
        let total = self.count + n;
        for (ch, vals) in per_channel.iter().enumerate() {
            let m = vals.iter().sum::<f64>() / n;
            let m2: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum();
            let delta = m - self.mean[ch];
            self.mean[ch] += delta * n / total;
            self.m2[ch] += m2 + delta * delta * self.count * n / total;
        }
        self.count = total;
        Ok(())
    }

    pub fn finish(&self) -> Result<ChannelStats> {
        if self.count == 0.0 {
            return Err(Error::Data("no features to fit channel statistics".into()));
        }
        let sigma = self
            .m2
            .iter()
            .map(|m2| ((m2 / self.count).sqrt().max(SIGMA_FLOOR)) as f32)
            .collect();
        let mu = self.mean.iter().map(|m| *m as f32).collect();
        ChannelStats::new(mu, sigma)
    }
}
