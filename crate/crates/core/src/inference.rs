//! Anomaly maps, quantile calibration, map fusion and image scoring.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::distance::{column_distance, LossConfig};
use crate::error::{shape_err, Error, Result};
use crate::features::{flatten, stack_images, FeatureExtractor, ImageTensor};
use crate::model::ModelBundle;
use crate::resize::{interpolation_weights, UpsampleMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Local,
    Global,
    Combined,
}

/// Row-major per-pixel anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub kind: MapKind,
    pub calibrated: bool,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>, kind: MapKind, calibrated: bool) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{} values for a {height}x{width} map", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("anomaly map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            kind,
            calibrated,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }
}

fn maps_from_distance(d: &Tensor, kind: MapKind) -> Result<Vec<AnomalyMap>> {
    let (b, h, w) = d.dims3()?;
    let rows = d.to_dtype(DType::F64)?.reshape((b, h * w))?.to_vec2::<f64>()?;
    rows.into_iter()
        .map(|data| AnomalyMap::new(h, w, data, kind, false))
        .collect()
}

/// Per-position `l_v + lambda * l_d` between `(b, c, h, w)` feature maps.
fn branch_maps(a: &Tensor, b: &Tensor, lambda: f64, eps: f64, kind: MapKind) -> Result<Vec<AnomalyMap>> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "map operands differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let (n, _, h, w) = a
        .dims4()
        .map_err(|_| shape_err!("expected (b, c, h, w) features, got {:?}", a.dims()))?;
    let d = column_distance(&flatten(a)?, &flatten(b)?, lambda, eps)?.reshape((n, h, w))?;
    maps_from_distance(&d, kind)
}

fn single(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        3 => Ok(t.unsqueeze(0)?),
        4 => Ok(t.clone()),
        _ => Err(shape_err!(
            "expected (c, h, w) or (b, c, h, w), got {:?}",
            t.dims()
        )),
    }
}

/// Local map of one image from target features `U` and reconstruction `U'`.
pub fn local_map(u: &Tensor, u_tilde_prime: &Tensor, cfg: &LossConfig) -> Result<AnomalyMap> {
    let mut maps = branch_maps(
        &single(u)?,
        &single(u_tilde_prime)?,
        cfg.lambda_l,
        cfg.epsilon_norm,
        MapKind::Local,
    )?;
    if maps.len() != 1 {
        return Err(shape_err!("local_map takes a single image, got {}", maps.len()));
    }
    Ok(maps.remove(0))
}

/// Global map of one image from the coupling head `U''` and the autoencoder
/// output `U_hat`.
pub fn global_map(u_tilde_double_prime: &Tensor, u_hat: &Tensor, cfg: &LossConfig) -> Result<AnomalyMap> {
    let mut maps = branch_maps(
        &single(u_tilde_double_prime)?,
        &single(u_hat)?,
        cfg.lambda_g,
        cfg.epsilon_norm,
        MapKind::Global,
    )?;
    if maps.len() != 1 {
        return Err(shape_err!("global_map takes a single image, got {}", maps.len()));
    }
    Ok(maps.remove(0))
}

/// Nearest-rank (inverted CDF) quantile of sorted values: the element at rank
/// `ceil(p * n)`, 1-based. A small tolerance keeps `0.9 * 100` at rank 90.
pub fn nearest_rank_quantile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Calibration("quantile of an empty pool".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("quantile level {p} outside [0, 1]")));
    }
    let n = sorted.len();
    let rank = (p * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

/// Affine transforms that put both branches on a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileCalibration {
    pub alpha: f64,
    pub beta: f64,
    pub q_alpha_l: f64,
    pub q_beta_l: f64,
    pub q_alpha_g: f64,
    pub q_beta_g: f64,
}

pub fn validate_levels(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < beta && beta < 1.0) {
        return Err(Error::Config(format!(
            "quantile levels must satisfy 0 < alpha < beta < 1, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

fn branch_quantiles(mut pool: Vec<f64>, alpha: f64, beta: f64, branch: &str) -> Result<(f64, f64)> {
    if pool.is_empty() {
        return Err(Error::Calibration("empty validation set".into()));
    }
    pool.sort_by(f64::total_cmp);
    let qa = nearest_rank_quantile(&pool, alpha)?;
    let qb = nearest_rank_quantile(&pool, beta)?;
    if qb <= qa {
        return Err(Error::Calibration(format!(
            "degenerate {branch} quantiles (q_alpha = q_beta = {qa}); use more or more varied \
             validation images, or move alpha and beta further apart"
        )));
    }
    Ok((qa, qb))
}

impl QuantileCalibration {
    /// Fit from pooled pixel values of the raw local and global maps.
    pub fn fit(local: Vec<f64>, global: Vec<f64>, alpha: f64, beta: f64) -> Result<Self> {
        validate_levels(alpha, beta)?;
        let (q_alpha_l, q_beta_l) = branch_quantiles(local, alpha, beta, "local")?;
        let (q_alpha_g, q_beta_g) = branch_quantiles(global, alpha, beta, "global")?;
        Ok(Self {
            alpha,
            beta,
            q_alpha_l,
            q_beta_l,
            q_alpha_g,
            q_beta_g,
        })
    }

    /// Fit from raw maps.
    pub fn from_maps(local: &[AnomalyMap], global: &[AnomalyMap], alpha: f64, beta: f64) -> Result<Self> {
        let pool = |maps: &[AnomalyMap]| -> Result<Vec<f64>> {
            if maps.iter().any(|m| m.calibrated) {
                return Err(Error::Contract("calibration needs raw maps".into()));
            }
            Ok(maps.iter().flat_map(|m| m.data.iter().copied()).collect())
        };
        Self::fit(pool(local)?, pool(global)?, alpha, beta)
    }

    pub fn normalize(&self, m: &AnomalyMap) -> Result<AnomalyMap> {
        match m.kind {
            MapKind::Local => normalize_map(m, self.q_alpha_l, self.q_beta_l),
            MapKind::Global => normalize_map(m, self.q_alpha_g, self.q_beta_g),
            MapKind::Combined => Err(Error::Contract(
                "a combined map cannot be normalized per branch".into(),
            )),
        }
    }
}

/// `t(M) = 0.1 * (M - q_alpha) / (q_beta - q_alpha)`.
pub fn normalize_map(m: &AnomalyMap, q_alpha: f64, q_beta: f64) -> Result<AnomalyMap> {
    if !(q_alpha < q_beta) {
        return Err(Error::Calibration(format!(
            "degenerate quantiles: q_alpha={q_alpha}, q_beta={q_beta}"
        )));
    }
    if m.calibrated {
        return Err(Error::Contract("map is already calibrated".into()));
    }
    let span = q_beta - q_alpha;
    // divide first so that t(q_beta) is exactly 0.1
    let data = m.data.iter().map(|v| 0.1 * ((v - q_alpha) / span)).collect();
    AnomalyMap::new(m.height, m.width, data, m.kind, true)
}

/// Elementwise mean of the calibrated local and global maps.
pub fn combine_maps(local: &AnomalyMap, global: &AnomalyMap) -> Result<AnomalyMap> {
    if !(local.calibrated && global.calibrated) {
        return Err(Error::Contract("combine_maps needs two calibrated maps".into()));
    }
    if (local.height, local.width) != (global.height, global.width) {
        return Err(shape_err!(
            "cannot combine {}x{} with {}x{}",
            local.height,
            local.width,
            global.height,
            global.width
        ));
    }
    let data = local
        .data
        .iter()
        .zip(&global.data)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    AnomalyMap::new(local.height, local.width, data, MapKind::Combined, true)
}

/// Image-level score: the map maximum.
pub fn image_score(m: &AnomalyMap) -> Result<f64> {
    m.max().ok_or_else(|| shape_err!("image score of an empty map"))
}

/// Index into `0..n` under reflection about the edges (no edge repeat).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Normalized Gaussian taps with radius `floor(4 sigma + 0.5)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn blur_axis(data: &[f64], h: usize, w: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in kernel.iter().enumerate() {
                let o = k as isize - r;
                acc += t * if along_rows {
                    data[y * w + reflect(x as isize + o, w)]
                } else {
                    data[reflect(y as isize + o, h) * w + x]
                };
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Bilinear upsampling to `height x width`, then Gaussian smoothing with
/// reflected borders (`sigma = 0` disables smoothing).
pub fn upsample_map(m: &AnomalyMap, height: usize, width: usize, sigma: f64) -> Result<AnomalyMap> {
    if height < m.height || width < m.width {
        return Err(Error::Input(format!(
            "upsample_map cannot shrink {}x{} to {height}x{width}",
            m.height, m.width
        )));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "smoothing sigma must be >= 0, got {sigma}"
        )));
    }
    let wy = interpolation_weights(m.height, height, UpsampleMode::Bilinear);
    let wx = interpolation_weights(m.width, width, UpsampleMode::Bilinear);
    // rows first: (h, W), then columns: (H, W)
    let mut tmp = vec![0.0; m.height * width];
    for y in 0..m.height {
        let src = &m.data[y * m.width..(y + 1) * m.width];
        for (x, wts) in wx.iter().enumerate() {
            tmp[y * width + x] = wts.iter().zip(src).map(|(a, b)| a * b).sum();
        }
    }
    let mut data = vec![0.0; height * width];
    for (y, wts) in wy.iter().enumerate() {
        for (sy, a) in wts.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for x in 0..width {
                data[y * width + x] += a * tmp[sy * width + x];
            }
        }
    }
    if sigma > 0.0 {
        let k = gaussian_kernel(sigma);
        data = blur_axis(&data, height, width, &k, true);
        data = blur_axis(&data, height, width, &k, false);
    }
    AnomalyMap::new(height, width, data, m.kind, m.calibrated)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Gaussian smoothing applied after upsampling, in output pixels.
    pub smoothing_sigma: f64,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.995,
            smoothing_sigma: 4.0,
            batch_size: 8,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        validate_levels(self.alpha, self.beta)?;
        if !(self.smoothing_sigma.is_finite() && self.smoothing_sigma >= 0.0) {
            return Err(Error::Config("smoothing_sigma must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Raw feature-resolution maps of one image.
#[derive(Debug, Clone)]
pub struct BranchMaps {
    pub local: AnomalyMap,
    pub global: AnomalyMap,
}

/// Calibrated maps at output resolution and the image score.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub local: AnomalyMap,
    pub global: AnomalyMap,
    pub combined: AnomalyMap,
    pub score: f64,
}

/// Frozen feature extractor plus a trained bundle.
pub struct Detector<'a> {
    pub extractor: &'a FeatureExtractor,
    pub model: &'a ModelBundle,
}

impl<'a> Detector<'a> {
    pub fn new(extractor: &'a FeatureExtractor, model: &'a ModelBundle) -> Result<Self> {
        if extractor.config() != &model.config().backbone {
            return Err(Error::Config("feature extractor does not match the model".into()));
        }
        model.stats()?;
        Ok(Self { extractor, model })
    }

    /// Raw local and global maps for a batch of images.
    pub fn branch_maps(&self, images: &[ImageTensor]) -> Result<Vec<BranchMaps>> {
        let x = stack_images(images)?;
        let u = self.model.normalize(&self.extractor.extract(&x)?)?;
        let rec = self.model.reconstruct(&u, false)?;
        let u_hat = self.model.encode_global(&x, false)?;
        let cfg = &self.model.config().loss;
        let local = branch_maps(
            &u,
            &rec.structural,
            cfg.lambda_l,
            cfg.epsilon_norm,
            MapKind::Local,
        )?;
        let global = branch_maps(
            &rec.coupling,
            &u_hat,
            cfg.lambda_g,
            cfg.epsilon_norm,
            MapKind::Global,
        )?;
        Ok(local
            .into_iter()
            .zip(global)
            .map(|(local, global)| BranchMaps { local, global })
            .collect())
    }

    /// Fit quantile transforms on normal validation images.
    pub fn calibrate(&self, images: &[ImageTensor], cfg: &InferenceConfig) -> Result<QuantileCalibration> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Calibration("empty validation set".into()));
        }
        let mut local = Vec::new();
        let mut global = Vec::new();
        for chunk in images.chunks(cfg.batch_size) {
            for m in self.branch_maps(chunk)? {
                local.extend_from_slice(m.local.data());
                global.extend_from_slice(m.global.data());
            }
        }
        QuantileCalibration::fit(local, global, cfg.alpha, cfg.beta)
    }

    /// Calibrated, upsampled maps and scores. `sizes` gives the output
    /// resolution per image.
    pub fn predict(
        &self,
        images: &[ImageTensor],
        sizes: &[(usize, usize)],
        cfg: &InferenceConfig,
    ) -> Result<Vec<Prediction>> {
        cfg.validate()?;
        if images.len() != sizes.len() {
            return Err(shape_err!(
                "{} images but {} output sizes",
                images.len(),
                sizes.len()
            ));
        }
        let cal = self.model.calibration()?;
        let mut out = Vec::with_capacity(images.len());
        for (chunk, chunk_sizes) in images.chunks(cfg.batch_size).zip(sizes.chunks(cfg.batch_size)) {
            for (maps, &(h, w)) in self.branch_maps(chunk)?.into_iter().zip(chunk_sizes) {
                let local = upsample_map(&cal.normalize(&maps.local)?, h, w, cfg.smoothing_sigma)?;
                let global = upsample_map(&cal.normalize(&maps.global)?, h, w, cfg.smoothing_sigma)?;
                let combined = combine_maps(&local, &global)?;
                let score = image_score(&combined)?;
                out.push(Prediction {
                    local,
                    global,
                    combined,
                    score,
                });
            }
        }
        Ok(out)
    }
}
