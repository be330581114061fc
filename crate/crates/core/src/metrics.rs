//! Image-level AUROC, pixel-level AUROC and AUPRO.

use crate::error::{shape_err, Error, Result};

/// Default false-positive-rate cap for AUPRO.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// A score map with its binary ground truth, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
    mask: Vec<bool>,
}

impl MaskedMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if scores.len() != n || mask.len() != n {
            return Err(shape_err!(
                "map of {} and mask of {} values for {height}x{width}",
                scores.len(),
                mask.len()
            ));
        }
        Ok(Self {
            height,
            width,
            scores,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

/// Area under the ROC curve with mid-rank ties, i.e. the Mann-Whitney
/// statistic `P(s_anomalous > s_normal) + P(tie) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes ({n_pos} anomalous, {n_neg} normal)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (doubled) mid-ranks of the positives; doubled ranks stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, doubled mid-rank = i + j + 2
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    // 2U = 2 R_pos - n_pos (n_pos + 1)
    let u2 = rank_sum2 - np * (np + 1);
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// AUROC over all pixels pooled across maps.
pub fn pixel_auroc(items: &[MaskedMap]) -> Result<f64> {
    let scores: Vec<f64> = items.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let labels: Vec<bool> = items.iter().flat_map(|m| m.mask.iter().copied()).collect();
    auroc(&scores, &labels)
}

/// 8-connected component labels of `mask`: 0 for background, `1..=n` for
/// regions. Returns the labels and `n`.
pub fn label_components(mask: &[bool], height: usize, width: usize) -> Result<(Vec<u32>, usize)> {
    if mask.len() != height * width {
        return Err(shape_err!("mask of {} values for {height}x{width}", mask.len()));
    }
    let mut labels = vec![0u32; mask.len()];
    let mut n = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = n;
                        stack.push(q);
                    }
                }
            }
        }
    }
    Ok((labels, n as usize))
}

/// The full per-region-overlap curve as `(fpr, pro)` points, one per distinct
/// score (descending thresholds), starting at `(0, 0)`.
pub fn pro_curve(items: &[MaskedMap]) -> Result<Vec<(f64, f64)>> {
    // per-pixel weight 1/|region| for anomalous pixels, None for normal ones
    let mut pixels: Vec<(f64, Option<f64>)> = Vec::new();
    let mut regions = 0usize;
    let mut negatives = 0usize;
    for m in items {
        let (labels, n) = label_components(&m.mask, m.height, m.width)?;
        let mut sizes = vec![0usize; n + 1];
        for &l in &labels {
            sizes[l as usize] += 1;
        }
        for (&s, &l) in m.scores.iter().zip(&labels) {
            if s.is_nan() {
                return Err(Error::Metric("scores contain NaN".into()));
            }
            if l == 0 {
                negatives += 1;
                pixels.push((s, None));
            } else {
                pixels.push((s, Some(1.0 / sizes[l as usize] as f64)));
            }
        }
        regions += n;
    }
    if regions == 0 {
        return Err(Error::Metric("AUPRO needs at least one anomalous region".into()));
    }
    if negatives == 0 {
        return Err(Error::Metric("AUPRO needs at least one normal pixel".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap) = (0usize, 0.0f64);
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                None => fp += 1,
                Some(w) => overlap += w,
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, overlap / regions as f64));
    }
    Ok(curve)
}

/// Trapezoid area under a monotone `(x, y)` curve on `[0, limit]`, with the
/// segment crossing `limit` interpolated.
pub fn area_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// Area under the PRO curve up to `fpr_limit`, normalized by the limit.
pub fn aupro(items: &[MaskedMap], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Metric(format!(
            "fpr_limit must be in (0, 1], got {fpr_limit}"
        )));
    }
    let curve = pro_curve(items)?;
    Ok(area_to_limit(&curve, fpr_limit) / fpr_limit)
}
