//! The evaluation table: one row per defect folder (that folder plus the
//! good images), one overall row per category, and the mean over categories.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub category: String,
    pub subset: String,
    pub images: usize,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub aupro: Option<f64>,
}

#[derive(Debug, Default)]
pub struct Table {
    /// Per-defect-folder rows.
    pub rows: Vec<MetricRow>,
    /// One overall row per category.
    pub categories: Vec<MetricRow>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl Table {
    pub fn mean_row(&self) -> MetricRow {
        let c = &self.categories;
        MetricRow {
            category: "mean".into(),
            subset: String::new(),
            images: c.iter().map(|r| r.images).sum(),
            image_auroc: mean(c.iter().map(|r| r.image_auroc)),
            pixel_auroc: mean(c.iter().map(|r| r.pixel_auroc)),
            aupro: mean(c.iter().map(|r| r.aupro)),
        }
    }

    /// Rows in display order.
    pub fn ordered(&self) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for cat in &self.categories {
            out.extend(self.rows.iter().filter(|r| r.category == cat.category).cloned());
            out.push(cat.clone());
        }
        out.push(self.mean_row());
        out
    }

    pub fn render(&self) -> String {
        let rows = self.ordered();
        let w0 = rows.iter().map(|r| r.category.len()).max().unwrap_or(0).max(8);
        let w1 = rows.iter().map(|r| r.subset.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w0$}  {:<w1$}  {:>6}  {:>11}  {:>11}  {:>7}",
            "category", "subset", "images", "Image AUROC", "Pixel AUROC", "AUPRO"
        );
        for r in &rows {
            let _ = writeln!(
                s,
                "{:<w0$}  {:<w1$}  {:>6}  {:>11}  {:>11}  {:>7}",
                r.category,
                r.subset,
                r.images,
                cell(r.image_auroc),
                cell(r.pixel_auroc),
                cell(r.aupro)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in self.ordered() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}
