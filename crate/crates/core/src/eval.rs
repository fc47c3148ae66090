//! Full-image evaluation: degrade, super-resolve from depth alone, score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{bicubic_downsample, bicubic_upsample, DepthMap, RgbdPair, Scale};
use crate::error::Result;
use crate::losses::{mad_metric, rmse_metric};
use crate::networks::NetworkParams;
use crate::train::infer;

pub const BICUBIC_METHOD: &str = "bicubic";
pub const MODEL_METHOD: &str = "model";
pub const MEAN_SCENE: &str = "mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub scene: String,
    pub method: String,
    pub scale: u32,
    pub mad: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricRow>,
}

/// Crops the bottom/right so both sides are multiples of `factor`.
pub fn crop_to_multiple(d: &DepthMap, factor: usize) -> Result<DepthMap> {
    let (h, w) = d.dims();
    let (ch, cw) = (h - h % factor, w - w % factor);
    if (ch, cw) == (h, w) {
        return Ok(d.clone());
    }
    DepthMap::new(d.values().slice(ndarray::s![..ch, ..cw]).to_owned())
}

/// Scores the bicubic baseline and, when `params` is given, the model on
/// every scene, followed by one mean row per method.
pub fn evaluate(
    dataset: &str,
    pairs: &[RgbdPair],
    params: Option<&NetworkParams<f32>>,
    scale: Scale,
    unit_scale: f64,
) -> Result<Report> {
    let s = scale.factor();
    let mut report = Report::default();
    for pair in pairs {
        let gt = crop_to_multiple(&pair.depth, s)?;
        let lr = bicubic_downsample(&gt, s)?;
        let mut methods = vec![(BICUBIC_METHOD, bicubic_upsample(&lr, s)?)];
        if let Some(p) = params {
            methods.push((MODEL_METHOD, infer(&lr, p, scale)?));
        }
        for (method, pred) in methods {
            report.rows.push(MetricRow {
                dataset: dataset.to_string(),
                scene: pair.name.clone(),
                method: method.to_string(),
                scale: scale.into(),
                mad: mad_metric(&pred, &gt, unit_scale)?,
                rmse: rmse_metric(&pred, &gt, unit_scale)?,
            });
        }
    }
    let mut means = Vec::new();
    for method in [BICUBIC_METHOD, MODEL_METHOD] {
        let rows: Vec<&MetricRow> = report.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        means.push(MetricRow {
            dataset: dataset.to_string(),
            scene: MEAN_SCENE.to_string(),
            method: method.to_string(),
            scale: scale.into(),
            mad: rows.iter().map(|r| r.mad).sum::<f64>() / n,
            rmse: rows.iter().map(|r| r.rmse).sum::<f64>() / n,
        });
    }
    report.rows.extend(means);
    Ok(report)
}

impl Report {
    pub fn mean(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scene == MEAN_SCENE && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,scene,method,scale,mad,rmse\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{:.6},{:.6}", r.dataset, r.scene, r.method, r.scale, r.mad, r.rmse);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["dataset", "scene", "method", "scale", "MAD", "RMSE"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.dataset.clone(),
                    r.scene.clone(),
                    r.method.clone(),
                    format!("x{}", r.scale),
                    format!("{:.4}", r.mad),
                    format!("{:.4}", r.rmse),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i >= 4 { format!("{c:>w$}") } else { format!("{c:<w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}
