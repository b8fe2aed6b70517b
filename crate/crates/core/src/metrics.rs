//! Saliency evaluation: S-measure, MAE, max F-measure and max E-measure.
//!
//! Threshold sweeps use the 255 levels `t = k/256, k = 1..=255`; a pixel is
//! foreground at `t` when `pred ≥ t`. Because `k/256` and `256·pred` are exact
//! in binary floating point, a pixel passes threshold `k` exactly when
//! `k ≤ ⌊256·pred⌋`, so both sweeps run off one 256-bin histogram.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{find_image, list_stems, read_gray, threshold};
use crate::error::{Error, Result};
use crate::nn::resample_value;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 255;
pub const BETA_SQ: f64 = 0.3;
pub const E_EPS: f64 = 1e-12;
pub const S_ALPHA: f64 = 0.5;
/// Weight of the dispersion term in the object-aware similarity.
pub const OBJECT_LAMBDA: f64 = 1.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// A single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(
                "saliency map",
                format!("{} values for a {height}×{width} map", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    /// First plane of an `N×C×H×W` tensor.
    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        Self::new(h, w, t.data()[..h * w].to_vec())
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn transpose(&self) -> Self {
        let data = (0..self.width)
            .flat_map(|x| (0..self.height).map(move |y| (y, x)))
            .map(|(y, x)| self.at(y, x))
            .collect();
        Self {
            height: self.width,
            width: self.height,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn check_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "metric",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    Ok(())
}

fn is_fg(g: f64) -> bool {
    g >= 0.5
}

pub fn mae(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let total: f64 = pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.data.len() as f64)
}

/// Index of the highest threshold a prediction passes (0 = none).
fn level(p: f64) -> usize {
    ((256.0 * p).floor().max(0.0) as usize).min(THRESHOLDS)
}

/// Per threshold `k = 1..=255`: predicted-foreground counts among
/// ground-truth foreground and background pixels.
struct SweepCounts {
    fg_total: usize,
    bg_total: usize,
    /// `tp[k]`, `fp[k]` for `k ∈ 1..=255`; index 0 unused.
    tp: Vec<usize>,
    fp: Vec<usize>,
}

impl SweepCounts {
    fn new(pred: &SaliencyMap, gt: &SaliencyMap) -> Self {
        let mut fg_hist = [0usize; THRESHOLDS + 1];
        let mut bg_hist = [0usize; THRESHOLDS + 1];
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if is_fg(g) {
                fg_hist[level(p)] += 1;
            } else {
                bg_hist[level(p)] += 1;
            }
        }
        let mut tp = vec![0; THRESHOLDS + 2];
        let mut fp = vec![0; THRESHOLDS + 2];
        for k in (1..=THRESHOLDS).rev() {
            tp[k] = tp[k + 1] + fg_hist[k];
            fp[k] = fp[k + 1] + bg_hist[k];
        }
        tp.truncate(THRESHOLDS + 1);
        fp.truncate(THRESHOLDS + 1);
        Self {
            fg_total: fg_hist.iter().sum(),
            bg_total: bg_hist.iter().sum(),
            tp,
            fp,
        }
    }
}

/// F-measure from confusion counts; precision is 0 when nothing is
/// predicted, and F is 0 when its denominator vanishes.
pub fn f_beta(tp: usize, fp: usize, fg_total: usize) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if fg_total == 0 {
        0.0
    } else {
        tp as f64 / fg_total as f64
    };
    let denom = BETA_SQ * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / denom
    }
}

/// Maximum F-measure over the threshold sweep, or `None` when the ground
/// truth has no foreground.
pub fn max_f(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    let c = SweepCounts::new(pred, gt);
    if c.fg_total == 0 {
        return Ok(None);
    }
    Ok(Some(
        (1..=THRESHOLDS)
            .map(|k| f_beta(c.tp[k], c.fp[k], c.fg_total))
            .fold(0.0, f64::max),
    ))
}

/// Enhanced alignment of one pixel given binarised prediction `b`, binary
/// ground truth `g` and their means. `E_EPS` floors the denominator, so
/// perfectly aligned pixels score exactly 1.
pub fn enhanced_alignment(b: f64, g: f64, b_mean: f64, g_mean: f64) -> f64 {
    let phi_b = b - b_mean;
    let phi_g = g - g_mean;
    let xi = 2.0 * phi_g * phi_b / (phi_g * phi_g + phi_b * phi_b).max(E_EPS);
    (1.0 + xi) * (1.0 + xi) / 4.0
}

/// E-measure of a binary prediction `b` (as foreground counts) against the
/// ground truth. An all-background ground truth scores the fraction of
/// background predictions, an all-foreground one the fraction of foreground
/// predictions.
fn e_from_counts(tp: usize, fp: usize, fg_total: usize, bg_total: usize) -> f64 {
    let n = (fg_total + bg_total) as f64;
    if fg_total == 0 {
        return 1.0 - fp as f64 / n;
    }
    if bg_total == 0 {
        return tp as f64 / n;
    }
    let b_mean = (tp + fp) as f64 / n;
    let g_mean = fg_total as f64 / n;
    let fn_ = fg_total - tp;
    let tn = bg_total - fp;
    let sum = tp as f64 * enhanced_alignment(1.0, 1.0, b_mean, g_mean)
        + fn_ as f64 * enhanced_alignment(0.0, 1.0, b_mean, g_mean)
        + fp as f64 * enhanced_alignment(1.0, 0.0, b_mean, g_mean)
        + tn as f64 * enhanced_alignment(0.0, 0.0, b_mean, g_mean);
    sum / n
}

/// Maximum E-measure over the threshold sweep.
pub fn max_e(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let c = SweepCounts::new(pred, gt);
    Ok((1..=THRESHOLDS)
        .map(|k| e_from_counts(c.tp[k], c.fp[k], c.fg_total, c.bg_total))
        .fold(0.0, f64::max))
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let (mean, std) = mean_std(values);
    2.0 * mean / (mean * mean + 1.0 + 2.0 * OBJECT_LAMBDA * std)
}

/// Object-aware term `μ·O_FG + (1 − μ)·O_BG`.
pub fn s_object(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if is_fg(g) {
            fg.push(p);
        } else {
            bg.push(1.0 - p);
        }
    }
    let mu = fg.len() as f64 / pred.data.len() as f64;
    Ok(mu * object_similarity(&fg) + (1.0 - mu) * object_similarity(&bg))
}

/// SSIM over one block with uniform weighting and sample statistics.
pub fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = gt.iter().sum::<f64>() / n;
    let dof = (n - 1.0).max(1.0);
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(gt) {
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
        cov += (x - mx) * (y - my);
    }
    let (vx, vy, cov) = (vx / dof, vy / dof, cov / dof);
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Split point `(x, y)` for the region term: the rounded ground-truth
/// centroid plus one, i.e. the number of columns/rows in the left/top blocks.
pub fn region_split(gt: &SaliencyMap) -> (usize, usize) {
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for y in 0..gt.height {
        for x in 0..gt.width {
            if is_fg(gt.at(y, x)) {
                sx += x as f64;
                sy += y as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return (
            (gt.width as f64 / 2.0).round_ties_even() as usize,
            (gt.height as f64 / 2.0).round_ties_even() as usize,
        );
    }
    let cx = (sx / count as f64).round_ties_even() as usize + 1;
    let cy = (sy / count as f64).round_ties_even() as usize + 1;
    (cx.min(gt.width), cy.min(gt.height))
}

/// Region-aware term: area-weighted SSIM over the four blocks around the
/// ground-truth centroid.
pub fn s_region(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let (sx, sy) = region_split(gt);
    let (h, w) = (gt.height, gt.width);
    let area = (h * w) as f64;
    let mut score = 0.0;
    for (y0, y1) in [(0, sy), (sy, h)] {
        for (x0, x1) in [(0, sx), (sx, w)] {
            if y1 <= y0 || x1 <= x0 {
                continue;
            }
            let mut p = Vec::with_capacity((y1 - y0) * (x1 - x0));
            let mut g = Vec::with_capacity(p.capacity());
            for y in y0..y1 {
                p.extend_from_slice(&pred.data[y * w + x0..y * w + x1]);
                g.extend_from_slice(&gt.data[y * w + x0..y * w + x1]);
            }
            score += (p.len() as f64 / area) * ssim(&p, &g);
        }
    }
    Ok(score)
}

/// Structure measure `(1 − α)·S_o + α·S_r`, clamped at 0. Ground truth with
/// no foreground scores `1 − mean(pred)`; all foreground scores `mean(pred)`.
pub fn s_measure(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    check_pair(pred, gt)?;
    let fg = gt.data.iter().filter(|&&g| is_fg(g)).count();
    if fg == 0 {
        return Ok(1.0 - pred.mean());
    }
    if fg == gt.data.len() {
        return Ok(pred.mean());
    }
    let s = (1.0 - S_ALPHA) * s_object(pred, gt)? + S_ALPHA * s_region(pred, gt)?;
    Ok(s.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub s_measure: f64,
    pub mae: f64,
    /// `None` when the ground truth has no foreground.
    pub max_f: Option<f64>,
    pub max_e: f64,
}

pub fn evaluate_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        s_measure: s_measure(pred, gt)?,
        mae: mae(pred, gt)?,
        max_f: max_f(pred, gt)?,
        max_e: max_e(pred, gt)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, ImageMetrics)>,
    /// Column means; `max_f` averages only images where it is defined.
    pub mean: ImageMetrics,
}

impl MetricReport {
    pub fn new(rows: Vec<(String, ImageMetrics)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&ImageMetrics) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let f_values: Vec<f64> = rows.iter().filter_map(|(_, m)| m.max_f).collect();
        let mean = ImageMetrics {
            s_measure: avg(|m| m.s_measure),
            mae: avg(|m| m.mae),
            max_f: (!f_values.is_empty()).then(|| f_values.iter().sum::<f64>() / f_values.len() as f64),
            max_e: avg(|m| m.max_e),
        };
        Ok(Self { rows, mean })
    }

    /// Stems whose max F-measure was skipped.
    pub fn skipped(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|(_, m)| m.max_f.is_none())
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt_f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:?}"));
        let mut out = String::from("stem,s_measure,mae,max_f,max_e\n");
        let rows = self.rows.iter().map(|(s, m)| (s.as_str(), m));
        for (stem, m) in rows.chain(std::iter::once(("MEAN", &self.mean))) {
            writeln!(
                out,
                "{stem},{:?},{:?},{},{:?}",
                m.s_measure,
                m.mae,
                fmt_f(m.max_f),
                m.max_e
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let stem_w = self
            .rows
            .iter()
            .map(|(s, _)| s.chars().count())
            .max()
            .unwrap_or(0)
            .max(4);
        let fmt_f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        writeln!(
            out,
            "{:<stem_w$}  {:>7}  {:>7}  {:>7}  {:>7}",
            "", "S_α↑", "MAE↓", "maxE↑", "maxF↑"
        )
        .unwrap();
        let rows = self.rows.iter().map(|(s, m)| (s.as_str(), m));
        for (stem, m) in rows.chain(std::iter::once(("MEAN", &self.mean))) {
            writeln!(
                out,
                "{stem:<stem_w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}",
                m.s_measure,
                m.mae,
                m.max_e,
                fmt_f(m.max_f)
            )
            .unwrap();
        }
        out
    }
}

fn load_pair(pred_dir: &Path, gt_dir: &Path, stem: &str) -> Result<(SaliencyMap, SaliencyMap)> {
    let gt = threshold(&read_gray::<f64>(&find_image(gt_dir, stem)?)?);
    let mut pred = read_gray::<f64>(&find_image(pred_dir, stem)?)?;
    let (_, _, h, w) = gt.dims4()?;
    let (_, _, ph, pw) = pred.dims4()?;
    if (ph, pw) != (h, w) {
        log::warn!("{stem}: prediction is {ph}×{pw}, ground truth {h}×{w}; resizing prediction");
        pred = resample_value(&pred, h, w)?;
    }
    Ok((SaliencyMap::from_tensor(&pred)?, SaliencyMap::from_tensor(&gt)?))
}

/// Evaluates every ground-truth map in `gt_dir` against the prediction with
/// the same stem in `pred_dir`. Rows are ordered by stem.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let stems = list_stems(gt_dir)?;
    let rows = stems
        .par_iter()
        .map(|stem| {
            let (pred, gt) = load_pair(pred_dir, gt_dir, stem)?;
            Ok((stem.clone(), evaluate_pair(&pred, &gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::new(rows)?;
    for stem in report.skipped() {
        log::warn!("{stem}: ground truth has no foreground; max F-measure skipped");
    }
    Ok(report)
}
