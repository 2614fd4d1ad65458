//! Segmentation evaluation: Dice overlap, 95th-percentile symmetric boundary
//! distance, absolute log volume difference, and lesion-wise recall/F1 over
//! connected components, plus the paired Wilcoxon signed-rank test.

mod wilcoxon;

pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_signed_rank_alt, Alternative};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{check_binary, check_same_shape, Mask};

/// The five evaluation metrics for one (prediction, ground truth) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    /// 95th-percentile symmetric boundary distance in pixels; the image
    /// diagonal when exactly one mask is empty (flagged below).
    pub h95: f64,
    pub h95_is_sentinel: bool,
    /// `|ln(|P|+1) - ln(|G|+1)|`.
    pub lavd: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
    pub gt_lesions: usize,
    pub pred_lesions: usize,
    /// One-to-one matchable lesion pairs (min of hit counts on both sides).
    pub matched_lesions: usize,
}

/// Connected foreground components of a mask.
#[derive(Debug, Clone)]
pub struct LesionSet {
    pub components: Vec<Vec<(usize, usize)>>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Dice similarity coefficient; 1 when both masks are empty.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape("dsc", pred, gt)?;
    check_binary("dsc pred", pred)?;
    check_binary("dsc gt", gt)?;
    let mut inter = 0usize;
    let mut psum = 0usize;
    let mut gsum = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p == 1 && g == 1) as usize;
        psum += p as usize;
        gsum += g as usize;
    }
    if psum + gsum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (psum + gsum) as f64)
}

/// Foreground pixels with at least one 4-neighbor background pixel
/// (out-of-image counts as background).
fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask[[i, j]] != 1 {
                continue;
            }
            let is_boundary = (i == 0 || mask[[i - 1, j]] == 0)
                || (i + 1 == h || mask[[i + 1, j]] == 0)
                || (j == 0 || mask[[i, j - 1]] == 0)
                || (j + 1 == w || mask[[i, j + 1]] == 0);
            if is_boundary {
                out.push((i, j));
            }
        }
    }
    out
}

/// Linear-interpolation percentile of a sorted slice, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Length of the image diagonal, the declared sentinel for one-sided
/// emptiness.
pub fn h95_sentinel(shape: (usize, usize)) -> f64 {
    ((shape.0 * shape.0 + shape.1 * shape.1) as f64).sqrt()
}

/// 95th percentile of the pooled two-directional nearest boundary distances
/// (Euclidean). Returns `(value, is_sentinel)`.
pub fn hausdorff95(pred: &Mask, gt: &Mask) -> Result<(f64, bool)> {
    check_same_shape("hausdorff95", pred, gt)?;
    check_binary("hausdorff95 pred", pred)?;
    check_binary("hausdorff95 gt", gt)?;
    let a = boundary_pixels(pred);
    let b = boundary_pixels(gt);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok((0.0, false)),
        (true, false) | (false, true) => return Ok((h95_sentinel(pred.dim()), true)),
        _ => {}
    }
    let mut dists = Vec::with_capacity(a.len() + b.len());
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| -> f64 {
        let mut best = f64::INFINITY;
        for &(i, j) in set {
            let dy = p.0 as f64 - i as f64;
            let dx = p.1 as f64 - j as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    };
    for &p in &a {
        dists.push(nearest(p, &b));
    }
    for &p in &b {
        dists.push(nearest(p, &a));
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite distances"));
    Ok((percentile(&dists, 0.95), false))
}

/// `|ln(|P|+1) - ln(|G|+1)|`; the plus-one keeps empty masks finite.
pub fn lavd(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape("lavd", pred, gt)?;
    check_binary("lavd pred", pred)?;
    check_binary("lavd gt", gt)?;
    let p = pred.iter().filter(|&&v| v == 1).count() as f64;
    let g = gt.iter().filter(|&&v| v == 1).count() as f64;
    Ok(((p + 1.0).ln() - (g + 1.0).ln()).abs())
}

/// Maximal connected foreground components under 4- or 8-connectivity.
pub fn connected_components(mask: &Mask, connectivity: u8) -> Result<LesionSet> {
    check_binary("connected_components", mask)?;
    if connectivity != 4 && connectivity != 8 {
        return Err(crate::error::Error::Config(format!(
            "connectivity must be 4 or 8, got {connectivity}"
        )));
    }
    let (h, w) = mask.dim();
    let offsets: &[(isize, isize)] = if connectivity == 4 {
        &[(-1, 0), (1, 0), (0, -1), (0, 1)]
    } else {
        &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ]
    };
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if mask[[si, sj]] != 1 || seen[si * w + sj] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = std::collections::VecDeque::new();
            seen[si * w + sj] = true;
            queue.push_back((si, sj));
            while let Some((i, j)) = queue.pop_front() {
                comp.push((i, j));
                for &(di, dj) in offsets {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let (ni, nj) = (ni as usize, nj as usize);
                    if mask[[ni, nj]] == 1 && !seen[ni * w + nj] {
                        seen[ni * w + nj] = true;
                        queue.push_back((ni, nj));
                    }
                }
            }
            components.push(comp);
        }
    }
    Ok(LesionSet { components })
}

/// Default connectivity for lesion matching.
pub const LESION_CONNECTIVITY: u8 = 8;

fn hit_counts(pred: &Mask, gt: &Mask) -> Result<(LesionSet, LesionSet, usize, usize)> {
    let gt_comps = connected_components(gt, LESION_CONNECTIVITY)?;
    let pred_comps = connected_components(pred, LESION_CONNECTIVITY)?;
    let gt_hit = gt_comps
        .components
        .iter()
        .filter(|comp| comp.iter().any(|&(i, j)| pred[[i, j]] == 1))
        .count();
    let pred_hit = pred_comps
        .components
        .iter()
        .filter(|comp| comp.iter().any(|&(i, j)| gt[[i, j]] == 1))
        .count();
    Ok((gt_comps, pred_comps, gt_hit, pred_hit))
}

/// Fraction of ground-truth lesions touched by at least one predicted
/// foreground pixel; 1 when there are no ground-truth lesions.
pub fn lesion_recall(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape("lesion_recall", pred, gt)?;
    let (gt_comps, _, gt_hit, _) = hit_counts(pred, gt)?;
    if gt_comps.is_empty() {
        return Ok(1.0);
    }
    Ok(gt_hit as f64 / gt_comps.len() as f64)
}

/// Harmonic mean of lesion-wise precision and recall; 0 when both are 0.
pub fn lesion_f1(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape("lesion_f1", pred, gt)?;
    let (gt_comps, pred_comps, gt_hit, pred_hit) = hit_counts(pred, gt)?;
    let recall = if gt_comps.is_empty() {
        1.0
    } else {
        gt_hit as f64 / gt_comps.len() as f64
    };
    let precision = if pred_comps.is_empty() {
        1.0
    } else {
        pred_hit as f64 / pred_comps.len() as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// All five metrics for one mask pair.
pub fn evaluate(pred: &Mask, gt: &Mask) -> Result<MetricReport> {
    let (gt_comps, pred_comps, gt_hit, pred_hit) = hit_counts(pred, gt)?;
    let (h95, h95_is_sentinel) = hausdorff95(pred, gt)?;
    let recall = if gt_comps.is_empty() {
        1.0
    } else {
        gt_hit as f64 / gt_comps.len() as f64
    };
    let precision = if pred_comps.is_empty() {
        1.0
    } else {
        pred_hit as f64 / pred_comps.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MetricReport {
        dsc: dsc(pred, gt)?,
        h95,
        h95_is_sentinel,
        lavd: lavd(pred, gt)?,
        lesion_recall: recall,
        lesion_f1: f1,
        gt_lesions: gt_comps.len(),
        pred_lesions: pred_comps.len(),
        matched_lesions: gt_hit.min(pred_hit),
    })
}

/// Mean and (population) standard deviation of each metric over a batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub h95_mean: f64,
    pub h95_std: f64,
    pub lavd_mean: f64,
    pub lavd_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let n = reports.len();
    if n == 0 {
        return MetricSummary::default();
    }
    let stat = |f: &dyn Fn(&MetricReport) -> f64| -> (f64, f64) {
        let mean = reports.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let var = reports
            .iter()
            .map(|r| (f(r) - mean) * (f(r) - mean))
            .sum::<f64>()
            / n as f64;
        (mean, var.sqrt())
    };
    let (dsc_mean, dsc_std) = stat(&|r| r.dsc);
    let (h95_mean, h95_std) = stat(&|r| r.h95);
    let (lavd_mean, lavd_std) = stat(&|r| r.lavd);
    let (recall_mean, recall_std) = stat(&|r| r.lesion_recall);
    let (f1_mean, f1_std) = stat(&|r| r.lesion_f1);
    MetricSummary {
        n,
        dsc_mean,
        dsc_std,
        h95_mean,
        h95_std,
        lavd_mean,
        lavd_std,
        recall_mean,
        recall_std,
        f1_mean,
        f1_std,
    }
}

/// Writes one CSV row per sample plus `__mean__`/`__std__` summary rows.
/// Columns: sample_id, dsc, h95, lavd, recall, f1.
pub fn write_metrics_csv(
    path: &std::path::Path,
    rows: &[(String, MetricReport)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "dsc", "h95", "lavd", "recall", "f1"])
        .map_err(csv_err)?;
    for (id, r) in rows {
        w.write_record([
            id.as_str(),
            &format!("{:.6}", r.dsc),
            &format!("{:.6}", r.h95),
            &format!("{:.6}", r.lavd),
            &format!("{:.6}", r.lesion_recall),
            &format!("{:.6}", r.lesion_f1),
        ])
        .map_err(csv_err)?;
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, r)| *r).collect();
    let s = summarize(&reports);
    w.write_record([
        "__mean__",
        &format!("{:.6}", s.dsc_mean),
        &format!("{:.6}", s.h95_mean),
        &format!("{:.6}", s.lavd_mean),
        &format!("{:.6}", s.recall_mean),
        &format!("{:.6}", s.f1_mean),
    ])
    .map_err(csv_err)?;
    w.write_record([
        "__std__",
        &format!("{:.6}", s.dsc_std),
        &format!("{:.6}", s.h95_std),
        &format!("{:.6}", s.lavd_std),
        &format!("{:.6}", s.recall_std),
        &format!("{:.6}", s.f1_std),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::error::Error {
    crate::error::Error::Format(format!("csv write failed: {e}"))
}
