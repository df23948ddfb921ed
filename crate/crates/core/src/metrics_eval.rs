//! Depth and keypoint evaluation metrics.
//!
//! Relative metrics (ARE, delta1) are computed after median scaling; keypoint
//! metrics use metric depth directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{FloatMap, StereoKeypoint};
use crate::stereo_geometry::{triangulate_keypoint, CameraRig};

/// Threshold on `max(d/d*, d*/d)` for delta1 (strict).
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Keypoint depth error threshold in mm (inclusive).
pub const ACC_THRESHOLD_MM: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels to evaluate")]
    EmptyMask,
    #[error("median scaling failed: {0}")]
    Scaling(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-positive depth at pixel {0}")]
    NonPositive(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub are: f64,
    pub delta1: f64,
    pub n_valid: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointMetrics {
    pub mae_mm: f64,
    pub acc_2mm: f64,
    pub n: usize,
    /// Keypoints dropped because no valid prediction surrounds them or
    /// they could not be triangulated.
    pub excluded: usize,
}

fn check_shape(a: &FloatMap, b: &FloatMap) -> Result<(), MetricsError> {
    a.check_shape(b, "prediction vs ground truth")
        .map_err(|e| MetricsError::Shape(e.to_string()))
}

fn joint_valid(pred: &FloatMap, gt: &FloatMap, extra: Option<&[bool]>) -> Vec<bool> {
    (0..pred.len())
        .map(|i| pred.is_valid(i) && gt.is_valid(i) && extra.is_none_or(|m| m[i]))
        .collect()
}

/// Lower median (the element at `(n - 1) / 2` of the sorted values), so the
/// median is always one of the inputs.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Multiplies `pred` by `median(gt) / median(pred)`, medians taken over the
/// pixels valid in both maps. Pixels invalid in either map are invalid in
/// the output.
pub fn median_scale(pred: &FloatMap, gt: &FloatMap) -> Result<FloatMap, MetricsError> {
    check_shape(pred, gt)?;
    let mask = joint_valid(pred, gt, None);
    median_scale_masked(pred, gt, &mask)
}

fn median_scale_masked(pred: &FloatMap, gt: &FloatMap, mask: &[bool]) -> Result<FloatMap, MetricsError> {
    let mut p: Vec<f64> = (0..pred.len()).filter(|&i| mask[i]).map(|i| pred.value(i)).collect();
    let mut g: Vec<f64> = (0..gt.len()).filter(|&i| mask[i]).map(|i| gt.value(i)).collect();
    let mp = lower_median(&mut p).ok_or(MetricsError::EmptyMask)?;
    let mg = lower_median(&mut g).ok_or(MetricsError::EmptyMask)?;
    if !(mp > 0.0) || !(mg > 0.0) {
        return Err(MetricsError::Scaling(format!(
            "medians must be positive (prediction {mp}, ground truth {mg})"
        )));
    }
    let s = mg / mp;
    let data = (0..pred.len())
        .map(|i| if mask[i] { pred.value(i) * s } else { f64::NAN })
        .collect();
    Ok(FloatMap::with_mask(pred.width(), pred.height(), data, mask.to_vec()).expect("same shape"))
}

/// Mean of `|pred - gt| / gt` over the pixels valid in both maps.
pub fn compute_are(pred: &FloatMap, gt: &FloatMap) -> Result<f64, MetricsError> {
    check_shape(pred, gt)?;
    let mut n = 0usize;
    let mut acc = 0.0;
    for i in 0..pred.len() {
        if !(pred.is_valid(i) && gt.is_valid(i)) {
            continue;
        }
        let g = gt.value(i);
        if !(g > 0.0) {
            return Err(MetricsError::NonPositive(i));
        }
        acc += (pred.value(i) - g).abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(acc / n as f64)
}

/// Fraction of jointly valid pixels with `max(pred/gt, gt/pred) < 1.25`.
pub fn compute_delta1(pred: &FloatMap, gt: &FloatMap) -> Result<f64, MetricsError> {
    check_shape(pred, gt)?;
    let mut n = 0usize;
    let mut hits = 0usize;
    for i in 0..pred.len() {
        if !(pred.is_valid(i) && gt.is_valid(i)) {
            continue;
        }
        let (p, g) = (pred.value(i), gt.value(i));
        if !(p > 0.0) || !(g > 0.0) {
            return Err(MetricsError::NonPositive(i));
        }
        n += 1;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(hits as f64 / n as f64)
}

/// Median-scales `pred` to `gt` over all jointly valid pixels, then reports
/// ARE and delta1 over those pixels that are also in `eval_mask`.
///
/// The scaled prediction is rounded to `f32` (the precision depth maps are
/// stored at) before scoring, which makes the result exactly invariant to a
/// global rescaling of `pred`.
pub fn depth_metrics(pred: &FloatMap, gt: &FloatMap, eval_mask: Option<&[bool]>) -> Result<DepthMetrics, MetricsError> {
    check_shape(pred, gt)?;
    if let Some(m) = eval_mask {
        if m.len() != pred.len() {
            return Err(MetricsError::Shape(format!(
                "evaluation mask has {} entries, expected {}",
                m.len(),
                pred.len()
            )));
        }
    }
    let joint = joint_valid(pred, gt, None);
    let scaled = median_scale_masked(pred, gt, &joint)?.to_f32_precision();
    let mask = joint_valid(pred, gt, eval_mask);
    let gt = gt.masked(&mask);
    Ok(DepthMetrics {
        are: compute_are(&scaled, &gt)?,
        delta1: compute_delta1(&scaled, &gt)?,
        n_valid: mask.iter().filter(|&&v| v).count(),
    })
}

/// Samples `map` at sub-pixel `(u, v)`: bilinear when every neighbour with
/// non-zero weight is valid, otherwise the nearest valid pixel of the 2x2
/// cell. `None` when the cell has no valid pixel or lies outside the map.
pub fn sample_bilinear(map: &FloatMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (map.width() as f64, map.height() as f64);
    if !(u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = (x0 + 1).min(map.width() - 1);
    let y1 = (y0 + 1).min(map.height() - 1);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    if taps.iter().all(|&(x, y, wt)| wt == 0.0 || map.get(x, y).is_some()) {
        let mut acc = 0.0;
        for &(x, y, wt) in &taps {
            if wt != 0.0 {
                acc += wt * map.get(x, y).expect("checked valid");
            }
        }
        return Some(acc);
    }
    let mut best: Option<(f64, f64)> = None;
    for &(x, y, _) in &taps {
        if let Some(z) = map.get(x, y) {
            let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, z));
            }
        }
    }
    best.map(|(_, z)| z)
}

/// Depth error of `pred_depth` at each keypoint against its triangulated
/// depth. Uses metric (unscaled) depth.
pub fn keypoint_metrics(pred_depth: &FloatMap, kps: &[StereoKeypoint], rig: &CameraRig) -> KeypointMetrics {
    let mut errs = Vec::with_capacity(kps.len());
    let mut excluded = 0;
    for kp in kps {
        let gt = match triangulate_keypoint(kp, rig) {
            Ok(p) => p.z_mm,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        match sample_bilinear(pred_depth, kp.u_left, kp.v_left) {
            Some(z) => errs.push((z - gt).abs()),
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} keypoint(s) excluded from evaluation");
    }
    let n = errs.len();
    let (mae_mm, acc_2mm) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (
            errs.iter().sum::<f64>() / n as f64,
            errs.iter().filter(|&&e| e <= ACC_THRESHOLD_MM).count() as f64 / n as f64,
        )
    };
    KeypointMetrics {
        mae_mm,
        acc_2mm,
        n,
        excluded,
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. `None` for fewer than two points or when
/// either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Area under the ROC curve of `scores` for the positive `labels`
/// (Mann-Whitney statistic, ties counted as one half).
pub fn pixel_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}
