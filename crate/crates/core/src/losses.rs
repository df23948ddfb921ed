//! Confidence-weighted depth losses with exact gradients w.r.t. the
//! predicted depth.
//!
//! Three terms are combined with unit weights by default:
//!
//! * scale-invariant log loss, with confidence entering as normalized
//!   weighted moments of the log residual;
//! * multi-scale gradient matching on the log residual, each scale weighted
//!   per pixel and averaged over valid pixels;
//! * edge-aware smoothness of mean-normalized depth, attenuated by image
//!   gradients and weighted per pixel.
//!
//! Every reduction runs sequentially in row-major order in `f64`, so values
//! are bit-reproducible. Gradient maps are fully valid and hold zero at
//! pixels that do not take part in the loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble_confidence::ConfidenceMap;
use crate::map_io::{FloatMap, RgbImage};

/// Below this total confidence the log loss has no usable supervision.
pub const MIN_CONFIDENCE_MASS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no valid pixels to supervise")]
    EmptySupervision,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("invalid loss config: {0}")]
    Config(String),
}

/// Weights of the three terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    pub silog: f64,
    pub grad: f64,
    pub edge: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            silog: 1.0,
            grad: 1.0,
            edge: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_silog: f64,
    pub grad_scales: Vec<usize>,
    pub bce_epsilon: f64,
    /// Depths are clamped to at least this value (mm) before any log.
    pub log_epsilon: f64,
    pub weights: TermWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_silog: 0.5,
            grad_scales: vec![1, 2, 4, 8],
            bce_epsilon: 1e-7,
            log_epsilon: 1e-6,
            weights: TermWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda_silog) {
            return Err(LossError::Config(format!(
                "lambda_silog must be in [0, 1], got {}",
                self.lambda_silog
            )));
        }
        if self.grad_scales.contains(&0) {
            return Err(LossError::Config("gradient scales must be >= 1".into()));
        }
        if !(self.bce_epsilon > 0.0 && self.bce_epsilon < 0.5) || !(self.log_epsilon > 0.0) {
            return Err(LossError::Config("epsilons must be positive".into()));
        }
        let w = self.weights;
        if [w.silog, w.grad, w.edge].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::Config("term weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Values and gradient of the total loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub silog_conf: f64,
    pub grad_conf: f64,
    pub edge_conf: f64,
    pub total: f64,
    /// d total / d predicted depth.
    #[serde(skip)]
    pub grad_wrt_pred: FloatMap,
}

fn check_shapes(a: &FloatMap, b: &FloatMap, what: &str) -> Result<(), LossError> {
    a.check_shape(b, what).map_err(|e| LossError::Shape(e.to_string()))
}

fn joint_mask(maps: &[&FloatMap]) -> Vec<bool> {
    let mut mask = maps[0].mask().to_vec();
    for m in &maps[1..] {
        for (a, &b) in mask.iter_mut().zip(m.mask()) {
            *a &= b;
        }
    }
    mask
}

fn zero_grad(like: &FloatMap) -> FloatMap {
    FloatMap::filled(like.width(), like.height(), 0.0)
}

/// `ln(max(d, eps))` and its derivative (zero where the clamp is active).
#[inline]
fn clamped_log(d: f64, eps: f64) -> (f64, f64) {
    if d > eps {
        (d.ln(), 1.0 / d)
    } else {
        (eps.ln(), 0.0)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(1/N) sum_i P(i) * l(i)` over the pixels valid in both maps.
pub fn confidence_weight(per_pixel_loss: &FloatMap, conf: &ConfidenceMap) -> Result<f64, LossError> {
    check_shapes(per_pixel_loss, conf, "loss vs confidence")?;
    let mut n = 0usize;
    let mut acc = 0.0;
    for i in 0..per_pixel_loss.len() {
        if per_pixel_loss.is_valid(i) && conf.is_valid(i) {
            n += 1;
            acc += conf.value(i) * per_pixel_loss.value(i);
        }
    }
    if n == 0 {
        return Err(LossError::EmptySupervision);
    }
    Ok(acc / n as f64)
}

/// Confidence-weighted scale-invariant log loss.
///
/// With `g = ln d_pred - ln d_gt` and `W = sum P`, the value is
/// `sum(P g^2) / W - lambda * (sum(P g) / W)^2`.
pub fn silog_conf(
    d_pred: &FloatMap,
    d_gt: &FloatMap,
    conf: &ConfidenceMap,
    cfg: &LossConfig,
) -> Result<(f64, FloatMap), LossError> {
    check_shapes(d_pred, d_gt, "prediction vs ground truth")?;
    check_shapes(d_pred, conf, "prediction vs confidence")?;
    let mask = joint_mask(&[d_pred, d_gt, conf]);
    let eps = cfg.log_epsilon;
    let n = d_pred.len();

    let mut g = vec![0.0; n];
    let mut dlog = vec![0.0; n];
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let (lp, dl) = clamped_log(d_pred.value(i), eps);
        let (lt, _) = clamped_log(d_gt.value(i), eps);
        let gi = lp - lt;
        let p = conf.value(i);
        g[i] = gi;
        dlog[i] = dl;
        s0 += p;
        s1 += p * gi;
        s2 += p * gi * gi;
    }
    let mut grad = zero_grad(d_pred);
    if s0 < MIN_CONFIDENCE_MASS {
        log::warn!("silog: total confidence {s0:e} is too small, loss skipped");
        return Ok((0.0, grad));
    }
    let lambda = cfg.lambda_silog;
    let mean = s1 / s0;
    let value = s2 / s0 - lambda * mean * mean;
    for i in 0..n {
        if mask[i] {
            grad.set(i, 2.0 * conf.value(i) / s0 * (g[i] - lambda * mean) * dlog[i]);
        }
    }
    Ok((value, grad))
}

/// Multi-scale gradient matching on the log residual.
///
/// At each scale `s` the residual and confidence are average-pooled over
/// the valid pixels of each `s x s` block (trailing rows/columns that do not
/// fill a block are dropped). The term is
/// `(1/N_s) sum_c P_s(c) (|R_s(c+x) - R_s(c)| + |R_s(c+y) - R_s(c)|)` over
/// valid cells `c`, a difference counting only when both cells are valid.
pub fn grad_match_conf(
    d_pred: &FloatMap,
    d_gt: &FloatMap,
    conf: &ConfidenceMap,
    cfg: &LossConfig,
) -> Result<(f64, FloatMap), LossError> {
    check_shapes(d_pred, d_gt, "prediction vs ground truth")?;
    check_shapes(d_pred, conf, "prediction vs confidence")?;
    let mask = joint_mask(&[d_pred, d_gt, conf]);
    let eps = cfg.log_epsilon;
    let (w, h) = (d_pred.width(), d_pred.height());
    let n = w * h;

    let mut resid = vec![0.0; n];
    let mut dlog = vec![0.0; n];
    for i in 0..n {
        if mask[i] {
            let (lp, dl) = clamped_log(d_pred.value(i), eps);
            let (lt, _) = clamped_log(d_gt.value(i), eps);
            resid[i] = lp - lt;
            dlog[i] = dl;
        }
    }

    let mut grad = zero_grad(d_pred);
    let mut dresid = vec![0.0; n];
    let mut value = 0.0;
    for &s in &cfg.grad_scales {
        if w < s || h < s {
            log::warn!("gradient matching: {w}x{h} map is smaller than scale {s}, skipped");
            continue;
        }
        let pooled = pool(&resid, conf, &mask, w, h, s);
        let (pw, ph) = (pooled.width, pooled.height);
        let n_cells = pooled.count.iter().filter(|&&c| c > 0).count();
        if n_cells == 0 {
            continue;
        }
        let inv_n = 1.0 / n_cells as f64;
        let mut dcell = vec![0.0; pw * ph];
        let mut term = 0.0;
        for cy in 0..ph {
            for cx in 0..pw {
                let c = cy * pw + cx;
                if pooled.count[c] == 0 {
                    continue;
                }
                let p = pooled.conf[c];
                if cx + 1 < pw && pooled.count[c + 1] > 0 {
                    let diff = pooled.resid[c + 1] - pooled.resid[c];
                    term += p * diff.abs();
                    let sg = p * sign(diff) * inv_n;
                    dcell[c + 1] += sg;
                    dcell[c] -= sg;
                }
                if cy + 1 < ph && pooled.count[c + pw] > 0 {
                    let diff = pooled.resid[c + pw] - pooled.resid[c];
                    term += p * diff.abs();
                    let sg = p * sign(diff) * inv_n;
                    dcell[c + pw] += sg;
                    dcell[c] -= sg;
                }
            }
        }
        value += term * inv_n;
        for y in 0..ph * s {
            for x in 0..pw * s {
                let i = y * w + x;
                if mask[i] {
                    let c = (y / s) * pw + x / s;
                    dresid[i] += dcell[c] / pooled.count[c] as f64;
                }
            }
        }
    }
    for i in 0..n {
        if mask[i] {
            grad.set(i, dresid[i] * dlog[i]);
        }
    }
    Ok((value, grad))
}

struct Pooled {
    width: usize,
    height: usize,
    resid: Vec<f64>,
    conf: Vec<f64>,
    count: Vec<usize>,
}

fn pool(resid: &[f64], conf: &FloatMap, mask: &[bool], w: usize, h: usize, s: usize) -> Pooled {
    let (pw, ph) = (w / s, h / s);
    let mut r = vec![0.0; pw * ph];
    let mut p = vec![0.0; pw * ph];
    let mut count = vec![0usize; pw * ph];
    for y in 0..ph * s {
        for x in 0..pw * s {
            let i = y * w + x;
            if mask[i] {
                let c = (y / s) * pw + x / s;
                r[c] += resid[i];
                p[c] += conf.value(i);
                count[c] += 1;
            }
        }
    }
    for c in 0..pw * ph {
        if count[c] > 0 {
            r[c] /= count[c] as f64;
            p[c] /= count[c] as f64;
        }
    }
    Pooled {
        width: pw,
        height: ph,
        resid: r,
        conf: p,
        count,
    }
}

/// Smallest `|R_s(c') - R_s(c)|` over every pooled difference each pixel
/// feeds into. Pixels near zero sit on a kink of the gradient matching
/// term, where only a subgradient exists.
pub fn grad_match_kink_margin(d_pred: &FloatMap, d_gt: &FloatMap, conf: &ConfidenceMap, cfg: &LossConfig) -> Vec<f64> {
    let mask = joint_mask(&[d_pred, d_gt, conf]);
    let (w, h) = (d_pred.width(), d_pred.height());
    let eps = cfg.log_epsilon;
    let resid: Vec<f64> = (0..w * h)
        .map(|i| {
            if mask[i] {
                clamped_log(d_pred.value(i), eps).0 - clamped_log(d_gt.value(i), eps).0
            } else {
                0.0
            }
        })
        .collect();
    let mut margin = vec![f64::INFINITY; w * h];
    for &s in &cfg.grad_scales {
        if w < s || h < s {
            continue;
        }
        let pooled = pool(&resid, conf, &mask, w, h, s);
        let pw = pooled.width;
        let mut cell_margin = vec![f64::INFINITY; pw * pooled.height];
        for cy in 0..pooled.height {
            for cx in 0..pw {
                let c = cy * pw + cx;
                if pooled.count[c] == 0 {
                    continue;
                }
                let mut touch = |other: usize| {
                    if pooled.count[other] > 0 {
                        let d = (pooled.resid[other] - pooled.resid[c]).abs();
                        cell_margin[c] = cell_margin[c].min(d);
                        cell_margin[other] = cell_margin[other].min(d);
                    }
                };
                if cx + 1 < pw {
                    touch(c + 1);
                }
                if cy + 1 < pooled.height {
                    touch(c + pw);
                }
            }
        }
        for y in 0..pooled.height * s {
            for x in 0..pw * s {
                let i = y * w + x;
                if mask[i] {
                    margin[i] = margin[i].min(cell_margin[(y / s) * pw + x / s]);
                }
            }
        }
    }
    margin
}

/// Edge-aware smoothness of mean-normalized depth.
///
/// `n = d / mean(d)`, `I = gray / 255`; the value is
/// `(1/N) sum P(i) (|dx n| e^{-|dx I|} + |dy n| e^{-|dy I|})` with forward
/// differences over pixel pairs that are both valid.
pub fn edge_smooth_conf(
    d_pred: &FloatMap,
    image: &RgbImage,
    conf: &ConfidenceMap,
    _cfg: &LossConfig,
) -> Result<(f64, FloatMap), LossError> {
    check_shapes(d_pred, conf, "prediction vs confidence")?;
    if !image.same_size_as(d_pred) {
        return Err(LossError::Shape(format!(
            "image {}x{} vs prediction {}x{}",
            image.width(),
            image.height(),
            d_pred.width(),
            d_pred.height()
        )));
    }
    let mask = joint_mask(&[d_pred, conf]);
    let (w, h) = (d_pred.width(), d_pred.height());
    let gray = image.grayscale();

    let mut count = 0usize;
    let mut sum = 0.0;
    for i in 0..w * h {
        if mask[i] {
            count += 1;
            sum += d_pred.value(i);
        }
    }
    if count == 0 {
        return Err(LossError::EmptySupervision);
    }
    let n_inv = 1.0 / count as f64;
    let mean = sum * n_inv;
    if !(mean > 0.0) {
        return Err(LossError::InvalidDepth(format!("mean predicted depth {mean} is not positive")));
    }

    // A = (1/N) sum P w |delta d|; value = A / mean
    let mut a = 0.0;
    let mut da = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let p = conf.value(i);
            let d = d_pred.value(i);
            if x + 1 < w && mask[i + 1] {
                let wt = (-(gray[i + 1] - gray[i]).abs()).exp();
                let diff = d_pred.value(i + 1) - d;
                a += p * wt * diff.abs();
                let sg = p * wt * sign(diff) * n_inv;
                da[i + 1] += sg;
                da[i] -= sg;
            }
            if y + 1 < h && mask[i + w] {
                let wt = (-(gray[i + w] - gray[i]).abs()).exp();
                let diff = d_pred.value(i + w) - d;
                a += p * wt * diff.abs();
                let sg = p * wt * sign(diff) * n_inv;
                da[i + w] += sg;
                da[i] -= sg;
            }
        }
    }
    a *= n_inv;
    let value = a / mean;
    let coupling = a / (mean * mean) * n_inv;
    let mut grad = zero_grad(d_pred);
    for i in 0..w * h {
        if mask[i] {
            grad.set(i, da[i] / mean - coupling);
        }
    }
    Ok((value, grad))
}

/// Smallest `|delta d|` over the forward differences touching each pixel.
pub fn edge_kink_margin(d_pred: &FloatMap, conf: &ConfidenceMap) -> Vec<f64> {
    let mask = joint_mask(&[d_pred, conf]);
    let (w, h) = (d_pred.width(), d_pred.height());
    let mut margin = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            for j in [(x + 1 < w).then_some(i + 1), (y + 1 < h).then_some(i + w)].into_iter().flatten() {
                if mask[j] {
                    let d = (d_pred.value(j) - d_pred.value(i)).abs();
                    margin[i] = margin[i].min(d);
                    margin[j] = margin[j].min(d);
                }
            }
        }
    }
    margin
}

/// Weighted sum of the three terms and of their gradients.
pub fn total_loss(
    d_pred: &FloatMap,
    d_gt: &FloatMap,
    conf: &ConfidenceMap,
    image: &RgbImage,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let wts = cfg.weights;
    let (s, gs) = silog_conf(d_pred, d_gt, conf, cfg)?;
    let (g, gg) = grad_match_conf(d_pred, d_gt, conf, cfg)?;
    let (e, ge) = edge_smooth_conf(d_pred, image, conf, cfg)?;
    let (silog_conf, grad_conf, edge_conf) = (wts.silog * s, wts.grad * g, wts.edge * e);
    let mut grad = zero_grad(d_pred);
    for i in 0..grad.len() {
        grad.set(
            i,
            wts.silog * gs.value(i) + wts.grad * gg.value(i) + wts.edge * ge.value(i),
        );
    }
    Ok(LossBreakdown {
        silog_conf,
        grad_conf,
        edge_conf,
        total: silog_conf + grad_conf + edge_conf,
        grad_wrt_pred: grad,
    })
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
///
/// The gradient is taken w.r.t. the unclamped prediction, so it vanishes
/// where the clamp is active.
pub fn bce(pred: &FloatMap, target: &FloatMap, eps: f64) -> Result<(f64, FloatMap), LossError> {
    check_shapes(pred, target, "prediction vs target")?;
    let mask = joint_mask(&[pred, target]);
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = zero_grad(pred);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / count as f64;
    let mut acc = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let raw = pred.value(i);
        let p = raw.clamp(eps, 1.0 - eps);
        let t = target.value(i);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        let inside = raw > eps && raw < 1.0 - eps;
        if inside {
            grad.set(i, (-t / p + (1.0 - t) / (1.0 - p)) * inv_n);
        }
    }
    Ok((acc * inv_n, grad))
}
