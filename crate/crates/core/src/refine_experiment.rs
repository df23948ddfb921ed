//! Depth-field refinement under the confidence-weighted loss, and the
//! confidence-head / confidence-aware-loss ablation built on top of it.
//!
//! A depth map stands in for a network's prediction and is optimized
//! directly by momentum gradient descent, so the effect of the loss
//! weighting can be measured without training a backbone.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence_head::{head_features, head_forward, train_head, HeadError, HeadTrainConfig, TrainedHead};
use crate::ensemble_confidence::{
    effective_sigma, ensemble_mean_variance, variance_to_confidence, ConfidenceError, ConfidenceMap,
    EnsembleDisparities, SigmaPolicy, DEFAULT_REF_WIDTH,
};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError};
use crate::map_io::{DatasetManifest, FloatMap, LoadedSample, MapIoError};
use crate::metrics_eval::{depth_metrics, keypoint_metrics, DepthMetrics, KeypointMetrics, MetricsError};
use crate::map_io::StereoKeypoint;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Map(#[from] MapIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub lr: f64,
    pub iters: usize,
    pub momentum: f64,
    /// Weight the loss by confidence; otherwise every valid pixel gets 1.
    pub use_cal: bool,
    /// Take confidence from the trained head instead of the ensemble.
    pub use_ch: bool,
    pub z_min: f64,
    pub z_max: f64,
    pub loss: LossConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lr: 3.0,
            iters: 100,
            momentum: 0.9,
            use_cal: true,
            use_ch: false,
            z_min: 1.0,
            z_max: 1000.0,
            loss: LossConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ExperimentError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ExperimentError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max) {
            return Err(ExperimentError::Config(format!(
                "need 0 < z_min < z_max, got [{}, {}]",
                self.z_min, self.z_max
            )));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub depth: FloatMap,
    /// Total loss before each step, plus the value after the last one.
    pub loss_curve: Vec<f64>,
}

/// Halvings tried for a plain gradient step after a rejected momentum step.
const MAX_BACKTRACKS: usize = 20;

/// Runs `cfg.iters` steps of momentum gradient descent on the total loss,
/// starting from `init` and clamping depth to `[z_min, z_max]` after every
/// step. The gradient is multiplied by the number of valid pixels so the
/// step size does not depend on resolution.
///
/// A step that would raise the loss is rejected: the velocity restarts from
/// zero and a plain gradient step is halved until the loss does not rise
/// (the iterate stays put if none qualifies). The loss curve is therefore
/// non-increasing.
pub fn refine_depth(
    init: &FloatMap,
    supervision: &FloatMap,
    conf: &ConfidenceMap,
    image: &crate::map_io::RgbImage,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, ExperimentError> {
    cfg.validate()?;
    let uniform;
    let conf = if cfg.use_cal {
        conf
    } else {
        uniform = ConfidenceMap::uniform_like(conf, 1.0);
        &uniform
    };
    let loss_at = |d: &FloatMap, step: usize| -> Result<LossBreakdown, ExperimentError> {
        let lb = total_loss(d, supervision, conf, image, &cfg.loss)?;
        if !lb.total.is_finite() {
            return Err(ExperimentError::Numeric(format!("loss is {} at step {step}", lb.total)));
        }
        Ok(lb)
    };
    let n = init.n_valid() as f64;
    let mut d = init.clone();
    let mut lb = loss_at(&d, 0)?;
    let mut velocity = vec![0.0; d.len()];
    let mut curve = Vec::with_capacity(cfg.iters + 1);
    curve.push(lb.total);
    for step in 1..=cfg.iters {
        let g = &lb.grad_wrt_pred;
        let mut next_v = velocity.clone();
        let mut next = d.clone();
        for i in 0..d.len() {
            if d.is_valid(i) {
                next_v[i] = cfg.momentum * velocity[i] + n * g.value(i);
                next.set(i, (d.value(i) - cfg.lr * next_v[i]).clamp(cfg.z_min, cfg.z_max));
            }
        }
        let mut next_lb = loss_at(&next, step)?;
        if next_lb.total > lb.total {
            next_v.iter_mut().for_each(|v| *v = 0.0);
            let mut lr = cfg.lr;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                for i in 0..d.len() {
                    if d.is_valid(i) {
                        next.set(i, (d.value(i) - lr * n * g.value(i)).clamp(cfg.z_min, cfg.z_max));
                    }
                }
                next_lb = loss_at(&next, step)?;
                if next_lb.total <= lb.total {
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                velocity = next_v;
                curve.push(lb.total);
                continue;
            }
        }
        d = next;
        velocity = next_v;
        lb = next_lb;
        curve.push(lb.total);
    }
    Ok(RefineOutcome { depth: d, loss_curve: curve })
}

/// Multiplies the `fraction` of valid pixels with the highest corruption by
/// `factor` (ties broken by pixel index; pixels with zero corruption are
/// never picked). Returns the corrupted supervision and the picked mask.
pub fn corrupt_supervision(
    depth_gt: &FloatMap,
    corruption: &FloatMap,
    fraction: f64,
    factor: f64,
) -> Result<(FloatMap, Vec<bool>), ExperimentError> {
    depth_gt
        .check_shape(corruption, "depth vs corruption")
        .map_err(|e| ExperimentError::Data(e.to_string()))?;
    if !(0.0..=1.0).contains(&fraction) || !(factor > 0.0) {
        return Err(ExperimentError::Config(format!(
            "need fraction in [0, 1] and factor > 0, got {fraction} and {factor}"
        )));
    }
    let mut idx: Vec<usize> = (0..depth_gt.len())
        .filter(|&i| depth_gt.is_valid(i) && corruption.is_valid(i) && corruption.value(i) > 0.0)
        .collect();
    idx.sort_by(|&a, &b| corruption.value(b).total_cmp(&corruption.value(a)).then(a.cmp(&b)));
    let take = (fraction * depth_gt.n_valid() as f64).round() as usize;
    let mut picked = vec![false; depth_gt.len()];
    let mut sup = depth_gt.clone();
    for &i in idx.iter().take(take) {
        picked[i] = true;
        sup.set(i, depth_gt.value(i) * factor);
    }
    Ok((sup, picked))
}

/// A prior prediction: `gt * exp(amplitude * f)` where `f` is a random
/// smooth field in `[-1, 1]` built from a few low-frequency waves, centred,
/// then sharpened as `sign(f) * |f|^exponent` so that most of the map is
/// close to the truth and a few blobs are badly off.
pub fn prior_init(depth_gt: &FloatMap, amplitude: f64, exponent: f64, seed: u64) -> FloatMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (depth_gt.width() as f64, depth_gt.height() as f64);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..TAU);
            let cycles = rng.gen_range(0.5..1.5);
            (
                angle.cos() * cycles / w,
                angle.sin() * cycles / h,
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let mut field = FloatMap::from_fn(depth_gt.width(), depth_gt.height(), |x, y| {
        waves
            .iter()
            .map(|&(fx, fy, ph)| (TAU * (fx * x as f64 + fy * y as f64) + ph).sin())
            .sum::<f64>()
            / waves.len() as f64
    });
    let mean = field.data().iter().sum::<f64>() / field.len() as f64;
    let peak = field.data().iter().fold(0.0f64, |m, v| m.max((v - mean).abs())).max(1e-12);
    field = field.map(|v| (v - mean) / peak);
    field = field.map(|v| v.signum() * v.abs().powf(exponent));
    let mut out = depth_gt.clone();
    for i in 0..out.len() {
        if out.is_valid(i) {
            out.set(i, depth_gt.value(i) * (amplitude * field.value(i)).exp());
        }
    }
    out
}

/// Settings for [`run_ablation`] beyond the grid itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub grid: Vec<RefineConfig>,
    pub sigma_grid: Vec<f64>,
    pub ref_width: usize,
    /// Share of pixels whose supervision is biased.
    pub corrupt_fraction: f64,
    pub corrupt_factor: f64,
    /// Log-amplitude of the smooth error in the initial prediction.
    pub prior_amplitude: f64,
    /// Sharpening exponent of the prior error field (1 keeps it sinusoidal).
    pub prior_exponent: f64,
    pub head: HeadTrainConfig,
    /// The head is trained on the first `head_train_samples` samples.
    pub head_train_samples: usize,
    /// Head confidence threshold defining the "head_confident" mask.
    pub head_mask_threshold: f64,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let cell = |use_ch, use_cal| RefineConfig {
            use_ch,
            use_cal,
            ..RefineConfig::default()
        };
        Self {
            grid: vec![cell(false, false), cell(true, false), cell(false, true), cell(true, true)],
            sigma_grid: vec![0.7],
            ref_width: DEFAULT_REF_WIDTH,
            corrupt_fraction: 0.3,
            corrupt_factor: 1.5,
            prior_amplitude: 0.45,
            prior_exponent: 4.0,
            head: HeadTrainConfig {
                epochs: 150,
                ..HeadTrainConfig::default()
            },
            head_train_samples: 4,
            head_mask_threshold: 0.5,
            seed: 0,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.grid.is_empty() || self.sigma_grid.is_empty() {
            return Err(ExperimentError::Config("grid and sigma_grid must be non-empty".into()));
        }
        for c in &self.grid {
            c.validate()?;
        }
        for &s in &self.sigma_grid {
            SigmaPolicy::new(s, self.ref_width)?;
        }
        if !(self.prior_amplitude >= 0.0 && self.prior_amplitude.is_finite()) {
            return Err(ExperimentError::Config("prior_amplitude must be >= 0".into()));
        }
        if !(self.prior_exponent >= 1.0 && self.prior_exponent.is_finite()) {
            return Err(ExperimentError::Config("prior_exponent must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.head_mask_threshold) {
            return Err(ExperimentError::Config("head_mask_threshold must be in [0, 1]".into()));
        }
        if self.grid.iter().any(|c| c.use_ch) && self.head_train_samples == 0 {
            return Err(ExperimentError::Config("head_train_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Depth metrics for one evaluation mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedMetrics {
    /// `all`: every valid pixel; `clean`: pixels with unbiased supervision;
    /// `artifact_free`: pixels with zero true corruption; `head_confident`:
    /// pixels the head scores at or above the threshold.
    pub mask: String,
    #[serde(flatten)]
    pub metrics: DepthMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub use_ch: bool,
    pub use_cal: bool,
    pub sigma: f64,
    pub lr: f64,
    pub iters: usize,
    /// Means over samples; `n_valid` is the total pixel count.
    pub metrics: Vec<TaggedMetrics>,
    pub keypoints: Option<KeypointMetrics>,
    /// Mean over samples of the per-step total loss.
    pub loss_curve: Vec<f64>,
}

impl CellReport {
    pub fn metric(&self, mask: &str) -> Option<&DepthMetrics> {
        self.metrics.iter().find(|m| m.mask == mask).map(|m| &m.metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub notes: Vec<String>,
    pub seed: u64,
    pub samples: Vec<String>,
    pub config: AblationConfig,
    pub cells: Vec<CellReport>,
}

pub const REPORT_NOTES: [&str; 3] = [
    "depth maps are optimized directly in place of training a network",
    "use_ch without use_cal refines with uniform confidence; head confidence only defines the head_confident evaluation mask",
    "depth metrics are median-scaled over all valid pixels before masking",
];

impl ExperimentReport {
    pub fn cell(&self, use_ch: bool, use_cal: bool, sigma: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.use_ch == use_ch && c.use_cal == use_cal && c.sigma == sigma)
    }

    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("use_ch,use_cal,sigma,are,delta1,are_clean,delta1_clean,mae_mm,acc_2mm\n");
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
        for c in &self.cells {
            let all = c.metric("all");
            let clean = c.metric("clean");
            let kp = c.keypoints.filter(|k| k.n > 0);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.use_ch,
                c.use_cal,
                c.sigma,
                f(all.map(|m| m.are)),
                f(all.map(|m| m.delta1)),
                f(clean.map(|m| m.are)),
                f(clean.map(|m| m.delta1)),
                f(kp.map(|k| k.mae_mm)),
                f(kp.map(|k| k.acc_2mm)),
            ));
        }
        out
    }
}

/// Everything a cell needs from one sample, derived once.
struct Prepared<'a> {
    sample: &'a LoadedSample,
    ensemble: Option<EnsembleDisparities>,
    variance: Option<FloatMap>,
    supervision: FloatMap,
    clean: Vec<bool>,
    artifact_free: Option<Vec<bool>>,
    init: FloatMap,
    keypoints: Vec<StereoKeypoint>,
}

fn prepare<'a>(s: &'a LoadedSample, index: usize, cfg: &AblationConfig) -> Result<Prepared<'a>, ExperimentError> {
    let ensemble = if s.ensemble.is_empty() {
        None
    } else {
        Some(EnsembleDisparities::new(s.ensemble.clone())?)
    };
    let variance = ensemble.as_ref().map(|e| ensemble_mean_variance(e).variance);
    let (supervision, clean) = match &s.corruption {
        Some(c) => {
            let (sup, picked) = corrupt_supervision(&s.depth_gt, c, cfg.corrupt_fraction, cfg.corrupt_factor)?;
            (sup, picked.iter().map(|p| !p).collect())
        }
        None => (s.depth_gt.clone(), vec![true; s.depth_gt.len()]),
    };
    let artifact_free = s
        .corruption
        .as_ref()
        .map(|c| (0..c.len()).map(|i| c.is_valid(i) && c.value(i) == 0.0).collect::<Vec<_>>());
    let init = prior_init(&s.depth_gt, cfg.prior_amplitude, cfg.prior_exponent, cfg.seed.wrapping_add(index as u64));
    let keypoints = s
        .keypoints
        .iter()
        .filter(|k| k.rectified)
        .map(|k| k.keypoint)
        .collect();
    Ok(Prepared {
        sample: s,
        ensemble,
        variance,
        supervision,
        clean,
        artifact_free,
        init,
        keypoints,
    })
}

fn ensemble_conf(p: &Prepared, sigma: f64, ref_width: usize) -> Result<ConfidenceMap, ExperimentError> {
    let var = p.variance.as_ref().ok_or_else(|| {
        ExperimentError::Config(format!("sample {} has no ensemble maps for confidence labels", p.sample.id))
    })?;
    let policy = SigmaPolicy::new(sigma, ref_width)?;
    Ok(variance_to_confidence(var, effective_sigma(&policy, var.width()))?)
}

/// Trains the confidence head on the first samples with ensemble labels at
/// the given `sigma`.
fn train_head_for_sigma(prepared: &[Prepared], sigma: f64, cfg: &AblationConfig) -> Result<TrainedHead, ExperimentError> {
    let mut train = Vec::new();
    for p in prepared.iter().take(cfg.head_train_samples) {
        let labels = ensemble_conf(p, sigma, cfg.ref_width)?;
        let var = p.variance.as_ref().expect("checked by ensemble_conf");
        let policy = SigmaPolicy::new(sigma, cfg.ref_width)?;
        let feats = head_features(&p.sample.image, var, effective_sigma(&policy, var.width()))?;
        train.push((feats, labels));
    }
    Ok(train_head(&train, &cfg.head)?)
}

fn head_conf(p: &Prepared, head: &TrainedHead, sigma: f64, ref_width: usize) -> Result<ConfidenceMap, ExperimentError> {
    let var = p
        .variance
        .as_ref()
        .ok_or_else(|| ExperimentError::Config(format!("sample {} has no ensemble maps for head features", p.sample.id)))?;
    let policy = SigmaPolicy::new(sigma, ref_width)?;
    let feats = head_features(&p.sample.image, var, effective_sigma(&policy, var.width()))?;
    Ok(head_forward(&feats, &head.params)?)
}

fn mean_metrics(mask: &str, per_sample: &[DepthMetrics]) -> TaggedMetrics {
    let n = per_sample.len() as f64;
    TaggedMetrics {
        mask: mask.to_string(),
        metrics: DepthMetrics {
            are: per_sample.iter().map(|m| m.are).sum::<f64>() / n,
            delta1: per_sample.iter().map(|m| m.delta1).sum::<f64>() / n,
            n_valid: per_sample.iter().map(|m| m.n_valid).sum(),
        },
    }
}

/// Loads every sample of `manifest` and runs [`run_ablation_on`].
pub fn run_ablation(manifest: &DatasetManifest, cfg: &AblationConfig) -> Result<ExperimentReport, ExperimentError> {
    let samples = manifest.load_all()?;
    run_ablation_on(&samples, cfg)
}

/// Evaluates every (grid config, sigma) cell on every sample.
///
/// Supervision is the ground truth with the most corrupted pixels biased;
/// refinement starts from a smoothly perturbed copy of the ground truth
/// standing in for a pretrained prediction.
pub fn run_ablation_on(samples: &[LoadedSample], cfg: &AblationConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ExperimentError::Data("no samples to evaluate".into()));
    }
    let prepared = samples
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(s, i, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let needs_ensemble = cfg.grid.iter().any(|c| c.use_cal || c.use_ch);
    if needs_ensemble {
        if let Some(p) = prepared.iter().find(|p| p.ensemble.is_none()) {
            return Err(ExperimentError::Config(format!(
                "sample {} has no ensemble maps, required by confidence-weighted cells",
                p.sample.id
            )));
        }
    }
    let mut cells = Vec::with_capacity(cfg.grid.len() * cfg.sigma_grid.len());
    for &sigma in &cfg.sigma_grid {
        let head = if cfg.grid.iter().any(|c| c.use_ch) {
            let h = train_head_for_sigma(&prepared, sigma, cfg)?;
            log::info!(
                "sigma {sigma}: head bce {:.4} -> {:.4}",
                h.losses.first().copied().unwrap_or(f64::NAN),
                h.losses.last().copied().unwrap_or(f64::NAN)
            );
            Some(h)
        } else {
            None
        };
        for rc in &cfg.grid {
            cells.push(run_cell(&prepared, rc, sigma, head.as_ref(), cfg)?);
        }
    }
    Ok(ExperimentReport {
        notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
        seed: cfg.seed,
        samples: samples.iter().map(|s| s.id.clone()).collect(),
        config: cfg.clone(),
        cells,
    })
}

fn run_cell(
    prepared: &[Prepared],
    rc: &RefineConfig,
    sigma: f64,
    head: Option<&TrainedHead>,
    cfg: &AblationConfig,
) -> Result<CellReport, ExperimentError> {
    let mut all = Vec::new();
    let mut clean = Vec::new();
    let mut confident = Vec::new();
    let mut free = Vec::new();
    let mut kp_err_sum = 0.0;
    let mut kp_hits = 0.0;
    let mut kp_n = 0usize;
    let mut kp_excluded = 0usize;
    let mut any_kp = false;
    let mut curve: Vec<f64> = vec![0.0; rc.iters + 1];
    for p in prepared {
        let head_map = match head {
            Some(h) if rc.use_ch => Some(head_conf(p, h, sigma, cfg.ref_width)?),
            _ => None,
        };
        let conf = match (&head_map, rc.use_cal) {
            (Some(h), true) => h.clone(),
            (None, true) => ensemble_conf(p, sigma, cfg.ref_width)?,
            (_, false) => ConfidenceMap::uniform_like(&p.supervision, 1.0),
        };
        let out = refine_depth(&p.init, &p.supervision, &conf, &p.sample.image, rc)?;
        for (c, v) in curve.iter_mut().zip(&out.loss_curve) {
            *c += v / prepared.len() as f64;
        }
        let gt = &p.sample.depth_gt;
        all.push(depth_metrics(&out.depth, gt, None)?);
        clean.push(depth_metrics(&out.depth, gt, Some(&p.clean))?);
        if let Some(m) = p.artifact_free.as_ref().filter(|m| m.iter().any(|&v| v)) {
            free.push(depth_metrics(&out.depth, gt, Some(m))?);
        }
        if let Some(h) = &head_map {
            let mask: Vec<bool> = (0..h.len())
                .map(|i| h.is_valid(i) && h.value(i) >= cfg.head_mask_threshold)
                .collect();
            if mask.iter().any(|&m| m) {
                confident.push(depth_metrics(&out.depth, gt, Some(&mask))?);
            }
        }
        if !p.keypoints.is_empty() {
            any_kp = true;
            let k = keypoint_metrics(&out.depth, &p.keypoints, &p.sample.rig);
            if k.n > 0 {
                kp_err_sum += k.mae_mm * k.n as f64;
                kp_hits += k.acc_2mm * k.n as f64;
            }
            kp_n += k.n;
            kp_excluded += k.excluded;
        }
    }
    let mut metrics = vec![mean_metrics("all", &all), mean_metrics("clean", &clean)];
    if !free.is_empty() {
        metrics.push(mean_metrics("artifact_free", &free));
    }
    if !confident.is_empty() {
        metrics.push(mean_metrics("head_confident", &confident));
    }
    let keypoints = any_kp.then(|| KeypointMetrics {
        mae_mm: if kp_n > 0 { kp_err_sum / kp_n as f64 } else { f64::NAN },
        acc_2mm: if kp_n > 0 { kp_hits / kp_n as f64 } else { f64::NAN },
        n: kp_n,
        excluded: kp_excluded,
    });
    Ok(CellReport {
        use_ch: rc.use_ch,
        use_cal: rc.use_cal,
        sigma,
        lr: rc.lr,
        iters: rc.iters,
        metrics,
        keypoints,
        loss_curve: curve,
    })
}
