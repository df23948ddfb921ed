//! Ensemble disagreement to per-pixel confidence.
//!
//! `K` disparity maps are reduced to a per-pixel mean and population
//! variance `v`, and the variance is mapped to a probability with
//! `exp(-v / (2 sigma^2))`. `sigma` is expressed in disparity pixels at a
//! reference width and scaled linearly with the working resolution.

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map_io::{FloatMap, MapIoError};

/// Reference image width, in pixels, at which `sigma_base` is expressed.
pub const DEFAULT_REF_WIDTH: usize = 518;
pub const DEFAULT_SIGMA: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble member {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Shape {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Map(#[from] MapIoError),
}

/// `K >= 1` disparity maps of identical resolution.
#[derive(Debug, Clone)]
pub struct EnsembleDisparities {
    members: Vec<FloatMap>,
}

impl EnsembleDisparities {
    pub fn new(members: Vec<FloatMap>) -> Result<Self, ConfidenceError> {
        let first = members.first().ok_or(ConfidenceError::EmptyEnsemble)?;
        for (index, m) in members.iter().enumerate() {
            if !m.same_shape(first) {
                return Err(ConfidenceError::Shape {
                    index,
                    got_w: m.width(),
                    got_h: m.height(),
                    want_w: first.width(),
                    want_h: first.height(),
                });
            }
        }
        Ok(Self { members })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[FloatMap] {
        &self.members
    }

    pub fn width(&self) -> usize {
        self.members[0].width()
    }

    pub fn height(&self) -> usize {
        self.members[0].height()
    }

    /// AND of the member masks.
    pub fn joint_mask(&self) -> Vec<bool> {
        let mut mask = self.members[0].mask().to_vec();
        for m in &self.members[1..] {
            for (a, &b) in mask.iter_mut().zip(m.mask()) {
                *a &= b;
            }
        }
        mask
    }
}

/// Per-pixel ensemble mean and population variance (disparity² units).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub mean: FloatMap,
    pub variance: FloatMap,
}

pub fn ensemble_mean_variance(ens: &EnsembleDisparities) -> VarianceMap {
    let k = ens.k();
    if k == 1 {
        log::warn!("single-member ensemble: variance is zero everywhere");
    }
    let n = ens.members[0].len();
    let mask = ens.joint_mask();
    let inv_k = 1.0 / k as f64;
    let mut mean = vec![f64::NAN; n];
    let mut var = vec![f64::NAN; n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        // shifted by the first member so identical members give exactly zero
        let x0 = ens.members[0].value(i);
        let mu_s = ens.members.iter().map(|m| m.value(i) - x0).sum::<f64>() * inv_k;
        let v = ens
            .members
            .iter()
            .map(|m| {
                let d = (m.value(i) - x0) - mu_s;
                d * d
            })
            .sum::<f64>()
            * inv_k;
        mean[i] = x0 + mu_s;
        var[i] = v;
    }
    let (w, h) = (ens.width(), ens.height());
    VarianceMap {
        mean: FloatMap::with_mask(w, h, mean, mask.clone()).expect("shape checked"),
        variance: FloatMap::with_mask(w, h, var, mask).expect("shape checked"),
    }
}

/// How `sigma` follows image resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaPolicy {
    pub sigma_base: f64,
    pub ref_width: usize,
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self {
            sigma_base: DEFAULT_SIGMA,
            ref_width: DEFAULT_REF_WIDTH,
        }
    }
}

impl SigmaPolicy {
    pub fn new(sigma_base: f64, ref_width: usize) -> Result<Self, ConfidenceError> {
        let p = Self {
            sigma_base,
            ref_width,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfidenceError> {
        if !(self.sigma_base > 0.0 && self.sigma_base.is_finite()) || self.ref_width == 0 {
            return Err(ConfidenceError::Parameter(format!(
                "sigma_base must be > 0 and ref_width > 0 (got {}, {})",
                self.sigma_base, self.ref_width
            )));
        }
        Ok(())
    }

    pub fn with_sigma(self, sigma_base: f64) -> Self {
        Self { sigma_base, ..self }
    }
}

/// `sigma_base * width / ref_width`.
pub fn effective_sigma(policy: &SigmaPolicy, width: usize) -> f64 {
    policy.sigma_base * (width as f64 / policy.ref_width as f64)
}

/// A map of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(FloatMap);

impl ConfidenceMap {
    pub fn new(map: FloatMap) -> Result<Self, ConfidenceError> {
        if let Some(v) = map.valid_values().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(ConfidenceError::Parameter(format!(
                "confidence value {v} outside [0, 1]"
            )));
        }
        Ok(Self(map))
    }

    /// Every pixel valid with confidence `c`.
    pub fn uniform(width: usize, height: usize, c: f64) -> Self {
        assert!((0.0..=1.0).contains(&c));
        Self(FloatMap::filled(width, height, c))
    }

    /// Same mask as `like`, value `c` on its valid pixels.
    pub fn uniform_like(like: &FloatMap, c: f64) -> Self {
        assert!((0.0..=1.0).contains(&c));
        Self(like.map(|_| c))
    }

    pub fn into_map(self) -> FloatMap {
        self.0
    }
}

impl Deref for ConfidenceMap {
    type Target = FloatMap;

    fn deref(&self) -> &FloatMap {
        &self.0
    }
}

/// `exp(-v / (2 sigma^2))` per valid pixel; invalid pixels carry 0.
pub fn variance_to_confidence(var: &FloatMap, sigma_eff: f64) -> Result<ConfidenceMap, ConfidenceError> {
    if !(sigma_eff > 0.0 && sigma_eff.is_finite()) {
        return Err(ConfidenceError::Parameter(format!(
            "sigma must be > 0, got {sigma_eff}"
        )));
    }
    if let Some(v) = var.valid_values().find(|v| *v < 0.0) {
        return Err(ConfidenceError::Parameter(format!("negative variance {v}")));
    }
    let denom = 2.0 * sigma_eff * sigma_eff;
    let data = (0..var.len())
        .map(|i| {
            if var.is_valid(i) {
                (-var.value(i) / denom).exp()
            } else {
                0.0
            }
        })
        .collect();
    let map = FloatMap::with_mask(var.width(), var.height(), data, var.mask().to_vec())?;
    Ok(ConfidenceMap(map))
}

/// Mean/variance followed by the confidence mapping at the policy's
/// effective sigma for this resolution.
pub fn ensemble_confidence(
    ens: &EnsembleDisparities,
    policy: &SigmaPolicy,
) -> Result<(VarianceMap, ConfidenceMap), ConfidenceError> {
    policy.validate()?;
    let stats = ensemble_mean_variance(ens);
    let sigma = effective_sigma(policy, ens.width());
    let conf = variance_to_confidence(&stats.variance, sigma)?;
    Ok((stats, conf))
}
