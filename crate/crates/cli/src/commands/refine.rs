use std::path::{Path, PathBuf};

use confdepth::confidence_head::{head_features, head_forward, HeadParams};
use confdepth::ensemble_confidence::{
    effective_sigma, ensemble_mean_variance, variance_to_confidence, ConfidenceMap, EnsembleDisparities, SigmaPolicy,
};
use confdepth::map_io::{write_pfm, LoadedSample};
use confdepth::metrics_eval::{depth_metrics, keypoint_metrics, DepthMetrics, KeypointMetrics};
use confdepth::refine_experiment::{corrupt_supervision, prior_init, refine_depth, AblationConfig, RefineConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_num, load_dataset, save_json, save_text};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineCmdConfig {
    pub dataset: PathBuf,
    pub sigma: SigmaPolicy,
    pub refine: RefineConfig,
    pub corrupt_fraction: f64,
    pub corrupt_factor: f64,
    pub prior_amplitude: f64,
    pub prior_exponent: f64,
    /// Head parameters from `train-head`, required when `refine.use_ch` is set.
    pub head: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RefineCmdConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            dataset: PathBuf::new(),
            sigma: SigmaPolicy::default(),
            refine: RefineConfig::default(),
            corrupt_fraction: a.corrupt_fraction,
            corrupt_factor: a.corrupt_factor,
            prior_amplitude: a.prior_amplitude,
            prior_exponent: a.prior_exponent,
            head: None,
            seed: a.seed,
        }
    }
}

#[derive(Debug, Serialize)]
struct SampleResult {
    id: String,
    all: DepthMetrics,
    clean: DepthMetrics,
    keypoints: Option<KeypointMetrics>,
    initial_loss: f64,
    final_loss: f64,
}

#[derive(Debug, Serialize)]
struct RefineReport {
    samples: Vec<SampleResult>,
    mean_are: f64,
    mean_delta1: f64,
    mean_are_clean: f64,
    mean_delta1_clean: f64,
}

fn confidence_for(
    s: &LoadedSample,
    cfg: &RefineCmdConfig,
    head: Option<&HeadParams>,
) -> Result<ConfidenceMap, CliError> {
    if !cfg.refine.use_cal {
        return Ok(ConfidenceMap::uniform_like(&s.depth_gt, 1.0));
    }
    if s.ensemble.is_empty() {
        return Err(CliError::Data(format!("sample {} has no ensemble maps for confidence", s.id)));
    }
    let ens = EnsembleDisparities::new(s.ensemble.clone())?;
    let var = ensemble_mean_variance(&ens).variance;
    let sigma = effective_sigma(&cfg.sigma, var.width());
    match head {
        Some(p) => Ok(head_forward(&head_features(&s.image, &var, sigma)?, p)?),
        None => Ok(variance_to_confidence(&var, sigma)?),
    }
}

fn refine_one(
    index: usize,
    s: &LoadedSample,
    cfg: &RefineCmdConfig,
    head: Option<&HeadParams>,
    out: &Path,
) -> Result<SampleResult, CliError> {
    let (supervision, clean) = match &s.corruption {
        Some(c) => {
            let (sup, picked) = corrupt_supervision(&s.depth_gt, c, cfg.corrupt_fraction, cfg.corrupt_factor)?;
            (sup, picked.iter().map(|p| !p).collect())
        }
        None => (s.depth_gt.clone(), vec![true; s.depth_gt.len()]),
    };
    let init = prior_init(
        &s.depth_gt,
        cfg.prior_amplitude,
        cfg.prior_exponent,
        cfg.seed.wrapping_add(index as u64),
    );
    let conf = confidence_for(s, cfg, head)?;
    let outcome = refine_depth(&init, &supervision, &conf, &s.image, &cfg.refine)?;
    write_pfm(&outcome.depth, out.join(format!("{}_refined.pfm", s.id)))?;

    let kps: Vec<_> = s.keypoints.iter().filter(|k| k.rectified).map(|k| k.keypoint).collect();
    Ok(SampleResult {
        id: s.id.clone(),
        all: depth_metrics(&outcome.depth, &s.depth_gt, None)?,
        clean: depth_metrics(&outcome.depth, &s.depth_gt, Some(&clean))?,
        keypoints: (!kps.is_empty()).then(|| keypoint_metrics(&outcome.depth, &kps, &s.rig)),
        initial_loss: outcome.loss_curve[0],
        final_loss: *outcome.loss_curve.last().expect("curve has the initial loss"),
    })
}

pub fn run(cfg: &RefineCmdConfig, out: &Path) -> Result<(), CliError> {
    cfg.refine.validate()?;
    cfg.sigma.validate()?;
    let head = match (&cfg.head, cfg.refine.use_ch) {
        (Some(p), true) => Some(HeadParams::load(p)?),
        (None, true) => return Err(CliError::Config("head: refine.use_ch needs a trained head file".into())),
        (_, false) => None,
    };
    let manifest = load_dataset(&cfg.dataset)?;
    let samples = manifest.load_all()?;
    if samples.is_empty() {
        return Err(CliError::Data("dataset has no samples".into()));
    }
    let results = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| refine_one(i, s, cfg, head.as_ref(), out))
        .collect::<Result<Vec<_>, _>>()?;

    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let report = RefineReport {
        mean_are: mean(&|r| r.all.are),
        mean_delta1: mean(&|r| r.all.delta1),
        mean_are_clean: mean(&|r| r.clean.are),
        mean_delta1_clean: mean(&|r| r.clean.delta1),
        samples: results,
    };

    let mut csv = String::from("id,are,delta1,are_clean,delta1_clean,mae_mm,acc_2mm,final_loss\n");
    for r in &report.samples {
        let (mae, acc) = r.keypoints.map_or((f64::NAN, f64::NAN), |k| (k.mae_mm, k.acc_2mm));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.id,
            r.all.are,
            r.all.delta1,
            r.clean.are,
            r.clean.delta1,
            csv_num(mae),
            csv_num(acc),
            r.final_loss
        ));
    }
    save_json(&report, &out.join("refine.json"))?;
    save_text(&csv, &out.join("refine.csv"))?;
    println!(
        "refined {} samples: ARE {:.4} delta1 {:.4} | clean ARE {:.4} delta1 {:.4}",
        report.samples.len(),
        report.mean_are,
        report.mean_delta1,
        report.mean_are_clean,
        report.mean_delta1_clean
    );
    Ok(())
}
