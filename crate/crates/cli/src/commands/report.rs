use std::path::{Path, PathBuf};

use confdepth::ensemble_confidence::{ensemble_confidence, EnsembleDisparities, SigmaPolicy};
use confdepth::map_io::{write_ppm, FloatMap, LoadedSample};
use confdepth::metrics_eval::median_scale;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig};
use crate::colormap::{overlay, value_range};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub dataset: PathBuf,
    pub predictions: PathBuf,
    pub template: String,
    /// Confidence overlays use the ensemble at this sigma.
    pub sigma: SigmaPolicy,
    /// Colour weight of the overlays against the grayscale image.
    pub alpha: f64,
    /// Relative error mapped to the top of the colour scale.
    pub error_max: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            predictions: PathBuf::new(),
            template: EvalConfig::default().template,
            sigma: SigmaPolicy::default(),
            alpha: 0.6,
            error_max: 0.25,
        }
    }
}

fn render(s: &LoadedSample, pred: &FloatMap, cfg: &ReportConfig, out: &Path) -> Result<(), CliError> {
    let (lo, hi) = value_range(&s.depth_gt);
    write_ppm(&overlay(pred, lo, hi, &s.image, cfg.alpha), out.join(format!("{}_depth.ppm", s.id)))?;

    let scaled = median_scale(pred, &s.depth_gt)?;
    let mut err = FloatMap::filled(pred.width(), pred.height(), 0.0);
    for i in 0..err.len() {
        if scaled.is_valid(i) && s.depth_gt.is_valid(i) {
            let g = s.depth_gt.value(i);
            err.set(i, (scaled.value(i) - g).abs() / g);
        } else {
            err.invalidate(i);
        }
    }
    write_ppm(
        &overlay(&err, 0.0, cfg.error_max, &s.image, cfg.alpha),
        out.join(format!("{}_error.ppm", s.id)),
    )?;

    if !s.ensemble.is_empty() {
        let ens = EnsembleDisparities::new(s.ensemble.clone())?;
        let (_, conf) = ensemble_confidence(&ens, &cfg.sigma)?;
        write_ppm(
            &overlay(&conf, 0.0, 1.0, &s.image, cfg.alpha),
            out.join(format!("{}_confidence.ppm", s.id)),
        )?;
    }
    Ok(())
}

pub fn run(cfg: &ReportConfig, out: &Path) -> Result<(), CliError> {
    cfg.sigma.validate()?;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(CliError::Config(format!("alpha: must be in [0, 1], got {}", cfg.alpha)));
    }
    if !(cfg.error_max > 0.0) {
        return Err(CliError::Config(format!("error_max: must be > 0, got {}", cfg.error_max)));
    }
    let eval_cfg = EvalConfig {
        dataset: cfg.dataset.clone(),
        predictions: cfg.predictions.clone(),
        template: cfg.template.clone(),
    };
    let (samples, preds, table) = evaluate(&eval_cfg)?;
    samples
        .par_iter()
        .zip(preds.par_iter())
        .try_for_each(|(s, p)| render(s, p, cfg, out))?;
    table.save(out, "report")?;
    print!("{}", table.to_csv());
    Ok(())
}
