use std::path::{Path, PathBuf};

use confdepth::ensemble_confidence::{effective_sigma, ensemble_confidence, EnsembleDisparities, SigmaPolicy};
use confdepth::map_io::write_pfm;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_dataset, save_json};
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceConfig {
    /// Path to the dataset's `manifest.json`.
    pub dataset: PathBuf,
    pub sigma: SigmaPolicy,
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    id: String,
    k: usize,
    sigma_eff: f64,
    mean_confidence: f64,
}

#[derive(Debug, Serialize)]
struct Skipped {
    id: String,
    reason: String,
}

#[derive(Debug, Serialize)]
struct ConfidenceLog {
    sigma: SigmaPolicy,
    samples: Vec<SampleSummary>,
    skipped: Vec<Skipped>,
}

enum Outcome {
    Done(SampleSummary),
    Skipped(Skipped),
}

pub fn run(cfg: &ConfidenceConfig, out: &Path) -> Result<(), CliError> {
    cfg.sigma.validate()?;
    let manifest = load_dataset(&cfg.dataset)?;
    let outcomes = (0..manifest.samples.len())
        .into_par_iter()
        .map(|i| -> Result<Outcome, CliError> {
            let s = manifest.load_sample(i)?;
            if s.ensemble.is_empty() {
                return Ok(Outcome::Skipped(Skipped {
                    id: s.id,
                    reason: "no ensemble members (K < 1)".into(),
                }));
            }
            let ens = EnsembleDisparities::new(s.ensemble)?;
            let (stats, conf) = ensemble_confidence(&ens, &cfg.sigma)?;
            write_pfm(&stats.variance, out.join(format!("{}_variance.pfm", s.id)))?;
            write_pfm(&conf, out.join(format!("{}_confidence.pfm", s.id)))?;
            let n = conf.n_valid();
            let mean_confidence = if n > 0 {
                conf.valid_values().sum::<f64>() / n as f64
            } else {
                f64::NAN
            };
            Ok(Outcome::Done(SampleSummary {
                id: s.id,
                k: ens.k(),
                sigma_eff: effective_sigma(&cfg.sigma, ens.width()),
                mean_confidence,
            }))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut log = ConfidenceLog {
        sigma: cfg.sigma,
        samples: Vec::new(),
        skipped: Vec::new(),
    };
    for o in outcomes {
        match o {
            Outcome::Done(s) => {
                println!("{}: K={} sigma_eff={} mean confidence {:.4}", s.id, s.k, s.sigma_eff, s.mean_confidence);
                log.samples.push(s);
            }
            Outcome::Skipped(s) => {
                eprintln!("{}: skipped, {}", s.id, s.reason);
                log.skipped.push(s);
            }
        }
    }
    save_json(&log, &out.join("confidence.json"))?;
    Ok(())
}
