use std::path::{Path, PathBuf};

use confdepth::confidence_head::{head_features, head_forward, train_head, FeatureMap, HeadTrainConfig};
use confdepth::ensemble_confidence::{
    effective_sigma, ensemble_mean_variance, variance_to_confidence, ConfidenceMap, EnsembleDisparities, SigmaPolicy,
};
use confdepth::map_io::write_pfm;
use confdepth::metrics_eval::pixel_auc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_dataset, save_json};
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHeadConfig {
    pub dataset: PathBuf,
    /// Sigma of the ensemble confidence used as training labels.
    pub sigma: SigmaPolicy,
    pub head: HeadTrainConfig,
    /// Train on the first this many samples; 0 uses all of them.
    pub train_samples: usize,
}

#[derive(Debug, Serialize)]
struct SampleScore {
    id: String,
    train: bool,
    /// Ranking quality of the head output against labels thresholded at 0.5.
    auc: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TrainLog {
    losses: Vec<f64>,
    samples: Vec<SampleScore>,
}

pub fn run(cfg: &TrainHeadConfig, out: &Path) -> Result<(), CliError> {
    cfg.sigma.validate()?;
    let manifest = load_dataset(&cfg.dataset)?;
    let samples = manifest.load_all()?;
    let data = samples
        .par_iter()
        .map(|s| -> Result<(FeatureMap, ConfidenceMap), CliError> {
            if s.ensemble.is_empty() {
                return Err(CliError::Data(format!("sample {} has no ensemble maps for labels", s.id)));
            }
            let ens = EnsembleDisparities::new(s.ensemble.clone())?;
            let var = ensemble_mean_variance(&ens).variance;
            let sigma = effective_sigma(&cfg.sigma, var.width());
            Ok((head_features(&s.image, &var, sigma)?, variance_to_confidence(&var, sigma)?))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_train = if cfg.train_samples == 0 {
        data.len()
    } else {
        cfg.train_samples.min(data.len())
    };
    if n_train == 0 {
        return Err(CliError::Data("dataset has no samples".into()));
    }
    let trained = train_head(&data[..n_train], &cfg.head)?;
    let final_loss = *trained.losses.last().expect("losses include the final value");
    if !final_loss.is_finite() {
        return Err(CliError::Numeric(format!("head training diverged (bce {final_loss})")));
    }
    trained.params.save(&out.join("head.bin"))?;

    let scores = samples
        .par_iter()
        .zip(data.par_iter())
        .enumerate()
        .map(|(i, (s, (feat, labels)))| -> Result<SampleScore, CliError> {
            let pred = head_forward(feat, &trained.params)?;
            write_pfm(&pred, out.join(format!("{}_head_confidence.pfm", s.id)))?;
            let (scores, hits): (Vec<f64>, Vec<bool>) = (0..pred.len())
                .filter(|&j| labels.is_valid(j))
                .map(|j| (pred.value(j), labels.value(j) >= 0.5))
                .unzip();
            Ok(SampleScore {
                id: s.id.clone(),
                train: i < n_train,
                auc: pixel_auc(&scores, &hits),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    println!(
        "trained on {n_train} samples: bce {:.4} -> {final_loss:.4}",
        trained.losses.first().copied().unwrap_or(final_loss)
    );
    save_json(
        &TrainLog {
            losses: trained.losses,
            samples: scores,
        },
        &out.join("training.json"),
    )?;
    Ok(())
}
