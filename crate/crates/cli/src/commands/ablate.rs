use std::path::{Path, PathBuf};

use confdepth::refine_experiment::{run_ablation, AblationConfig};
use serde::{Deserialize, Serialize};

use super::{load_dataset, save_json, save_text};
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub dataset: PathBuf,
    pub ablation: AblationConfig,
}

pub fn run(cfg: &AblateConfig, out: &Path) -> Result<(), CliError> {
    cfg.ablation.validate()?;
    let manifest = load_dataset(&cfg.dataset)?;
    let report = run_ablation(&manifest, &cfg.ablation)?;
    let csv = report.to_csv();
    save_json(&report, &out.join("report.json"))?;
    save_text(&csv, &out.join("report.csv"))?;
    print!("{csv}");
    Ok(())
}
