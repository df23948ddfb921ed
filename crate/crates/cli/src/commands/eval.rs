use std::path::{Path, PathBuf};

use confdepth::map_io::{read_pfm, FloatMap, LoadedSample};
use confdepth::metrics_eval::{depth_metrics, keypoint_metrics};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_num, expand, load_dataset, save_json, save_text};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset: PathBuf,
    /// Directory holding the predicted depth maps.
    pub predictions: PathBuf,
    /// File name of a sample's prediction inside `predictions`; `{id}` is
    /// replaced by the sample id.
    pub template: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            predictions: PathBuf::new(),
            template: "{id}_refined.pfm".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub are: f64,
    pub delta1: f64,
    pub n_valid: usize,
    pub mae_mm: f64,
    pub acc_2mm: f64,
    pub n_keypoints: usize,
}

#[derive(Debug, Serialize)]
pub struct EvalTable {
    pub samples: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalTable {
    fn new(samples: Vec<EvalRow>) -> Self {
        let n = samples.len() as f64;
        let kp_n: usize = samples.iter().map(|r| r.n_keypoints).sum();
        let kp_mean = |f: fn(&EvalRow) -> f64| {
            if kp_n == 0 {
                f64::NAN
            } else {
                samples
                    .iter()
                    .filter(|r| r.n_keypoints > 0)
                    .map(|r| f(r) * r.n_keypoints as f64)
                    .sum::<f64>()
                    / kp_n as f64
            }
        };
        let mean = EvalRow {
            id: "mean".into(),
            are: samples.iter().map(|r| r.are).sum::<f64>() / n,
            delta1: samples.iter().map(|r| r.delta1).sum::<f64>() / n,
            n_valid: samples.iter().map(|r| r.n_valid).sum(),
            mae_mm: kp_mean(|r| r.mae_mm),
            acc_2mm: kp_mean(|r| r.acc_2mm),
            n_keypoints: kp_n,
        };
        Self { samples, mean }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,are,delta1,mae_mm,acc_2mm\n");
        for r in self.samples.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                r.are,
                r.delta1,
                csv_num(r.mae_mm),
                csv_num(r.acc_2mm)
            ));
        }
        out
    }

    pub fn save(&self, out: &Path, stem: &str) -> Result<(), CliError> {
        save_json(self, &out.join(format!("{stem}.json")))?;
        save_text(&self.to_csv(), &out.join(format!("{stem}.csv")))
    }
}

pub fn eval_row(s: &LoadedSample, pred: &FloatMap) -> Result<EvalRow, CliError> {
    if !pred.same_shape(&s.depth_gt) {
        return Err(CliError::Data(format!(
            "sample {}: prediction is {}x{}, ground truth {}x{}",
            s.id,
            pred.width(),
            pred.height(),
            s.depth_gt.width(),
            s.depth_gt.height()
        )));
    }
    let m = depth_metrics(pred, &s.depth_gt, None)?;
    let kps: Vec<_> = s.keypoints.iter().filter(|k| k.rectified).map(|k| k.keypoint).collect();
    let k = keypoint_metrics(pred, &kps, &s.rig);
    Ok(EvalRow {
        id: s.id.clone(),
        are: m.are,
        delta1: m.delta1,
        n_valid: m.n_valid,
        mae_mm: k.mae_mm,
        acc_2mm: k.acc_2mm,
        n_keypoints: k.n,
    })
}

pub fn evaluate(cfg: &EvalConfig) -> Result<(Vec<LoadedSample>, Vec<FloatMap>, EvalTable), CliError> {
    let manifest = load_dataset(&cfg.dataset)?;
    let samples = manifest.load_all()?;
    if samples.is_empty() {
        return Err(CliError::Data("dataset has no samples".into()));
    }
    let preds = samples
        .par_iter()
        .map(|s| Ok(read_pfm(expand(&cfg.predictions, &cfg.template, &s.id))?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows = samples
        .par_iter()
        .zip(preds.par_iter())
        .map(|(s, p)| eval_row(s, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((samples, preds, EvalTable::new(rows)))
}

pub fn run(cfg: &EvalConfig, out: &Path) -> Result<(), CliError> {
    let (_, _, table) = evaluate(cfg)?;
    table.save(out, "eval")?;
    print!("{}", table.to_csv());
    Ok(())
}
