use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use confdepth::map_io::{write_keypoints, write_manifest, write_pfm, write_ppm, DatasetManifest, SampleRecord};
use confdepth::stereo_geometry::CameraRig;
use confdepth::synthetic_data::{
    derive_seed, gen_scene, generate_benchmark, inject_artifacts, sample_keypoints, simulate_ensemble, ArtifactSpec,
    BenchmarkSpec, GeneratedSample, NoiseModel, SceneSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene: SceneSpec,
    #[serde(default)]
    pub artifacts: Vec<ArtifactSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub seed: u64,
    /// Ensemble members per explicit scene.
    pub k: usize,
    pub noise: NoiseModel,
    pub keypoints_per_sample: usize,
    pub scenes: Vec<SceneEntry>,
    /// Randomly generated samples appended after the explicit scenes.
    pub random: Option<BenchmarkSpec>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 5,
            noise: BenchmarkSpec::default().noise,
            keypoints_per_sample: 0,
            scenes: Vec::new(),
            random: None,
        }
    }
}

pub fn run(cfg: &GenDataConfig, out: &Path) -> Result<(), CliError> {
    if cfg.scenes.is_empty() && cfg.random.is_none() {
        return Err(CliError::Config("scenes: give at least one scene or a random benchmark".into()));
    }
    let mut samples = Vec::new();
    for (i, entry) in cfg.scenes.iter().enumerate() {
        let s = gen_scene(&entry.scene, derive_seed(cfg.seed, i, 2))
            .map_err(|e| CliError::Config(format!("scenes[{i}].scene: {e}")))?;
        let s = inject_artifacts(&s, &entry.artifacts, derive_seed(cfg.seed, i, 4))
            .map_err(|e| CliError::Config(format!("scenes[{i}].artifacts: {e}")))?;
        let s = simulate_ensemble(&s, cfg.k, &cfg.noise, derive_seed(cfg.seed, i, 5))?;
        let keypoints = sample_keypoints(&s, cfg.keypoints_per_sample, derive_seed(cfg.seed, i, 6));
        samples.push(GeneratedSample {
            id: format!("scene_{i:04}"),
            sample: s,
            keypoints,
        });
    }
    if let Some(spec) = &cfg.random {
        samples.extend(generate_benchmark(spec).map_err(|e| CliError::Config(format!("random: {e}")))?);
    }
    write_dataset(&samples, out)?;
    println!("generated {} samples in {}", samples.len(), out.display());
    Ok(())
}

/// Writes one directory per sample plus `manifest.json`.
pub fn write_dataset(samples: &[GeneratedSample], out: &Path) -> Result<(), CliError> {
    let mut rigs: Vec<CameraRig> = Vec::new();
    let mut records = Vec::with_capacity(samples.len());
    for g in samples {
        let s = &g.sample;
        let dir = out.join(&g.id);
        fs::create_dir_all(&dir)?;
        let rel = |name: &str| PathBuf::from(&g.id).join(name);

        write_ppm(&s.image, dir.join("image.ppm"))?;
        write_pfm(&s.depth_gt, dir.join("depth_gt.pfm"))?;
        write_pfm(&s.corruption, dir.join("corruption.pfm"))?;
        let mut ensemble = Vec::new();
        if let Some(ens) = &s.ensemble {
            for (j, m) in ens.members().iter().enumerate() {
                let name = format!("ens_{j:02}.pfm");
                write_pfm(m, dir.join(&name))?;
                ensemble.push(rel(&name));
            }
        }
        let keypoints = if g.keypoints.is_empty() {
            None
        } else {
            write_keypoints(&g.keypoints, dir.join("keypoints.json"))?;
            Some(rel("keypoints.json"))
        };
        let rig_index = match rigs.iter().position(|r| *r == s.rig) {
            Some(i) => i,
            None => {
                rigs.push(s.rig);
                rigs.len() - 1
            }
        };
        records.push(SampleRecord {
            id: g.id.clone(),
            image: rel("image.ppm"),
            depth_gt: rel("depth_gt.pfm"),
            ensemble,
            keypoints,
            corruption: Some(rel("corruption.pfm")),
            rig: format!("rig_{rig_index}"),
        });
    }
    let rigs: BTreeMap<String, CameraRig> = rigs
        .into_iter()
        .enumerate()
        .map(|(i, r)| (format!("rig_{i}"), r))
        .collect();
    write_manifest(&DatasetManifest::new(rigs, records), out.join("manifest.json"))?;
    Ok(())
}
