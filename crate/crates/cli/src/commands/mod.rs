mod ablate;
mod confidence;
mod eval;
mod gen_data;
mod refine;
mod report;
mod train_head;

use std::fs;
use std::path::{Path, PathBuf};

use confdepth::map_io::{read_manifest, write_json, DatasetManifest};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{self, Override};
use crate::error::CliError;

/// File every command writes with its fully resolved configuration. Passing
/// it back through `--config` replays the run.
pub const CONFIG_ECHO: &str = "run_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Confidence,
    Refine,
    Ablate,
    Eval,
    Report,
    TrainHead,
}

pub struct RunArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub force: bool,
    pub overrides: &'a [Override],
}

pub fn run(cmd: Command, args: &RunArgs) -> Result<(), CliError> {
    match cmd {
        Command::GenData => execute(args, gen_data::run),
        Command::Confidence => execute(args, confidence::run),
        Command::Refine => execute(args, refine::run),
        Command::Ablate => execute(args, ablate::run),
        Command::Eval => execute(args, eval::run),
        Command::Report => execute(args, report::run),
        Command::TrainHead => execute(args, train_head::run),
    }
}

fn execute<T, F>(args: &RunArgs, body: F) -> Result<(), CliError>
where
    T: Serialize + DeserializeOwned + Default,
    F: FnOnce(&T, &Path) -> Result<(), CliError>,
{
    let cfg: T = config::resolve(args.config, args.overrides)?;
    prepare_out_dir(args.out, args.force)?;
    save_json(&cfg, &args.out.join(CONFIG_ECHO))?;
    body(&cfg, args.out)
}

/// Creates `out`, refusing to write into a non-empty directory unless
/// `force` is set.
fn prepare_out_dir(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Config(format!("{} exists and is not a directory", out.display())));
        }
        let occupied = fs::read_dir(out)?.next().is_some();
        if occupied && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty (use --force to write into it)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), CliError> {
    Ok(write_json(value, path)?)
}

fn save_text(text: &str, path: &Path) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<DatasetManifest, CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Config("dataset: path to a manifest.json is required".into()));
    }
    Ok(read_manifest(path)?)
}

/// `template` with every `{id}` replaced, relative to `dir`.
fn expand(dir: &Path, template: &str, id: &str) -> PathBuf {
    dir.join(template.replace("{id}", id))
}

/// `{}` formatting, or an empty field for NaN.
fn csv_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}
