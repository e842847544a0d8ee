//! Command-line front end: `predict`, `train`, `evaluate` and `phantom`.

mod evaluate;
mod predict;
mod train;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::BpregError;
use crate::model::SliceScoreModel;
use crate::phantom::{generate_phantom_dataset, write_dataset, DatasetConfig};
use crate::postprocess::ModelCharacteristics;
use crate::volume::{load_volume, preprocess_volume, volume_id_from_path, PreprocessedVolume, VolumeFormat};

pub use evaluate::{cmd_evaluate, CompareReport, EvalReport, EvaluateArgs};
pub use predict::{cmd_predict, PredictArgs, OUTPUT_README};
pub use train::{cmd_train, TrainArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const MODEL_DIR_ENV: &str = "BPREG_MODEL_DIR";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CHARACTERISTICS_FILE: &str = "characteristics.json";

#[derive(Debug, Parser)]
#[command(name = "bpreg", version, about = "Body part regression for CT volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a body part metadata JSON per volume.
    Predict(PredictArgs),
    /// Train a slice score model.
    Train(TrainArgs),
    /// Landmark metrics of a model on annotated volumes.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub train: usize,
    #[arg(long, default_value_t = 4)]
    pub val: usize,
    #[arg(long, default_value_t = 4)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with dataset settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Predict(a) => cmd_predict(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Phantom(a) => cmd_phantom(&a),
    }
}

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
}

pub fn exit_code_for(e: &BpregError) -> i32 {
    match e {
        BpregError::Config(_) | BpregError::Reference(_) => EXIT_CONFIG,
        _ => EXIT_PARTIAL,
    }
}

pub(crate) fn fail(e: &BpregError) -> i32 {
    log::error!("{e}");
    exit_code_for(e)
}

pub fn cmd_phantom(args: &PhantomArgs) -> i32 {
    let run = || -> crate::Result<()> {
        let cfg = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| BpregError::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => DatasetConfig::default(),
        };
        let ds = generate_phantom_dataset(args.train, args.val, args.test, &cfg, args.seed)?;
        write_dataset(&ds, &args.out)?;
        log::info!(
            "wrote {} train, {} val, {} test phantoms to {}",
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            args.out.display()
        );
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

/// Model directory from the argument or the environment.
pub fn resolve_model_dir(arg: Option<&Path>) -> crate::Result<PathBuf> {
    match arg {
        Some(p) => Ok(p.to_path_buf()),
        None => std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            BpregError::Config(format!("no model directory given and {MODEL_DIR_ENV} is not set"))
        }),
    }
}

pub fn load_model_dir(dir: &Path) -> crate::Result<(SliceScoreModel, ModelCharacteristics)> {
    let model = SliceScoreModel::load(&dir.join(MODEL_FILE))?;
    let chars = ModelCharacteristics::load(&dir.join(CHARACTERISTICS_FILE))?;
    Ok((model, chars))
}

/// Volume files (`.nii`, `.nii.gz`, raw `.json`) in `dir`, sorted.
pub fn discover_volumes(dir: &Path, recursive: bool) -> crate::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| BpregError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| BpregError::io(dir, e))?.path();
        if path.is_dir() {
            if recursive {
                out.extend(discover_volumes(&path, true)?);
            }
        } else if VolumeFormat::from_path(&path).is_some() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_preprocessed(path: &Path) -> crate::Result<PreprocessedVolume> {
    let format = VolumeFormat::from_path(path).ok_or_else(|| BpregError::format(path, "unknown extension"))?;
    let raw = load_volume(path, format)?;
    Ok(preprocess_volume(&raw, &volume_id_from_path(path)))
}

/// Loads every volume in `dir`; a single failure aborts.
pub fn load_dir(dir: &Path) -> crate::Result<Vec<PreprocessedVolume>> {
    discover_volumes(dir, false)?.iter().map(|p| load_preprocessed(p)).collect()
}
