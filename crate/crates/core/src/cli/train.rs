use std::path::{Path, PathBuf};

use clap::Args;

use super::{fail, load_dir, CHARACTERISTICS_FILE, EXIT_OK, MODEL_FILE};
use crate::error::{BpregError, Result};
use crate::landmarks::Annotations;
use crate::par::{with_jobs, Exec};
use crate::postprocess::compute_model_characteristics;
use crate::train::{derive_schedule, train, TrainConfig, TrainOptions};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Dataset directory with `train/`, `val/` and `<split>_annotations.json`.
    #[arg(short, long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, history and characteristics.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Continue from the training state in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs in total have run.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Worker threads.
    #[arg(short, long)]
    pub jobs: Option<usize>,
}

fn load_annotations(dir: &Path, split: &str) -> Result<Annotations> {
    let p = dir.join(format!("{split}_annotations.json"));
    if p.exists() {
        Annotations::load(&p)
    } else {
        Ok(Annotations::new())
    }
}

fn run(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config)?;
    cfg.validate()?;
    let schedule = derive_schedule(&cfg)?;
    log::info!("batch size {}, {} epochs", schedule.batch_size, schedule.epochs);
    let train_vols = load_dir(&args.data.join("train"))?;
    let val_vols = load_dir(&args.data.join("val"))?;
    let mut ann = load_annotations(&args.data, "train")?;
    ann.extend(&load_annotations(&args.data, "val")?);
    if ann.is_empty() {
        return Err(BpregError::Config("no annotations found".into()));
    }
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        stop_after: args.stop_after,
        exec: Exec::default(),
    };
    let outcome = train(&train_vols, &val_vols, &ann, &cfg, &opts)?;
    outcome.best.save(&args.out.join(MODEL_FILE))?;
    let pool: Vec<_> = train_vols.iter().chain(&val_vols).cloned().collect();
    let chars =
        compute_model_characteristics(&outcome.best, &train_vols, &pool, &ann, cfg.inference_batch_size, opts.exec)?;
    chars.save(&args.out.join(CHARACTERISTICS_FILE))?;
    match outcome.history.iter().filter_map(|r| r.val_lmse).reduce(f64::min) {
        Some(l) => println!("best validation LMSE {l:.4} at epoch {}", outcome.best_epoch.unwrap_or(0)),
        None => println!("no validation LMSE available"),
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    match with_jobs(args.jobs, || run(args)) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}
