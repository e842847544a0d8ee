use std::path::{Path, PathBuf};

use clap::Args;

use super::{discover_volumes, fail, load_model_dir, load_preprocessed, resolve_model_dir, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use crate::apps::bpe::BodyPartBoundaries;
use crate::apps::metadata::{build_metadata, MetadataConfig};
use crate::error::{BpregError, Result};
use crate::model::SliceScoreModel;
use crate::par::{with_jobs, Exec};
use crate::plot::save_plot;
use crate::postprocess::ModelCharacteristics;
use crate::volume::volume_id_from_path;

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Directory with .nii, .nii.gz or raw .json volumes.
    #[arg(short, long)]
    pub input: PathBuf,
    /// Output directory for the JSON files.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Directory holding model.ckpt and characteristics.json.
    #[arg(short, long)]
    pub model: Option<PathBuf>,
    /// Also write a PNG of unprocessed and cleaned scores per volume.
    #[arg(long)]
    pub plot: bool,
    /// Relative slope error above which the z-spacing is flagged invalid [default: 0.28].
    #[arg(long)]
    pub theta: Option<f64>,
    /// JSON file overriding the body part boundaries.
    #[arg(long)]
    pub boundaries: Option<PathBuf>,
    /// Search the input directory recursively.
    #[arg(long)]
    pub recursive: bool,
    /// Worker threads.
    #[arg(short, long)]
    pub jobs: Option<usize>,
}

pub const OUTPUT_README: &str = "\
# Body part metadata

Each `<volume>.json` file describes one input volume.

- `cleaned slice scores`: smoothed scores after removing empty slices and implausible tails; null where a slice was removed.
- `unprocessed slice scores`: per-slice scores mapped to the common scale (0 at pelvis-start, 100 at eyes-end), before smoothing.
- `z`: height of each slice in mm.
- `body part examined`: region name to the slice indices whose cleaned score lies inside the region.
- `body part examined tag`: visible regions joined by hyphens from head to pelvis, or NONE.
- `look-up table`: mean and standard deviation of each landmark score on the common scale.
- `reverse z-ordering`: true when scores decrease along the slice axis.
- `valid z-spacing`: false when the score slope deviates from the expected slope by more than theta.
- `expected slope`: mean score increase per mm over the training volumes.
- `observed slope`: fitted score increase per mm for this volume.
- `slope ratio`: observed slope divided by expected slope.
- `expected z-spacing`: slice spacing implied by the observed per-slice slope.
- `z-spacing`: slice spacing stored in the volume header.
- `settings`: parameters used to produce the file.
";

fn metadata_config(args: &PredictArgs) -> Result<MetadataConfig> {
    let mut cfg = MetadataConfig::default();
    if let Some(t) = args.theta {
        if !(t > 0.0) {
            return Err(BpregError::Config(format!("theta {t} must be positive")));
        }
        cfg.theta = t;
    }
    if let Some(p) = &args.boundaries {
        cfg.boundaries = BodyPartBoundaries::load(p)?;
    }
    Ok(cfg)
}

fn process_one(
    path: &Path,
    out_dir: &Path,
    model: &SliceScoreModel,
    chars: &ModelCharacteristics,
    cfg: &MetadataConfig,
    plot: bool,
) -> Result<()> {
    let id = volume_id_from_path(path);
    let target = out_dir.join(format!("{id}.json"));
    if target.canonicalize().ok() == path.canonicalize().ok() {
        return Err(BpregError::Config(format!("output {} would overwrite its input", target.display())));
    }
    let volume = load_preprocessed(path)?;
    let out = build_metadata(&volume, model, chars, cfg, Exec::default())?;
    let json = out.record.to_json()?;
    std::fs::write(&target, json).map_err(|e| BpregError::io(&target, e))?;
    if plot {
        save_plot(&out.curve, &out_dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> i32 {
    let setup = || -> Result<_> {
        let cfg = metadata_config(args)?;
        let (model, chars) = load_model_dir(&resolve_model_dir(args.model.as_deref())?)?;
        let inputs = discover_volumes(&args.input, args.recursive)?;
        if inputs.is_empty() {
            return Err(BpregError::Config(format!("no volumes found in {}", args.input.display())));
        }
        std::fs::create_dir_all(&args.output).map_err(|e| BpregError::io(&args.output, e))?;
        let readme = args.output.join("README.md");
        std::fs::write(&readme, OUTPUT_README).map_err(|e| BpregError::io(&readme, e))?;
        Ok((cfg, model, chars, inputs))
    };
    let (cfg, model, chars, inputs) = match setup() {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let results = with_jobs(args.jobs, || {
        Exec::default().map(&inputs, |p| process_one(p, &args.output, &model, &chars, &cfg, args.plot))
    });
    let mut failed = 0;
    for (p, r) in inputs.iter().zip(&results) {
        if let Err(e) = r {
            log::error!("{}: {e}", p.display());
            failed += 1;
        }
    }
    log::info!("{} of {} volumes written to {}", inputs.len() - failed, inputs.len(), args.output.display());
    match failed {
        0 => EXIT_OK,
        n if n == inputs.len() && results.iter().all(|r| matches!(r, Err(BpregError::Config(_)))) => EXIT_CONFIG,
        _ => EXIT_PARTIAL,
    }
}
