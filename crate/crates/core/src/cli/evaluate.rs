use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use super::{fail, load_dir, load_model_dir, resolve_model_dir, EXIT_OK};
use crate::error::{BpregError, Result};
use crate::eval::{
    accuracy_5class, landmark_scores_from_curves, lmse, r2_metric, z_test_compare, AccuracyResult, LmseAggregation,
    LmseResult, R2Summary, ReferenceTable, VolumeScores,
};
use crate::landmarks::{Annotations, EVALUATION_LANDMARKS, EYES_END, PELVIS_START};
use crate::par::{with_jobs, Exec};

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Model directory (model.ckpt and characteristics.json).
    #[arg(short, long)]
    pub model: Option<PathBuf>,
    /// Directory with annotated volumes.
    #[arg(short, long)]
    pub volumes: Option<PathBuf>,
    /// Landmark annotations JSON `{volume: {landmark: slice}}`.
    #[arg(short, long)]
    pub annotations: PathBuf,
    /// Precomputed score curves `{volume: [scores]}` instead of a model.
    #[arg(long, conflicts_with_all = ["model", "compare"])]
    pub scores: Option<PathBuf>,
    /// Second model directory for a significance test on LMSE.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Worker threads.
    #[arg(short, long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub other_lmse: f64,
    pub other_se: f64,
    pub t: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub volumes: usize,
    pub lmse: LmseResult,
    pub accuracy: Option<AccuracyResult>,
    pub r2: R2Summary,
    pub compare: Option<CompareReport>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>6}", "landmark", "LMSE", "SE", "n");
        for lm in EVALUATION_LANDMARKS {
            if let Some(e) = self.lmse.per_landmark.get(lm) {
                let _ = writeln!(s, "{lm:<14} {:>10.4} {:>10.4} {:>6}", e.mean, e.se, e.count);
            }
        }
        let _ = writeln!(s, "{:<14} {:>10.4} {:>10.4} {:>6}", "all", self.lmse.mean, self.lmse.se, self.volumes);
        if let Some(a) = &self.accuracy {
            let _ = writeln!(s, "accuracy {:.2}% ± {:.2}%", 100.0 * a.mean, 100.0 * a.se);
        }
        if let Some(r) = self.r2.mean {
            let _ = writeln!(s, "R2 {r:.4}");
        }
        if let Some(c) = &self.compare {
            let _ = writeln!(
                s,
                "compared LMSE {:.4} ± {:.4}: t = {:.3}, {}",
                c.other_lmse,
                c.other_se,
                c.t,
                if c.significant { "significant" } else { "not significant" }
            );
        }
        s
    }
}

fn check_anchor_annotations(ann: &Annotations) -> Result<()> {
    for anchor in [PELVIS_START, EYES_END] {
        if !ann.iter().any(|(_, l)| l.contains_key(anchor)) {
            return Err(BpregError::Config(format!("annotations contain no {anchor} landmark")));
        }
    }
    Ok(())
}

fn metrics(scores: &VolumeScores, ann: &Annotations, table: &ReferenceTable) -> Result<(LmseResult, Option<AccuracyResult>)> {
    let lm = landmark_scores_from_curves(scores, ann)?;
    let l = lmse(&lm, table, LmseAggregation::VolumeFirst)?;
    let acc = match accuracy_5class(scores, ann, table) {
        Ok(a) => Some(a),
        Err(BpregError::Reference(msg)) => {
            log::warn!("accuracy unavailable: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok((l, acc))
}

fn model_scores(dir: &std::path::Path, volumes: &[crate::volume::PreprocessedVolume]) -> Result<(VolumeScores, ReferenceTable)> {
    let (model, chars) = load_model_dir(dir)?;
    let scores = volumes
        .iter()
        .map(|v| (v.source_id.clone(), model.predict_scores(v, 64, Exec::default())))
        .collect();
    Ok((scores, chars.reference_table))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let ann = Annotations::load(&args.annotations)?;
    check_anchor_annotations(&ann)?;
    let (scores, table, volumes) = if let Some(p) = &args.scores {
        let text = std::fs::read_to_string(p).map_err(|e| BpregError::io(p, e))?;
        let scores: VolumeScores = serde_json::from_str(&text)?;
        let table = ReferenceTable::build(&landmark_scores_from_curves(&scores, &ann)?)?;
        (scores, table, None)
    } else {
        let dir = args
            .volumes
            .as_ref()
            .ok_or_else(|| BpregError::Config("--volumes is required unless --scores is given".into()))?;
        let vols = load_dir(dir)?;
        let (scores, table) = model_scores(&resolve_model_dir(args.model.as_deref())?, &vols)?;
        (scores, table, Some(vols))
    };
    let (l, accuracy) = metrics(&scores, &ann, &table)?;
    let compare = match (&args.compare, &volumes) {
        (Some(dir), Some(vols)) => {
            let (s2, t2) = model_scores(dir, vols)?;
            let (l2, _) = metrics(&s2, &ann, &t2)?;
            let z = z_test_compare(l.mean, l.se, l2.mean, l2.se)?;
            Some(CompareReport {
                other_lmse: l2.mean,
                other_se: l2.se,
                t: z.t,
                significant: z.significant,
            })
        }
        _ => None,
    };
    Ok(EvalReport {
        volumes: l.per_volume.len(),
        r2: r2_metric(&scores),
        lmse: l,
        accuracy,
        compare,
    })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> i32 {
    let run = || -> Result<()> {
        let report = evaluate(args)?;
        print!("{}", report.render());
        if let Some(p) = &args.output {
            std::fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| BpregError::io(p, e))?;
        }
        Ok(())
    };
    match with_jobs(args.jobs, run) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}
