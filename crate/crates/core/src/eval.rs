//! Landmark-based metrics: reference table, LMSE with a z-test, five-class
//! body part accuracy and the R² linearity score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::landmarks::{Annotations, EVALUATION_LANDMARKS, EYES_END, PELVIS_START};
use crate::model::SliceScoreModel;
use crate::par::Exec;
use crate::stats::{fit_line, mean, sample_std, standard_error};
use crate::volume::PreprocessedVolume;

/// Scores at annotated landmarks: volume id to landmark name to score.
pub type LandmarkScores = BTreeMap<String, BTreeMap<String, f64>>;

/// Full per-slice scores keyed by volume id.
pub type VolumeScores = BTreeMap<String, Vec<f64>>;

/// Picks the scores at annotated positions out of full score curves.
/// Volumes without annotations or without scores are skipped.
pub fn landmark_scores_from_curves(scores: &VolumeScores, ann: &Annotations) -> Result<LandmarkScores> {
    let mut out = LandmarkScores::new();
    for (vid, lms) in ann.iter() {
        let Some(s) = scores.get(vid) else { continue };
        let mut row = BTreeMap::new();
        for (name, &idx) in lms {
            let v = *s.get(idx).ok_or_else(|| {
                BpregError::Contract(format!("{vid}: landmark {name} at {idx} beyond {} slices", s.len()))
            })?;
            row.insert(name.clone(), v);
        }
        out.insert(vid.clone(), row);
    }
    Ok(out)
}

/// Runs the model on annotated slices only.
pub fn predict_landmark_scores(
    model: &SliceScoreModel,
    volumes: &[PreprocessedVolume],
    ann: &Annotations,
    exec: Exec,
) -> Result<LandmarkScores> {
    let mut jobs = Vec::new();
    for (vi, v) in volumes.iter().enumerate() {
        let Some(lms) = ann.get(&v.source_id) else { continue };
        for (name, &idx) in lms {
            if idx >= v.len() {
                return Err(BpregError::Contract(format!(
                    "{}: landmark {name} at {idx} beyond {} slices",
                    v.source_id,
                    v.len()
                )));
            }
            jobs.push((vi, name.clone(), idx));
        }
    }
    let scores = exec.map(&jobs, |(vi, _, idx)| model.score_slice_f32(volumes[*vi].slices[*idx].as_f32()));
    let mut out = LandmarkScores::new();
    for ((vi, name, _), s) in jobs.into_iter().zip(scores) {
        out.entry(volumes[vi].source_id.clone()).or_default().insert(name, s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean score per landmark on the raw model scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub entries: BTreeMap<String, ReferenceEntry>,
}

impl ReferenceTable {
    pub fn build(scores: &LandmarkScores) -> Result<Self> {
        let mut pooled: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for row in scores.values() {
            for (name, &s) in row {
                pooled.entry(name).or_default().push(s);
            }
        }
        let entries = pooled
            .into_iter()
            .map(|(name, xs)| {
                (
                    name.to_string(),
                    ReferenceEntry {
                        mean: mean(&xs),
                        std: sample_std(&xs),
                        count: xs.len(),
                    },
                )
            })
            .collect();
        let table = ReferenceTable { entries };
        table.d()?;
        Ok(table)
    }

    pub fn mean_of(&self, landmark: &str) -> Option<f64> {
        self.entries.get(landmark).map(|e| e.mean)
    }

    /// Raw score units per transformed unit: (s̄_eyes − s̄_pelvis) / 100.
    pub fn d(&self) -> Result<f64> {
        let lo = self
            .mean_of(PELVIS_START)
            .ok_or_else(|| BpregError::Reference(format!("no {PELVIS_START} annotation")))?;
        let hi = self
            .mean_of(EYES_END)
            .ok_or_else(|| BpregError::Reference(format!("no {EYES_END} annotation")))?;
        let d = (hi - lo) / 100.0;
        if !(d > 0.0) {
            return Err(BpregError::Reference(format!(
                "{EYES_END} mean {hi} does not exceed {PELVIS_START} mean {lo}"
            )));
        }
        Ok(d)
    }

    /// Maps a raw score to the scale where pelvis-start is 0 and eyes-end 100.
    pub fn normalize(&self, s: f64) -> f64 {
        let lo = self.mean_of(PELVIS_START).expect("validated on build");
        (s - lo) / self.d().expect("validated on build")
    }

    pub fn normalize_all(&self, s: &[f64]) -> Vec<f64> {
        s.iter().map(|&x| self.normalize(x)).collect()
    }

    /// Same table with every mean and std on the transformed scale.
    pub fn transformed(&self) -> ReferenceTable {
        let d = self.d().expect("validated on build");
        ReferenceTable {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ReferenceEntry {
                            mean: self.normalize(e.mean),
                            std: e.std / d,
                            count: e.count,
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when the evaluation landmark means present in the table strictly
    /// increase in anatomical order.
    pub fn is_monotone(&self) -> bool {
        let means: Vec<f64> = EVALUATION_LANDMARKS.iter().filter_map(|l| self.mean_of(l)).collect();
        means.windows(2).all(|w| w[1] > w[0])
    }
}

pub fn build_reference_table(
    model: &SliceScoreModel,
    volumes: &[PreprocessedVolume],
    ann: &Annotations,
    exec: Exec,
) -> Result<ReferenceTable> {
    ReferenceTable::build(&predict_landmark_scores(model, volumes, ann, exec)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmseAggregation {
    /// Average per volume first, then across volumes.
    #[default]
    VolumeFirst,
    /// Average per landmark first, then across landmarks.
    LandmarkFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmseResult {
    pub mean: f64,
    pub se: f64,
    pub per_volume: BTreeMap<String, f64>,
    pub per_landmark: BTreeMap<String, LandmarkError>,
    pub excluded: Vec<String>,
}

pub fn lmse(scores: &LandmarkScores, table: &ReferenceTable, agg: LmseAggregation) -> Result<LmseResult> {
    let d = table.d()?;
    let mut per_volume = BTreeMap::new();
    let mut per_lm: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for (vid, row) in scores {
        let errs: Vec<f64> = EVALUATION_LANDMARKS
            .iter()
            .filter_map(|&l| {
                let e = ((table.mean_of(l)? - row.get(l)?) / d).powi(2);
                per_lm.entry(l).or_default().push(e);
                Some(e)
            })
            .collect();
        if errs.is_empty() {
            log::warn!("volume {vid} has no annotated evaluation landmark; excluded from LMSE");
            excluded.push(vid.clone());
        } else {
            per_volume.insert(vid.clone(), mean(&errs));
        }
    }
    if per_volume.is_empty() {
        return Err(BpregError::Reference("no volume with evaluation landmarks".into()));
    }
    let per_landmark: BTreeMap<String, LandmarkError> = per_lm
        .into_iter()
        .map(|(l, e)| {
            (
                l.to_string(),
                LandmarkError {
                    mean: mean(&e),
                    se: standard_error(&e),
                    count: e.len(),
                },
            )
        })
        .collect();
    let agg_values: Vec<f64> = match agg {
        LmseAggregation::VolumeFirst => per_volume.values().copied().collect(),
        LmseAggregation::LandmarkFirst => per_landmark.values().map(|e| e.mean).collect(),
    };
    Ok(LmseResult {
        mean: mean(&agg_values),
        se: standard_error(&agg_values),
        per_volume,
        per_landmark,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub t: f64,
    pub significant: bool,
}

pub const Z_CRITICAL_5PCT: f64 = 1.96;

pub fn z_test_compare(mean_x: f64, se_x: f64, mean_y: f64, se_y: f64) -> Result<ZTest> {
    let denom = (se_x * se_x + se_y * se_y).sqrt();
    if !(denom > 0.0) {
        return Err(BpregError::Contract("z-test needs a positive standard error".into()));
    }
    let t = (mean_x - mean_y) / denom;
    Ok(ZTest {
        t,
        significant: t.abs() > Z_CRITICAL_5PCT,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BodyClass {
    Pelvis,
    Abdomen,
    Chest,
    Neck,
    Head,
}

impl BodyClass {
    pub const ALL: [BodyClass; 5] = [
        BodyClass::Pelvis,
        BodyClass::Abdomen,
        BodyClass::Chest,
        BodyClass::Neck,
        BodyClass::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BodyClass::Pelvis => "PELVIS",
            BodyClass::Abdomen => "ABDOMEN",
            BodyClass::Chest => "CHEST",
            BodyClass::Neck => "NECK",
            BodyClass::Head => "HEAD",
        }
    }
}

/// Class boundary landmarks; class i spans [BOUNDS[i], BOUNDS[i+1]).
pub const CLASS_BOUNDS: [&str; 6] = [PELVIS_START, "L5", "Th11", "Th2", "C1", EYES_END];

/// Class of a raw score given the table means, half-open intervals.
pub fn predict_class(score: f64, table: &ReferenceTable) -> Option<BodyClass> {
    BodyClass::ALL.into_iter().enumerate().find_map(|(i, c)| {
        let lo = table.mean_of(CLASS_BOUNDS[i])?;
        let hi = table.mean_of(CLASS_BOUNDS[i + 1])?;
        (lo <= score && score < hi).then_some(c)
    })
}

/// Ground-truth class per slice; None where the bracketing landmarks are
/// not both annotated.
pub fn ground_truth_classes(n: usize, lms: &BTreeMap<String, usize>) -> Vec<Option<BodyClass>> {
    let mut out = vec![None; n];
    for (i, c) in BodyClass::ALL.into_iter().enumerate() {
        let (Some(&lo), Some(&hi)) = (lms.get(CLASS_BOUNDS[i]), lms.get(CLASS_BOUNDS[i + 1])) else {
            continue;
        };
        for slot in out.iter_mut().take(hi.min(n)).skip(lo) {
            *slot = Some(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub mean: f64,
    pub se: f64,
    pub per_volume: BTreeMap<String, f64>,
    pub excluded: Vec<String>,
}

pub fn accuracy_5class(scores: &VolumeScores, ann: &Annotations, table: &ReferenceTable) -> Result<AccuracyResult> {
    let mut per_volume = BTreeMap::new();
    let mut excluded = Vec::new();
    for (vid, s) in scores {
        let truth = ann.get(vid).map(|l| ground_truth_classes(s.len(), l)).unwrap_or_default();
        let (mut hit, mut total) = (0usize, 0usize);
        for (score, gt) in s.iter().zip(&truth) {
            if let Some(gt) = gt {
                total += 1;
                if predict_class(*score, table) == Some(*gt) {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            log::warn!("volume {vid} has no classifiable slice; excluded from accuracy");
            excluded.push(vid.clone());
        } else {
            per_volume.insert(vid.clone(), hit as f64 / total as f64);
        }
    }
    if per_volume.is_empty() {
        return Err(BpregError::Reference("no volume with classifiable slices".into()));
    }
    let v: Vec<f64> = per_volume.values().copied().collect();
    Ok(AccuracyResult {
        mean: mean(&v),
        se: standard_error(&v),
        per_volume,
        excluded,
    })
}

/// 1 − Σ(ŝ−s)² / Σ(ŝ−s̄)² against a least-squares line over slice index.
/// None for fewer than three slices or a flat fit.
pub fn r2_score(scores: &[f64]) -> Option<f64> {
    if scores.len() < 3 {
        return None;
    }
    let xs: Vec<f64> = (0..scores.len()).map(|i| i as f64).collect();
    let fit = fit_line(&xs, scores)?;
    let fitted: Vec<f64> = xs.iter().map(|&x| fit.at(x)).collect();
    let fbar = mean(&fitted);
    let ss_fit: f64 = fitted.iter().map(|f| (f - fbar).powi(2)).sum();
    if !(ss_fit > 0.0) {
        return None;
    }
    let ss_res: f64 = fitted.iter().zip(scores).map(|(f, s)| (f - s).powi(2)).sum();
    Some(1.0 - ss_res / ss_fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Summary {
    pub per_volume: BTreeMap<String, Option<f64>>,
    pub mean: Option<f64>,
    pub se: Option<f64>,
}

pub fn r2_metric(scores: &VolumeScores) -> R2Summary {
    let per_volume: BTreeMap<String, Option<f64>> = scores.iter().map(|(k, s)| (k.clone(), r2_score(s))).collect();
    let present: Vec<f64> = per_volume.values().flatten().copied().collect();
    R2Summary {
        mean: (!present.is_empty()).then(|| mean(&present)),
        se: (present.len() > 1).then(|| standard_error(&present)),
        per_volume,
    }
}
