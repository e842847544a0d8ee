//! Score curve cleaning (empty-slice filter, transform, smoothing, tail
//! removal) and the model characteristics it depends on.

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::eval::{build_reference_table, ReferenceTable};
use crate::landmarks::Annotations;
use crate::model::SliceScoreModel;
use crate::par::Exec;
use crate::volume::PreprocessedVolume;
use crate::stats::{fit_line, mean, quantile, sample_std};

pub const SMOOTHING_SIGMA_MM: f64 = 10.0;
pub const TANGENTIAL_QUANTILES: (f64, f64) = (0.005, 0.995);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCharacteristics {
    /// Raw score of an empty (all air) slice.
    pub s0: f64,
    /// Raw-scale reference table from the annotated train and validation pool.
    pub reference_table: ReferenceTable,
    /// Mean slope of cleaned curves per mm and its spread.
    pub slope_mean: f64,
    pub slope_std: f64,
    pub tangential_mean: f64,
    pub tangential_min: f64,
    pub tangential_max: f64,
}

impl ModelCharacteristics {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BpregError::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.reference_table.d()?;
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| BpregError::io(path, e))
    }
}

/// A cleaned score curve. `indices` maps every kept entry back to its slice
/// in the original volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedScoreCurve {
    pub scores: Vec<f64>,
    pub z: Vec<f64>,
    pub indices: Vec<usize>,
    /// Transformed but unsmoothed score of every slice.
    pub unprocessed: Vec<f64>,
    pub empty_slices: Vec<usize>,
    /// Inclusive ranges of original indices dropped as tails.
    pub removed_tails: Vec<(usize, usize)>,
    pub num_slices: usize,
    pub z_spacing: f64,
}

impl CleanedScoreCurve {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Cleaned score per original slice, None where removed.
    pub fn per_slice(&self) -> Vec<Option<f64>> {
        let mut out = vec![None; self.num_slices];
        for (&i, &s) in self.indices.iter().zip(&self.scores) {
            out[i] = Some(s);
        }
        out
    }

    pub fn min(&self) -> Option<f64> {
        self.scores.iter().copied().reduce(f64::min)
    }

    pub fn max(&self) -> Option<f64> {
        self.scores.iter().copied().reduce(f64::max)
    }
}

pub fn is_empty_score(s: f64, s0: f64) -> bool {
    (s - s0).abs() <= 1e-4 * s0.abs() + 1e-6
}

/// Gaussian smoothing with `sigma` in index units. Edges are extended by
/// point reflection, which keeps straight lines straight.
pub fn smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 || !(sigma > 0.0) {
        return values.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let last = (n - 1) as isize;
    let at = |i: isize| -> f64 {
        if i < 0 {
            2.0 * values[0] - values[(-i).min(last) as usize]
        } else if i > last {
            2.0 * values[last as usize] - values[(2 * last - i).max(0) as usize]
        } else {
            values[i as usize]
        }
    };
    (0..n as isize)
        .map(|c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * at(c + k as isize - radius))
                .sum()
        })
        .collect()
}

/// (s[i+1] - s[i]) / (z[i+1] - z[i]) for consecutive entries.
pub fn tangential_slopes(scores: &[f64], z: &[f64]) -> Vec<f64> {
    scores
        .windows(2)
        .zip(z.windows(2))
        .map(|(s, h)| (s[1] - s[0]) / (h[1] - h[0]))
        .collect()
}

struct Stage3 {
    scores: Vec<f64>,
    z: Vec<f64>,
    indices: Vec<usize>,
    unprocessed: Vec<f64>,
    empty: Vec<usize>,
}

fn clean_steps_1_to_3(raw: &[f64], z_spacing: f64, s0: f64, table: &ReferenceTable) -> Result<Stage3> {
    if !(z_spacing > 0.0) {
        return Err(BpregError::Contract(format!("z-spacing {z_spacing} must be positive")));
    }
    let unprocessed = table.normalize_all(raw);
    let mut indices = Vec::new();
    let mut empty = Vec::new();
    for (i, &s) in raw.iter().enumerate() {
        if is_empty_score(s, s0) {
            empty.push(i);
        } else {
            indices.push(i);
        }
    }
    if indices.is_empty() {
        return Err(BpregError::EmptyCurve);
    }
    let kept: Vec<f64> = indices.iter().map(|&i| unprocessed[i]).collect();
    let scores = smooth(&kept, SMOOTHING_SIGMA_MM / z_spacing);
    let z = indices.iter().map(|&i| i as f64 * z_spacing).collect();
    Ok(Stage3 {
        scores,
        z,
        indices,
        unprocessed,
        empty,
    })
}

/// Leading and trailing counts to drop: tails below 0 (or above 100) whose
/// tangential slope lies outside [t_min, t_max], scanned from the ends inward.
fn tail_cut(scores: &[f64], z: &[f64], t_min: f64, t_max: f64) -> (usize, usize) {
    let n = scores.len();
    if n < 2 {
        return (0, 0);
    }
    let slopes = tangential_slopes(scores, z);
    let atypical = |m: f64| m < t_min || m > t_max;
    let mut lead = 0;
    while lead < n - 1 && scores[lead] < 0.0 && atypical(slopes[lead]) {
        lead += 1;
    }
    let mut trail = 0;
    while trail < n - 1 - lead && scores[n - 1 - trail] > 100.0 && atypical(slopes[n - 2 - trail]) {
        trail += 1;
    }
    (lead, trail)
}

pub fn cleaned_slice_scores(raw: &[f64], z_spacing: f64, chars: &ModelCharacteristics) -> Result<CleanedScoreCurve> {
    let st = clean_steps_1_to_3(raw, z_spacing, chars.s0, &chars.reference_table)?;
    let (lead, trail) = tail_cut(&st.scores, &st.z, chars.tangential_min, chars.tangential_max);
    let n = st.scores.len();
    let mut removed = Vec::new();
    if lead > 0 {
        removed.push((st.indices[0], st.indices[lead - 1]));
    }
    if trail > 0 {
        removed.push((st.indices[n - trail], st.indices[n - 1]));
    }
    let keep = lead..n - trail;
    Ok(CleanedScoreCurve {
        scores: st.scores[keep.clone()].to_vec(),
        z: st.z[keep.clone()].to_vec(),
        indices: st.indices[keep].to_vec(),
        unprocessed: st.unprocessed,
        empty_slices: st.empty,
        removed_tails: removed,
        num_slices: raw.len(),
        z_spacing,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// Score change per mm.
    pub per_mm: f64,
    /// Score change per slice.
    pub per_index: f64,
    pub intercept: f64,
}

pub fn fit_score_slope(curve: &CleanedScoreCurve) -> Result<SlopeFit> {
    let fit = fit_line(&curve.z, &curve.scores)
        .ok_or_else(|| BpregError::Contract("slope fit needs at least two distinct heights".into()))?;
    Ok(SlopeFit {
        per_mm: fit.slope,
        per_index: fit.slope * curve.z_spacing,
        intercept: fit.intercept,
    })
}

/// Characteristics from raw training curves `(scores, z_spacing)`.
pub fn characteristics_from_curves(
    s0: f64,
    table: ReferenceTable,
    curves: &[(Vec<f64>, f64)],
) -> Result<ModelCharacteristics> {
    table.d()?;
    let mut tangential = Vec::new();
    let mut stage3 = Vec::new();
    for (raw, z) in curves {
        match clean_steps_1_to_3(raw, *z, s0, &table) {
            Ok(st) if st.scores.len() >= 2 => {
                tangential.extend(tangential_slopes(&st.scores, &st.z));
                stage3.push(st);
            }
            _ => log::warn!("curve with fewer than two usable slices skipped"),
        }
    }
    if tangential.is_empty() {
        return Err(BpregError::EmptyCurve);
    }
    let t_min = quantile(&tangential, TANGENTIAL_QUANTILES.0);
    let t_max = quantile(&tangential, TANGENTIAL_QUANTILES.1);
    let mut slopes = Vec::new();
    for st in &stage3 {
        let (lead, trail) = tail_cut(&st.scores, &st.z, t_min, t_max);
        let keep = lead..st.scores.len() - trail;
        if let Some(f) = fit_line(&st.z[keep.clone()], &st.scores[keep]) {
            slopes.push(f.slope);
        }
    }
    if slopes.is_empty() {
        return Err(BpregError::EmptyCurve);
    }
    Ok(ModelCharacteristics {
        s0,
        reference_table: table,
        slope_mean: mean(&slopes),
        slope_std: sample_std(&slopes),
        tangential_mean: mean(&tangential),
        tangential_min: t_min,
        tangential_max: t_max,
    })
}

/// Runs `model` over `train` to derive the cleaning parameters. The
/// reference table is built from the annotated volumes in `table_pool`.
pub fn compute_model_characteristics(
    model: &SliceScoreModel,
    train: &[PreprocessedVolume],
    table_pool: &[PreprocessedVolume],
    ann: &Annotations,
    batch_size: usize,
    exec: Exec,
) -> Result<ModelCharacteristics> {
    let table = build_reference_table(model, table_pool, ann, exec)?;
    let curves: Vec<(Vec<f64>, f64)> = train
        .iter()
        .map(|v| (model.predict_scores(v, batch_size, exec), v.z_spacing))
        .collect();
    characteristics_from_curves(model.empty_slice_score(), table, &curves)
}
