//! Known-region estimation and cropping.

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::postprocess::CleanedScoreCurve;
use crate::stats::quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    DataDriven { q_min: f64, q_max: f64 },
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownRegion {
    pub s_min: f64,
    pub s_max: f64,
    pub provenance: Provenance,
}

impl KnownRegion {
    pub fn manual(s_min: f64, s_max: f64) -> Result<Self> {
        if !(s_min < s_max) {
            return Err(BpregError::Config(format!("known region [{s_min}, {s_max}] is empty")));
        }
        Ok(KnownRegion {
            s_min,
            s_max,
            provenance: Provenance::Manual,
        })
    }

    pub fn contains(&self, s: f64) -> bool {
        self.s_min <= s && s <= self.s_max
    }
}

/// `s_min` is the `q_min` quantile of per-curve minima, `s_max` the `q_max`
/// quantile of per-curve maxima (linear interpolation).
pub fn estimate_known_region(curves: &[CleanedScoreCurve], q_min: f64, q_max: f64) -> Result<KnownRegion> {
    if !(0.0 <= q_min && q_min < q_max && q_max <= 1.0) {
        return Err(BpregError::Config(format!("quantiles ({q_min}, {q_max}) out of order")));
    }
    let mins: Vec<f64> = curves.iter().filter_map(|c| c.min()).collect();
    let maxs: Vec<f64> = curves.iter().filter_map(|c| c.max()).collect();
    if mins.is_empty() {
        return Err(BpregError::EmptyCurve);
    }
    let s_min = quantile(&mins, q_min);
    let s_max = quantile(&maxs, q_max);
    if !(s_min < s_max) {
        return Err(BpregError::Contract(format!("degenerate known region [{s_min}, {s_max}]")));
    }
    Ok(KnownRegion {
        s_min,
        s_max,
        provenance: Provenance::DataDriven { q_min, q_max },
    })
}

/// One score per original slice: the cleaned score where kept, otherwise the
/// transformed unsmoothed score.
pub fn slice_scores_for_cropping(curve: &CleanedScoreCurve) -> Vec<f64> {
    let mut out = curve.unprocessed.clone();
    for (&i, &s) in curve.indices.iter().zip(&curve.scores) {
        out[i] = s;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropReport {
    /// Inclusive index ranges outside the region.
    pub removed_ranges: Vec<(usize, usize)>,
    pub kept: usize,
    pub removed_positive_voxels: usize,
    pub intercepted: bool,
}

fn ranges(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len() - 1));
    }
    out
}

fn plan(n: usize, scores: &[f64], region: &KnownRegion) -> Result<Vec<bool>> {
    if scores.len() != n {
        return Err(BpregError::Contract(format!("{} scores for {n} slices", scores.len())));
    }
    Ok(scores.iter().map(|&s| !region.contains(s)).collect())
}

/// Drops slices outside the region.
pub fn crop_volume<T: Clone>(slices: &[T], scores: &[f64], region: &KnownRegion) -> Result<(Vec<T>, CropReport)> {
    let removed = plan(slices.len(), scores, region)?;
    let kept: Vec<T> = slices.iter().zip(&removed).filter(|(_, &r)| !r).map(|(s, _)| s.clone()).collect();
    let report = CropReport {
        removed_ranges: ranges(&removed),
        kept: kept.len(),
        removed_positive_voxels: 0,
        intercepted: false,
    };
    if kept.is_empty() {
        return Err(BpregError::EmptyCrop {
            removed: slices.len(),
            s_min: region.s_min,
            s_max: region.s_max,
        });
    }
    Ok((kept, report))
}

/// Zeroes mask slices outside the region in place.
pub fn crop_mask<M: Copy + Default + PartialEq>(
    mask: &mut [Vec<M>],
    scores: &[f64],
    region: &KnownRegion,
) -> Result<CropReport> {
    let removed = plan(mask.len(), scores, region)?;
    let kept = removed.iter().filter(|r| !**r).count();
    if kept == 0 {
        return Err(BpregError::EmptyCrop {
            removed: mask.len(),
            s_min: region.s_min,
            s_max: region.s_max,
        });
    }
    let mut positives = 0;
    for (slice, _) in mask.iter_mut().zip(&removed).filter(|(_, &r)| r) {
        for v in slice.iter_mut() {
            if *v != M::default() {
                positives += 1;
                *v = M::default();
            }
        }
    }
    Ok(CropReport {
        removed_ranges: ranges(&removed),
        kept,
        removed_positive_voxels: positives,
        intercepted: positives > 0,
    })
}
