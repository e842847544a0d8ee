//! Body part examined dictionary and tag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::apps::sanity::SanityReport;
use crate::error::{BpregError, Result};
use crate::eval::{BodyClass, ReferenceTable, CLASS_BOUNDS};
use crate::landmarks::{EYES_END, PELVIS_START};
use crate::postprocess::CleanedScoreCurve;

/// Volumes shorter than this (in mm) get a per-slice majority vote.
pub const SMALL_Z_RANGE_MM: f64 = 100.0;
pub const NONE_TAG: &str = "NONE";

/// A region bounded by two landmarks. A missing bound is open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionDef {
    pub name: String,
    pub start: Option<String>,
    pub end: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRule {
    pub tag: String,
    pub landmarks: Vec<String>,
    pub min_visible: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPartBoundaries {
    pub regions: Vec<RegionDef>,
    /// Ordered from feet to head.
    pub tag_rules: Vec<TagRule>,
    /// Landmarks bounding the five per-slice classes, feet to head. The last
    /// class is open towards the head.
    pub vote_bounds: Vec<String>,
}

fn region(name: &str, start: Option<&str>, end: Option<&str>) -> RegionDef {
    RegionDef {
        name: name.into(),
        start: start.map(Into::into),
        end: end.map(Into::into),
    }
}

fn rule(tag: &str, landmarks: &[&str], min_visible: usize) -> TagRule {
    TagRule {
        tag: tag.into(),
        landmarks: landmarks.iter().map(|s| s.to_string()).collect(),
        min_visible,
    }
}

impl Default for BodyPartBoundaries {
    fn default() -> Self {
        BodyPartBoundaries {
            regions: vec![
                region("legs", None, Some(PELVIS_START)),
                region("pelvis", Some(PELVIS_START), Some("pelvis-end")),
                region("abdomen", Some("L5"), Some("Th8")),
                region("chest", Some("Th12"), Some("Th1")),
                region("shoulder-neck", Some("Th3"), Some("C2")),
                region("head", Some("C5"), None),
            ],
            tag_rules: vec![
                rule("PELVIS", &[PELVIS_START, "femur-end", "pelvis-end"], 2),
                rule("ABDOMEN", &["L5", "L3", "L1"], 2),
                rule("CHEST", &["Th12", "Th8", "Th5", "Th1"], 3),
                rule("NECK", &["C6", "C4", "C2"], 2),
                rule("HEAD", &["C1", EYES_END], 2),
            ],
            vote_bounds: CLASS_BOUNDS[..5].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl BodyPartBoundaries {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BpregError::io(path, e))?;
        let b: Self = serde_json::from_str(&text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vote_bounds.len() != BodyClass::ALL.len() {
            return Err(BpregError::Config(format!(
                "vote_bounds needs {} landmarks, got {}",
                BodyClass::ALL.len(),
                self.vote_bounds.len()
            )));
        }
        for r in &self.tag_rules {
            if r.min_visible == 0 || r.min_visible > r.landmarks.len() {
                return Err(BpregError::Config(format!("tag {} has min_visible {}", r.tag, r.min_visible)));
            }
        }
        Ok(())
    }

    /// Score interval (transformed scale) of every region. Regions whose
    /// bounding landmarks are missing from the table are skipped.
    pub fn region_intervals(&self, table: &ReferenceTable) -> Vec<(String, f64, f64)> {
        let t = table.transformed();
        let bound = |lm: &Option<String>, open: f64| match lm {
            None => Some(open),
            Some(l) => t.mean_of(l),
        };
        self.regions
            .iter()
            .filter_map(|r| {
                Some((
                    r.name.clone(),
                    bound(&r.start, f64::NEG_INFINITY)?,
                    bound(&r.end, f64::INFINITY)?,
                ))
            })
            .collect()
    }
}

/// Region name to the sorted original indices whose cleaned score lies
/// strictly inside the region interval.
pub fn body_part_examined_dict(
    curve: &CleanedScoreCurve,
    table: &ReferenceTable,
    bounds: &BodyPartBoundaries,
) -> BTreeMap<String, Vec<usize>> {
    bounds
        .region_intervals(table)
        .into_iter()
        .map(|(name, lo, hi)| {
            let idx = curve
                .indices
                .iter()
                .zip(&curve.scores)
                .filter(|(_, &s)| lo < s && s < hi)
                .map(|(&i, _)| i)
                .collect();
            (name, idx)
        })
        .collect()
}

fn vote_tag(scores: &[f64], table: &ReferenceTable, bounds: &BodyPartBoundaries) -> String {
    let t = table.transformed();
    let Some(edges) = bounds.vote_bounds.iter().map(|l| t.mean_of(l)).collect::<Option<Vec<f64>>>() else {
        return NONE_TAG.into();
    };
    let mut counts = [0usize; 5];
    for &s in scores {
        for c in 0..5 {
            let hi = edges.get(c + 1).copied().unwrap_or(f64::INFINITY);
            if edges[c] <= s && s < hi {
                counts[c] += 1;
                break;
            }
        }
    }
    // max_by_key keeps the last maximum, so scan from the head down
    match (0..5).rev().max_by_key(|&c| counts[c]) {
        Some(c) if counts[c] > 0 => BodyClass::ALL[c].name().into(),
        _ => NONE_TAG.into(),
    }
}

fn visibility_tag(scores: &[f64], table: &ReferenceTable, bounds: &BodyPartBoundaries) -> String {
    let t = table.transformed();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let visible: Vec<&str> = bounds
        .tag_rules
        .iter()
        .filter(|r| {
            let n = r
                .landmarks
                .iter()
                .filter_map(|l| t.mean_of(l))
                .filter(|&m| lo < m && m < hi)
                .count();
            n >= r.min_visible
        })
        .map(|r| r.tag.as_str())
        .collect();
    if visible.is_empty() {
        return NONE_TAG.into();
    }
    visible.into_iter().rev().collect::<Vec<_>>().join("-")
}

pub fn body_part_examined_tag(
    curve: &CleanedScoreCurve,
    z_range_mm: f64,
    sanity: &SanityReport,
    table: &ReferenceTable,
    bounds: &BodyPartBoundaries,
) -> String {
    if !sanity.valid_z_spacing || curve.is_empty() {
        return NONE_TAG.into();
    }
    if z_range_mm < SMALL_Z_RANGE_MM {
        vote_tag(&curve.scores, table, bounds)
    } else {
        visibility_tag(&curve.scores, table, bounds)
    }
}
