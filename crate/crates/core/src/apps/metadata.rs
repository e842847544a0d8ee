//! Per-volume body part metadata record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::apps::bpe::{body_part_examined_dict, body_part_examined_tag, BodyPartBoundaries};
use crate::apps::sanity::{data_sanity_check, SanityReport, DEFAULT_THETA};
use crate::error::Result;
use crate::eval::ReferenceEntry;
use crate::model::SliceScoreModel;
use crate::par::Exec;
use crate::postprocess::{cleaned_slice_scores, CleanedScoreCurve, ModelCharacteristics, SMOOTHING_SIGMA_MM};
use crate::volume::PreprocessedVolume;

pub const METADATA_KEYS: [&str; 14] = [
    "cleaned slice scores",
    "unprocessed slice scores",
    "z",
    "body part examined",
    "body part examined tag",
    "look-up table",
    "reverse z-ordering",
    "valid z-spacing",
    "expected slope",
    "observed slope",
    "slope ratio",
    "expected z-spacing",
    "z-spacing",
    "settings",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataConfig {
    pub theta: f64,
    pub boundaries: BodyPartBoundaries,
    pub inference_batch_size: usize,
}

impl Default for MetadataConfig {
    fn default() -> Self {
        MetadataConfig {
            theta: DEFAULT_THETA,
            boundaries: BodyPartBoundaries::default(),
            inference_batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    #[serde(rename = "cleaned slice scores")]
    pub cleaned_slice_scores: Vec<Option<f64>>,
    #[serde(rename = "unprocessed slice scores")]
    pub unprocessed_slice_scores: Vec<f64>,
    pub z: Vec<f64>,
    #[serde(rename = "body part examined")]
    pub body_part_examined: BTreeMap<String, Vec<usize>>,
    #[serde(rename = "body part examined tag")]
    pub body_part_examined_tag: String,
    #[serde(rename = "look-up table")]
    pub look_up_table: BTreeMap<String, ReferenceEntry>,
    #[serde(rename = "reverse z-ordering")]
    pub reverse_z_ordering: bool,
    #[serde(rename = "valid z-spacing")]
    pub valid_z_spacing: bool,
    #[serde(rename = "expected slope")]
    pub expected_slope: f64,
    #[serde(rename = "observed slope")]
    pub observed_slope: f64,
    #[serde(rename = "slope ratio")]
    pub slope_ratio: f64,
    #[serde(rename = "expected z-spacing")]
    pub expected_z_spacing: f64,
    #[serde(rename = "z-spacing")]
    pub z_spacing: f64,
    pub settings: Value,
}

impl MetadataRecord {
    /// Sorted keys, shortest round-trip floats.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Record plus the intermediate products, for plotting and reporting.
#[derive(Debug, Clone)]
pub struct MetadataOutput {
    pub record: MetadataRecord,
    pub curve: CleanedScoreCurve,
    pub sanity: SanityReport,
}

pub fn metadata_from_scores(
    raw: &[f64],
    z_spacing: f64,
    chars: &ModelCharacteristics,
    cfg: &MetadataConfig,
    model_checksum: &str,
) -> Result<MetadataOutput> {
    let curve = cleaned_slice_scores(raw, z_spacing, chars)?;
    let sanity = data_sanity_check(&curve, chars, cfg.theta)?;
    let table = &chars.reference_table;
    let z_range = raw.len().saturating_sub(1) as f64 * z_spacing;
    let record = MetadataRecord {
        cleaned_slice_scores: curve.per_slice(),
        unprocessed_slice_scores: curve.unprocessed.clone(),
        z: (0..raw.len()).map(|i| i as f64 * z_spacing).collect(),
        body_part_examined: body_part_examined_dict(&curve, table, &cfg.boundaries),
        body_part_examined_tag: body_part_examined_tag(&curve, z_range, &sanity, table, &cfg.boundaries),
        look_up_table: table.transformed().entries,
        reverse_z_ordering: sanity.reverse_z_ordering,
        valid_z_spacing: sanity.valid_z_spacing,
        expected_slope: sanity.expected_slope,
        observed_slope: sanity.observed_slope,
        slope_ratio: sanity.slope_ratio,
        expected_z_spacing: sanity.expected_z_spacing,
        z_spacing,
        settings: json!({
            "theta": cfg.theta,
            "boundaries": cfg.boundaries,
            "inference_batch_size": cfg.inference_batch_size,
            "smoothing_sigma_mm": SMOOTHING_SIGMA_MM,
            "tangential_slope_min": chars.tangential_min,
            "tangential_slope_max": chars.tangential_max,
            "empty_slice_score": chars.s0,
            "model_checksum": model_checksum,
        }),
    };
    Ok(MetadataOutput { record, curve, sanity })
}

pub fn build_metadata(
    volume: &PreprocessedVolume,
    model: &SliceScoreModel,
    chars: &ModelCharacteristics,
    cfg: &MetadataConfig,
    exec: Exec,
) -> Result<MetadataOutput> {
    let raw = model.predict_scores(volume, cfg.inference_batch_size, exec);
    metadata_from_scores(&raw, volume.z_spacing, chars, cfg, &model.checksum())
}
