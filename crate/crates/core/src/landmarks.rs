//! Landmark vocabulary and per-volume annotations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};

pub const PELVIS_START: &str = "pelvis-start";
pub const EYES_END: &str = "eyes-end";

/// The twelve evaluation landmarks, ordered from feet to head. The first and
/// last entry define the 0 and 100 points of the common score scale.
pub const EVALUATION_LANDMARKS: [&str; 12] = [
    PELVIS_START,
    "femur-end",
    "L5",
    "L3",
    "L1",
    "Th11",
    "Th8",
    "Th5",
    "Th2",
    "C6",
    "C1",
    EYES_END,
];

/// All annotated landmark names.
pub const ALL_LANDMARKS: [&str; 35] = [
    "pelvis-start",
    "femur-end",
    "pelvis-end",
    "kidneys",
    "lung-start",
    "liver-end",
    "lung-end",
    "teeth",
    "nose",
    "eyes-end",
    "head-end",
    "L5",
    "L4",
    "L3",
    "L2",
    "L1",
    "Th12",
    "Th11",
    "Th10",
    "Th9",
    "Th8",
    "Th7",
    "Th6",
    "Th5",
    "Th4",
    "Th3",
    "Th2",
    "Th1",
    "C7",
    "C6",
    "C5",
    "C4",
    "C3",
    "C2",
    "C1",
];

pub fn is_known_landmark(name: &str) -> bool {
    ALL_LANDMARKS.contains(&name)
}

/// Landmark name to slice index for one volume.
pub type VolumeLandmarks = BTreeMap<String, usize>;

/// Annotations for a set of volumes, keyed by volume id. Serialized as
/// `{volume_id: {landmark: slice_index}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Annotations(pub BTreeMap<String, VolumeLandmarks>);

impl Annotations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, volume_id: &str) -> Option<&VolumeLandmarks> {
        self.0.get(volume_id)
    }

    pub fn insert(&mut self, volume_id: impl Into<String>, landmarks: VolumeLandmarks) {
        self.0.insert(volume_id.into(), landmarks);
    }

    pub fn extend(&mut self, other: &Annotations) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VolumeLandmarks)> {
        self.0.iter()
    }

    /// Checks that every index lies inside its volume. `slice_counts` maps
    /// volume id to number of slices; volumes not listed are skipped.
    pub fn validate(&self, slice_counts: &BTreeMap<String, usize>) -> Result<()> {
        for (vid, lms) in &self.0 {
            let Some(&n) = slice_counts.get(vid) else {
                continue;
            };
            for (name, &idx) in lms {
                if idx >= n {
                    return Err(BpregError::Contract(format!(
                        "landmark {name} of {vid} at slice {idx} outside volume of {n} slices"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BpregError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| BpregError::io(path, e))
    }
}
