//! Training items: m equidistant slices from one volume at a physically
//! sampled spacing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_slice, AugmentationConfig};
use crate::error::{BpregError, Result};
use crate::volume::PreprocessedVolume;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub slices: Vec<Vec<f64>>,
    /// Realized physical gap between consecutive slices, k * z_spacing.
    pub delta_h: f64,
    pub k: usize,
    pub start: usize,
    pub volume_id: String,
}

impl TrainingItem {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.slices.len()).map(move |i| self.start + i * self.k)
    }
}

/// How the index step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSampling {
    /// Draw a physical distance in mm and convert it with the z-spacing.
    Physical { min_mm: f64, max_mm: f64 },
    /// Draw the index step directly, ignoring the spacing.
    Index { min: usize, max: usize },
}

impl Default for StepSampling {
    fn default() -> Self {
        StepSampling::Physical {
            min_mm: 5.0,
            max_mm: 100.0,
        }
    }
}

impl StepSampling {
    pub fn ssbr() -> Self {
        StepSampling::Index { min: 2, max: 30 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSampling::Physical { min_mm, max_mm } => {
                if !(min_mm > 0.0 && max_mm >= min_mm && max_mm.is_finite()) {
                    return Err(BpregError::Config(format!(
                        "delta_h range [{min_mm}, {max_mm}] invalid"
                    )));
                }
            }
            StepSampling::Index { min, max } => {
                if min == 0 || max < min {
                    return Err(BpregError::Config(format!("index step range [{min}, {max}] invalid")));
                }
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, z_spacing: f64, rng: &mut R) -> usize {
        match *self {
            StepSampling::Physical { min_mm, max_mm } => {
                let dh = if max_mm > min_mm {
                    rng.gen_range(min_mm..=max_mm)
                } else {
                    min_mm
                };
                delta_h_to_index_step(dh, z_spacing)
            }
            StepSampling::Index { min, max } => rng.gen_range(min..=max),
        }
    }

    fn smallest(&self, z_spacing: f64) -> usize {
        match *self {
            StepSampling::Physical { min_mm, .. } => delta_h_to_index_step(min_mm, z_spacing),
            StepSampling::Index { min, .. } => min,
        }
    }
}

/// Index step for a physical distance, never below 1.
pub fn delta_h_to_index_step(delta_h: f64, z_spacing: f64) -> usize {
    debug_assert!(delta_h > 0.0 && z_spacing > 0.0);
    ((delta_h / z_spacing).round() as usize).max(1)
}

/// Draws the step and start index for a volume of `n` slices.
pub fn sample_positions<R: Rng + ?Sized>(
    n: usize,
    z_spacing: f64,
    m: usize,
    step: &StepSampling,
    rng: &mut R,
) -> Option<(usize, usize)> {
    if m < 2 || n < m {
        return None;
    }
    let k_max = (n - 1) / (m - 1);
    let mut k = None;
    for _ in 0..MAX_RETRIES {
        let cand = step.draw(z_spacing, rng);
        if cand <= k_max {
            k = Some(cand);
            break;
        }
    }
    let k = match k {
        Some(k) => k,
        None => {
            let smallest = step.smallest(z_spacing);
            if smallest > k_max {
                return None;
            }
            smallest
        }
    };
    let last_start = n - 1 - (m - 1) * k;
    let start = rng.gen_range(0..=last_start);
    Some((k, start))
}

pub fn sample_training_item<R: Rng + ?Sized>(
    volume: &PreprocessedVolume,
    m: usize,
    step: &StepSampling,
    augmentation: &AugmentationConfig,
    rng: &mut R,
) -> Result<TrainingItem> {
    let (k, start) = sample_positions(volume.len(), volume.z_spacing, m, step, rng).ok_or_else(|| {
        BpregError::Sampling {
            volume: volume.source_id.clone(),
            reason: format!(
                "{} slices at {} mm cannot hold {m} slices at the sampled spacing",
                volume.len(),
                volume.z_spacing
            ),
        }
    })?;
    let slices = (0..m)
        .map(|i| augment_slice(&volume.slices[start + i * k].to_f64(), augmentation, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingItem {
        slices,
        delta_h: k as f64 * volume.z_spacing,
        k,
        start,
        volume_id: volume.source_id.clone(),
    })
}
