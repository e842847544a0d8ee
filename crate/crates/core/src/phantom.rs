//! Procedural CT-like phantoms with a known anatomical coordinate.
//!
//! Each axial slice shows an elliptic body whose size and radial ring
//! frequency are smooth increasing functions of a latent height `u`
//! (0 at the pelvis-start analog, 100 at the eyes-end analog). Patient
//! rotation, a global intensity offset and noise vary per volume.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::landmarks::{Annotations, VolumeLandmarks};
use crate::volume::{save_raw_json, RawVolume};

/// Physical body length in mm between u = 0 and u = 100 at scale 1.
pub const BODY_LENGTH_MM: f64 = 300.0;
pub const AIR_HU: f64 = -1000.0;
const BODY_HU: f64 = 40.0;
const RING_HU: f64 = 150.0;
const ASPECT: f64 = 1.1;

/// Latent position of every landmark analog.
pub fn landmark_latents() -> Vec<(&'static str, f64)> {
    let step = 100.0 / 11.0;
    let ev = |k: usize| k as f64 * step;
    let between = |a: usize, b: usize, t: f64| ev(a) + t * (ev(b) - ev(a));
    vec![
        ("pelvis-start", ev(0)),
        ("femur-end", ev(1)),
        ("L5", ev(2)),
        ("pelvis-end", 20.0),
        ("L4", between(2, 3, 0.5)),
        ("L3", ev(3)),
        ("L2", between(3, 4, 0.5)),
        ("kidneys", 33.0),
        ("L1", ev(4)),
        ("Th12", between(4, 5, 0.5)),
        ("lung-start", 42.0),
        ("Th11", ev(5)),
        ("Th10", between(5, 6, 1.0 / 3.0)),
        ("liver-end", 50.0),
        ("Th9", between(5, 6, 2.0 / 3.0)),
        ("Th8", ev(6)),
        ("Th7", between(6, 7, 1.0 / 3.0)),
        ("Th6", between(6, 7, 2.0 / 3.0)),
        ("Th5", ev(7)),
        ("Th4", between(7, 8, 1.0 / 3.0)),
        ("Th3", between(7, 8, 2.0 / 3.0)),
        ("Th2", ev(8)),
        ("Th1", between(8, 9, 1.0 / 3.0)),
        ("lung-end", 76.0),
        ("C7", between(8, 9, 2.0 / 3.0)),
        ("C6", ev(9)),
        ("C5", between(9, 10, 0.2)),
        ("C4", between(9, 10, 0.4)),
        ("C3", between(9, 10, 0.6)),
        ("C2", between(9, 10, 0.8)),
        ("C1", ev(10)),
        ("teeth", 93.0),
        ("nose", 96.0),
        ("eyes-end", ev(11)),
        ("head-end", 110.0),
    ]
}

/// Body radius in mm at latent height u.
pub fn body_radius_mm(u: f64) -> f64 {
    25.0 + 0.5 * u
}

/// Radial ring frequency in cycles per normalized radius, from 1 at u = 0
/// to 4 at u = 100. Half linear, half geometric in u.
pub fn ring_frequency(u: f64) -> f64 {
    0.5 * (1.0 + 3.0 * u / 100.0) + 0.5 * 4f64.powf(u / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub u_start: f64,
    pub u_end: f64,
    /// Body height scale; the latent advances 100 units per
    /// `BODY_LENGTH_MM * scale` mm.
    pub scale: f64,
    pub z_spacing: f64,
    pub pixel_spacing: f64,
    pub size: usize,
    pub noise_std: f64,
    /// Seed of the nuisance variation (rotation, offset, noise).
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            u_start: 0.0,
            u_end: 100.0,
            scale: 1.0,
            z_spacing: 2.0,
            pixel_spacing: 3.5,
            size: 64,
            noise_std: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Latent units per mm of height.
    pub fn latent_per_mm(&self) -> f64 {
        100.0 / (BODY_LENGTH_MM * self.scale)
    }

    pub fn num_slices(&self) -> usize {
        let extent = (self.u_end - self.u_start) / self.latent_per_mm();
        (extent / self.z_spacing + 1e-9).floor() as usize + 1
    }

    pub fn latent_at(&self, i: usize) -> f64 {
        self.u_start + i as f64 * self.z_spacing * self.latent_per_mm()
    }

    fn validate(&self) -> Result<()> {
        let ok = self.u_end > self.u_start
            && self.scale > 0.0
            && self.z_spacing > 0.0
            && self.pixel_spacing > 0.0
            && self.size > 0
            && self.noise_std >= 0.0;
        if !ok {
            return Err(BpregError::Config(format!("invalid phantom spec {self:?}")));
        }
        if self.num_slices() < 2 {
            return Err(BpregError::Config(format!(
                "phantom spec yields {} slice(s), need at least 2",
                self.num_slices()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: RawVolume,
    pub landmarks: VolumeLandmarks,
}

/// Slice indices where the latent crosses each landmark latent.
pub fn phantom_landmarks(spec: &PhantomSpec) -> VolumeLandmarks {
    let n = spec.num_slices();
    let u_last = spec.latent_at(n - 1);
    let step = spec.z_spacing * spec.latent_per_mm();
    landmark_latents()
        .into_iter()
        .filter(|&(_, u)| u >= spec.u_start - 1e-6 * step && u <= u_last + 1e-6 * step)
        .map(|(name, u)| {
            let idx = ((u - spec.u_start) / step).round().max(0.0) as usize;
            (name.to_string(), idx.min(n - 1))
        })
        .collect()
}

pub fn generate_phantom_volume(spec: &PhantomSpec) -> Result<(RawVolume, VolumeLandmarks)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let angle = rng.gen_range(-15.0f64..=15.0).to_radians();
    let offset = rng.gen_range(-30.0..=30.0);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let n = spec.num_slices();
    let size = spec.size;
    let c = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut voxels = Vec::with_capacity(size * size * n);
    for z in 0..n {
        let u = spec.latent_at(z);
        let r = body_radius_mm(u);
        let f = ring_frequency(u);
        for y in 0..size {
            for x in 0..size {
                let px = (x as f64 - c) * spec.pixel_spacing;
                let py = (y as f64 - c) * spec.pixel_spacing;
                let xr = cos * px + sin * py;
                let yr = -sin * px + cos * py;
                let rho = ((xr / (r * ASPECT)).powi(2) + (yr * ASPECT / r).powi(2)).sqrt();
                // anti-aliased edge about one pixel wide
                let w = ((1.0 - rho) * r / spec.pixel_spacing + 0.5).clamp(0.0, 1.0);
                let tissue = BODY_HU + offset + RING_HU * (2.0 * PI * f * rho).cos();
                let mut hu = AIR_HU + w * (tissue - AIR_HU);
                if spec.noise_std > 0.0 {
                    hu += noise.sample(&mut rng);
                }
                voxels.push(crate::volume::to_stored_hu(hu));
            }
        }
    }
    let vol = RawVolume::new(
        [size, size, n],
        [spec.pixel_spacing, spec.pixel_spacing, spec.z_spacing],
        voxels,
    )?;
    Ok((vol, phantom_landmarks(spec)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Relative spread of the body height scale, drawn from 1 ± jitter.
    pub scale_jitter: f64,
    pub z_spacing_range: [f64; 2],
    pub pixel_spacing_range: [f64; 2],
    pub slice_count_range: [usize; 2],
    pub size: usize,
    pub noise_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scale_jitter: 0.2,
            z_spacing_range: [1.0, 4.0],
            pixel_spacing_range: [3.0, 4.0],
            slice_count_range: [48, 110],
            size: 64,
            noise_std: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Seed of volume `i` in a split; splits occupy disjoint ranges.
pub fn volume_seed(base: u64, split: Split, i: usize) -> u64 {
    base.wrapping_mul(3)
        .wrapping_add(split.index())
        .wrapping_shl(32)
        .wrapping_add(i as u64)
}

/// Random spec for one dataset volume. Validation volumes always span the
/// full pelvis-start to eyes-end range.
pub fn random_spec(cfg: &DatasetConfig, split: Split, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let scale = 1.0 + rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter);
    let z_spacing = rng.gen_range(cfg.z_spacing_range[0]..=cfg.z_spacing_range[1]);
    let pixel_spacing = rng.gen_range(cfg.pixel_spacing_range[0]..=cfg.pixel_spacing_range[1]);
    let per_mm = 100.0 / (BODY_LENGTH_MM * scale);
    let (u_start, u_end) = if split == Split::Val {
        (rng.gen_range(-10.0..=-2.0), rng.gen_range(102.0..=110.0))
    } else {
        let n = rng.gen_range(cfg.slice_count_range[0]..=cfg.slice_count_range[1]);
        let len = ((n - 1) as f64 * z_spacing * per_mm).min(120.0);
        let start = rng.gen_range(-10.0..=110.0 - len);
        (start, start + len)
    };
    PhantomSpec {
        u_start,
        u_end,
        scale,
        z_spacing,
        pixel_spacing,
        size: cfg.size,
        noise_std: cfg.noise_std,
        seed,
    }
}

pub fn generate_split(cfg: &DatasetConfig, split: Split, n: usize, base_seed: u64) -> Result<Vec<PhantomVolume>> {
    (0..n)
        .map(|i| {
            let seed = volume_seed(base_seed, split, i);
            let spec = random_spec(cfg, split, seed);
            let (volume, landmarks) = generate_phantom_volume(&spec)?;
            Ok(PhantomVolume {
                id: format!("{}_{i:04}", split.name()),
                spec,
                volume,
                landmarks,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub train: Vec<PhantomVolume>,
    pub val: Vec<PhantomVolume>,
    pub test: Vec<PhantomVolume>,
}

pub fn generate_phantom_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<PhantomDataset> {
    Ok(PhantomDataset {
        train: generate_split(cfg, Split::Train, n_train, seed)?,
        val: generate_split(cfg, Split::Val, n_val, seed)?,
        test: generate_split(cfg, Split::Test, n_test, seed)?,
    })
}

pub fn annotations_of(volumes: &[PhantomVolume]) -> Annotations {
    let mut a = Annotations::new();
    for v in volumes {
        a.insert(v.id.clone(), v.landmarks.clone());
    }
    a
}

/// Writes `<dir>/<split>/<id>.json` volumes and `<dir>/<split>_annotations.json`.
pub fn write_dataset(ds: &PhantomDataset, dir: &Path) -> Result<()> {
    for (split, vols) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let sub = dir.join(split);
        std::fs::create_dir_all(&sub).map_err(|e| BpregError::io(&sub, e))?;
        for v in vols.iter() {
            save_raw_json(&v.volume, &sub.join(format!("{}.json", v.id)))?;
        }
        annotations_of(vols).save(&dir.join(format!("{split}_annotations.json")))?;
    }
    Ok(())
}
