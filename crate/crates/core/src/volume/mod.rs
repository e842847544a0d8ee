//! Volume loading and canonical slice preprocessing.

mod nifti_io;
mod raw_json;

use std::path::Path;

use crate::error::{BpregError, Result};

pub use nifti_io::load_nifti;
pub use raw_json::{load_raw_json, save_raw_json};

/// Side length of a canonical slice in pixels.
pub const SLICE_SIZE: usize = 128;
pub const SLICE_PIXELS: usize = SLICE_SIZE * SLICE_SIZE;
/// In-plane pixel spacing of canonical slices (mm).
pub const TARGET_SPACING_MM: f64 = 3.5;
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 1500.0;
/// Smallest value a stored voxel may take (air as written by scanners).
pub const HU_FLOOR: i16 = -1024;
pub const HU_CEIL: i16 = 3071;

/// Reference anti-alias setting: downsampling factor 0.25 with sigma 0.8 px.
const REFERENCE_FACTOR: f64 = 0.25;
const REFERENCE_SIGMA: f64 = 0.8;

/// A CT volume in Hounsfield units, indexed `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub voxels: Vec<i16>,
}

impl RawVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<i16>) -> Result<Self> {
        let v = RawVolume {
            dims,
            spacing,
            voxels,
        };
        v.check().map_err(|r| BpregError::format("<memory>", r))?;
        Ok(v)
    }

    pub(crate) fn check(&self) -> std::result::Result<(), String> {
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(format!("spacing must be positive, got {:?}", self.spacing));
        }
        if self.dims[0] == 0 || self.dims[1] == 0 {
            return Err(format!("empty axial plane {:?}", self.dims));
        }
        if self.dims[2] < 2 {
            return Err(format!("need at least 2 slices, got {}", self.dims[2]));
        }
        let n = self.dims.iter().product::<usize>();
        if n != self.voxels.len() {
            return Err(format!(
                "dims {:?} imply {n} voxels, payload has {}",
                self.dims,
                self.voxels.len()
            ));
        }
        Ok(())
    }

    pub fn num_slices(&self) -> usize {
        self.dims[2]
    }

    pub fn slice(&self, z: usize) -> &[i16] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    /// The same volume with slice order reversed along z.
    pub fn reversed_z(&self) -> RawVolume {
        let n = self.dims[0] * self.dims[1];
        let mut voxels = Vec::with_capacity(self.voxels.len());
        for z in (0..self.dims[2]).rev() {
            voxels.extend_from_slice(&self.voxels[z * n..(z + 1) * n]);
        }
        RawVolume {
            dims: self.dims,
            spacing: self.spacing,
            voxels,
        }
    }
}

/// Clamp a float HU value into the stored voxel range.
pub(crate) fn to_stored_hu(v: f64) -> i16 {
    if v.is_nan() {
        return HU_FLOOR;
    }
    v.round().clamp(HU_FLOOR as f64, HU_CEIL as f64) as i16
}

/// A canonical 128x128 slice with values in [-1, 1], row-major (`y * 128 + x`).
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    data: Vec<f32>,
}

impl Slice {
    pub fn from_f64(values: &[f64]) -> Self {
        assert_eq!(values.len(), SLICE_PIXELS, "slice must be 128x128");
        Slice {
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn filled(value: f64) -> Self {
        Slice {
            data: vec![value as f32; SLICE_PIXELS],
        }
    }

    pub fn as_f32(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedVolume {
    pub slices: Vec<Slice>,
    /// Height of each slice in mm, `i * z_spacing`.
    pub z_positions: Vec<f64>,
    pub z_spacing: f64,
    pub source_id: String,
}

impl PreprocessedVolume {
    pub fn from_slices(slices: Vec<Slice>, z_spacing: f64, source_id: impl Into<String>) -> Self {
        let z_positions = (0..slices.len()).map(|i| i as f64 * z_spacing).collect();
        PreprocessedVolume {
            slices,
            z_positions,
            z_spacing,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn z_range(&self) -> f64 {
        match self.len() {
            0 => 0.0,
            n => (n - 1) as f64 * self.z_spacing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    RawJson,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(VolumeFormat::Nifti)
        } else if name.ends_with(".json") {
            Some(VolumeFormat::RawJson)
        } else {
            None
        }
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<RawVolume> {
    let vol = match format {
        VolumeFormat::Nifti => load_nifti(path)?,
        VolumeFormat::RawJson => load_raw_json(path)?,
    };
    vol.check().map_err(|r| BpregError::format(path, r))?;
    Ok(vol)
}

/// Volume id derived from a file name: the name without `.nii`, `.nii.gz` or `.json`.
pub fn volume_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("volume")
        .to_string();
    for ext in [".nii.gz", ".nii", ".json"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Maps Hounsfield units to [-1, 1] after clipping to [-1000, 1500].
#[inline]
pub fn normalize_hu(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - 250.0) / 1250.0
}

/// Anti-alias sigma (in source pixels) for a source spacing, or `None` when
/// the axis is upsampled and no prefilter is applied.
pub fn prefilter_sigma(source_spacing: f64) -> Option<f64> {
    let factor = source_spacing / TARGET_SPACING_MM;
    (factor < 1.0).then(|| REFERENCE_FACTOR / factor * REFERENCE_SIGMA)
}

pub fn preprocess_volume(v: &RawVolume, source_id: &str) -> PreprocessedVolume {
    let [nx, ny, nz] = v.dims;
    let sigma_x = prefilter_sigma(v.spacing[0]);
    let sigma_y = prefilter_sigma(v.spacing[1]);
    let kx = sigma_x.map(gaussian_kernel);
    let ky = sigma_y.map(gaussian_kernel);
    let ox = ((nx as f64 * v.spacing[0] / TARGET_SPACING_MM).round() as usize).max(1);
    let oy = ((ny as f64 * v.spacing[1] / TARGET_SPACING_MM).round() as usize).max(1);

    let slices = (0..nz)
        .map(|z| {
            let mut img: Vec<f64> = v.slice(z).iter().map(|&h| normalize_hu(h as f64)).collect();
            if let Some(k) = &kx {
                img = convolve_rows(&img, nx, ny, k);
            }
            if let Some(k) = &ky {
                img = convolve_cols(&img, nx, ny, k);
            }
            let resampled = resample_bilinear(
                &img,
                (nx, ny),
                (ox, oy),
                (TARGET_SPACING_MM / v.spacing[0], TARGET_SPACING_MM / v.spacing[1]),
            );
            Slice::from_f64(&pad_or_crop(&resampled, ox, oy, SLICE_SIZE, -1.0))
        })
        .collect();
    PreprocessedVolume::from_slices(slices, v.spacing[2], source_id)
}

/// Normalized Gaussian taps with radius `ceil(4 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Mirror index into `0..n` (edge pixel not repeated).
#[inline]
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

pub(crate) fn convolve_rows(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kw) in k.iter().enumerate() {
                acc += kw * row[mirror(x as isize + t as isize - r, w)];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub(crate) fn convolve_cols(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for (t, &kw) in k.iter().enumerate() {
            let sy = mirror(y as isize + t as isize - r, h);
            let src = &img[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kw * s;
            }
        }
    }
    out
}

/// Bilinear resampling with pixel-center alignment; `step` is source pixels
/// per output pixel along (x, y). Coordinates are clamped at the border.
fn resample_bilinear(
    img: &[f64],
    (w, h): (usize, usize),
    (ow, oh): (usize, usize),
    step: (f64, f64),
) -> Vec<f64> {
    let coords = |o: usize, n: usize, s: f64| -> Vec<(usize, usize, f64)> {
        (0..o)
            .map(|i| {
                let src = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let cx = coords(ow, w, step.0);
    let cy = coords(oh, h, step.1);
    let mut out = Vec::with_capacity(ow * oh);
    for &(y0, y1, fy) in &cy {
        for &(x0, x1, fx) in &cx {
            let a = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
            let b = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
            out.push(a * (1.0 - fy) + b * fy);
        }
    }
    out
}

/// Centers a `w x h` image on a `size x size` canvas. Odd residuals go to
/// the high-index side for both padding and cropping.
fn pad_or_crop(img: &[f64], w: usize, h: usize, size: usize, fill: f64) -> Vec<f64> {
    let mut out = vec![fill; size * size];
    // (source offset, destination offset, count) along one axis
    let axis = |n: usize| -> (usize, usize, usize) {
        if n >= size {
            ((n - size) / 2, 0, size)
        } else {
            (0, (size - n) / 2, n)
        }
    };
    let (sx, dx, cx) = axis(w);
    let (sy, dy, cy) = axis(h);
    for y in 0..cy {
        let src = &img[(sy + y) * w + sx..(sy + y) * w + sx + cx];
        out[(dy + y) * size + dx..(dy + y) * size + dx + cx].copy_from_slice(src);
    }
    out
}
