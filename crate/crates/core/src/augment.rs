//! Slice-wise data augmentation. Every transform draws its own parameters, so
//! slices of one training item are perturbed independently.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{BpregError, Result};
use crate::volume::{mirror, SLICE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub std_min: f64,
    pub std_max: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlur {
    pub kernel_min: usize,
    pub kernel_max: usize,
    pub sigma_limit: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftScaleRotate {
    /// Maximum translation as a fraction of the slice width.
    pub shift_limit: f64,
    pub scale_limit: f64,
    pub rotate_limit_deg: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Toggle {
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub scale_delta: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brightness {
    pub shift_limit: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddFrame {
    /// Circle diameter as a fraction of the slice width.
    pub diameter: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub gaussian_noise: GaussianNoise,
    pub gaussian_blur: GaussianBlur,
    pub shift_scale_rotate: ShiftScaleRotate,
    pub flip: Toggle,
    pub transpose: Toggle,
    pub contrast: Contrast,
    pub brightness: Brightness,
    pub add_frame: AddFrame,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            gaussian_noise: GaussianNoise {
                std_min: 0.0,
                std_max: 0.04,
                p: 0.5,
            },
            gaussian_blur: GaussianBlur {
                kernel_min: 3,
                kernel_max: 7,
                sigma_limit: 0.5,
                p: 0.5,
            },
            shift_scale_rotate: ShiftScaleRotate {
                shift_limit: 0.0,
                scale_limit: 0.2,
                rotate_limit_deg: 10.0,
                p: 0.5,
            },
            flip: Toggle { p: 0.5 },
            transpose: Toggle { p: 0.5 },
            contrast: Contrast {
                scale_delta: 0.2,
                p: 0.5,
            },
            brightness: Brightness {
                shift_limit: 0.08,
                p: 0.5,
            },
            add_frame: AddFrame {
                diameter: 0.75,
                p: 0.25,
            },
        }
    }
}

impl AugmentationConfig {
    /// Same parameters, every probability set to zero.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.gaussian_noise.p = 0.0;
        c.gaussian_blur.p = 0.0;
        c.shift_scale_rotate.p = 0.0;
        c.flip.p = 0.0;
        c.transpose.p = 0.0;
        c.contrast.p = 0.0;
        c.brightness.p = 0.0;
        c.add_frame.p = 0.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("gaussian_noise", self.gaussian_noise.p),
            ("gaussian_blur", self.gaussian_blur.p),
            ("shift_scale_rotate", self.shift_scale_rotate.p),
            ("flip", self.flip.p),
            ("transpose", self.transpose.p),
            ("contrast", self.contrast.p),
            ("brightness", self.brightness.p),
            ("add_frame", self.add_frame.p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(BpregError::Config(format!("{name}.p = {p} outside [0, 1]")));
            }
        }
        let n = self.gaussian_noise;
        if !(n.std_min >= 0.0 && n.std_max >= n.std_min) {
            return Err(BpregError::Config(format!(
                "noise std range [{}, {}] invalid",
                n.std_min, n.std_max
            )));
        }
        let b = self.gaussian_blur;
        if b.kernel_min < 1 || b.kernel_max < b.kernel_min || b.sigma_limit <= 0.0 {
            return Err(BpregError::Config("blur kernel/sigma range invalid".into()));
        }
        if self.contrast.scale_delta < 0.0 || self.contrast.scale_delta >= 1.0 {
            return Err(BpregError::Config("contrast scale_delta must lie in [0, 1)".into()));
        }
        if self.shift_scale_rotate.scale_limit < 0.0 || self.shift_scale_rotate.scale_limit >= 1.0 {
            return Err(BpregError::Config("scale_limit must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.add_frame.diameter) {
            return Err(BpregError::Config("add_frame diameter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left/right.
    Horizontal,
    /// Mirror top/bottom.
    Vertical,
}

/// Applies the configured transforms in the order noise, blur,
/// shift/scale/rotate, flip, transpose, contrast, brightness, frame.
pub fn augment_slice<R: Rng + ?Sized>(
    slice: &[f64],
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    assert_eq!(slice.len(), SLICE_SIZE * SLICE_SIZE, "slice must be 128x128");
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(BpregError::NonFinite("augmentation input"));
    }
    let mut img = slice.to_vec();
    let n = SLICE_SIZE;

    if hit(rng, cfg.gaussian_noise.p) {
        let c = cfg.gaussian_noise;
        let std = rng.gen_range(c.std_min..=c.std_max);
        add_gaussian_noise(&mut img, std, rng);
    }
    if hit(rng, cfg.gaussian_blur.p) {
        let c = cfg.gaussian_blur;
        let odd: Vec<usize> = (c.kernel_min..=c.kernel_max).filter(|k| k % 2 == 1).collect();
        let ksize = if odd.is_empty() {
            c.kernel_min | 1
        } else {
            odd[rng.gen_range(0..odd.len())]
        };
        let sigma = c.sigma_limit * (1.0 - rng.gen::<f64>());
        img = gaussian_blur(&img, n, ksize, sigma);
    }
    if hit(rng, cfg.shift_scale_rotate.p) {
        let c = cfg.shift_scale_rotate;
        let scale = 1.0 + symmetric(rng, c.scale_limit);
        let angle = symmetric(rng, c.rotate_limit_deg);
        let dx = symmetric(rng, c.shift_limit) * n as f64;
        let dy = symmetric(rng, c.shift_limit) * n as f64;
        img = shift_scale_rotate(&img, n, (dx, dy), scale, angle);
    }
    if hit(rng, cfg.flip.p) {
        let axis = if rng.gen::<bool>() {
            FlipAxis::Horizontal
        } else {
            FlipAxis::Vertical
        };
        img = flip(&img, n, axis);
    }
    if hit(rng, cfg.transpose.p) {
        img = transpose(&img, n);
    }
    if hit(rng, cfg.contrast.p) {
        let d = cfg.contrast.scale_delta;
        contrast(&mut img, rng.gen_range(1.0 - d..=1.0 + d));
    }
    if hit(rng, cfg.brightness.p) {
        brightness(&mut img, rng.gen_range(0.0..=cfg.brightness.shift_limit));
    }
    if hit(rng, cfg.add_frame.p) {
        add_frame(&mut img, n, cfg.add_frame.diameter);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(img)
}

// A zero probability never consumes randomness, so a disabled pipeline is
// the identity regardless of the generator state.
fn hit<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.gen::<f64>() < p
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.gen_range(-limit..=limit)
    }
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &mut [f64], std: f64, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in img.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Separable Gaussian blur with an odd `ksize` and mirrored borders.
pub fn gaussian_blur(img: &[f64], n: usize, ksize: usize, sigma: f64) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    let tmp = crate::volume::convolve_rows(img, n, n, &k);
    crate::volume::convolve_cols(&tmp, n, n, &k)
}

/// Affine warp about the slice center: scale, then rotate by `angle_deg`,
/// then translate by `shift` pixels. Bilinear sampling, mirrored borders.
pub fn shift_scale_rotate(
    img: &[f64],
    n: usize,
    shift: (f64, f64),
    scale: f64,
    angle_deg: f64,
) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            // inverse map from output to input
            let px = x as f64 - c - shift.0;
            let py = y as f64 - c - shift.1;
            let sx = (cos * px + sin * py) / scale + c;
            let sy = (-sin * px + cos * py) / scale + c;
            out[y * n + x] = sample_mirrored(img, n, sx, sy);
        }
    }
    out
}

fn sample_mirrored(img: &[f64], n: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xx: isize, yy: isize| img[mirror(yy, n) * n + mirror(xx, n)];
    let a = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let b = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    a * (1.0 - fy) + b * fy
}

pub fn flip(img: &[f64], n: usize, axis: FlipAxis) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (n - 1 - x, y),
                FlipAxis::Vertical => (x, n - 1 - y),
            };
            out[y * n + x] = img[sy * n + sx];
        }
    }
    out
}

pub fn transpose(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = img[x * n + y];
        }
    }
    out
}

pub fn contrast(img: &mut [f64], factor: f64) {
    img.iter_mut().for_each(|v| *v = (*v * factor).clamp(-1.0, 1.0));
}

pub fn brightness(img: &mut [f64], shift: f64) {
    img.iter_mut().for_each(|v| *v = (*v + shift).clamp(-1.0, 1.0));
}

/// Sets every pixel whose center lies outside the centered circle of
/// diameter `diameter * n` to -1 (air).
pub fn add_frame(img: &mut [f64], n: usize, diameter: f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let r = diameter * n as f64 / 2.0;
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            if dx * dx + dy * dy > r * r {
                img[y * n + x] = -1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const N: usize = SLICE_SIZE;

    fn ramp() -> Vec<f64> {
        (0..N * N)
            .map(|i| ((i % N) as f64 / N as f64) - ((i / N) as f64 / (2 * N) as f64))
            .collect()
    }

    #[test]
    fn disabled_config_is_identity() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_slice(&img, &AugmentationConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_shift_matches_hundred_hu() {
        let mut img = vec![0.0; N * N];
        brightness(&mut img, 0.08);
        assert!(img.iter().all(|&v| v == 0.08));
        // 0.08 of the 2500 HU window mapped onto a width of 2 equals 100 HU
        assert!((0.08 * 2500.0 / 2.0 - 100.0f64).abs() < 1e-12);
    }

    #[test]
    fn frame_masks_outer_ring_only() {
        // bright ring at radius 0.45 n, bright center disc
        let c = (N as f64 - 1.0) / 2.0;
        let mut img = vec![-1.0; N * N];
        for y in 0..N {
            for x in 0..N {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                if (r - 0.45 * N as f64).abs() < 2.0 || r < 10.0 {
                    img[y * N + x] = 1.0;
                }
            }
        }
        let mut out = img.clone();
        add_frame(&mut out, N, 0.75);
        let limit = 0.375 * N as f64;
        for y in 0..N {
            for x in 0..N {
                let r = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                let expected = if r > limit { -1.0 } else { img[y * N + x] };
                assert_eq!(out[y * N + x], expected);
            }
        }
        assert_eq!(out[(N / 2) * N + N / 2], 1.0);
    }

    #[test]
    fn flips_and_transpose_are_involutions() {
        let img = ramp();
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            assert_eq!(flip(&flip(&img, N, axis), N, axis), img);
        }
        assert_eq!(transpose(&transpose(&img, N), N), img);
        assert_ne!(transpose(&img, N), img);
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ramp();
        let out = shift_scale_rotate(&img, N, (0.0, 0.0), 1.0, 0.0);
        for (a, b) in out.iter().zip(&img) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_output_and_range() {
        let img = ramp();
        let cfg = AugmentationConfig {
            add_frame: AddFrame {
                diameter: 0.75,
                p: 1.0,
            },
            ..Default::default()
        };
        for seed in 0..20 {
            let a = augment_slice(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment_slice(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut img = vec![0.0; N * N];
        img[5] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment_slice(&img, &AugmentationConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn noise_std_bounded() {
        // residual std over many draws must not exceed std_max beyond MC error
        let cfg = AugmentationConfig {
            gaussian_noise: GaussianNoise {
                std_min: 0.0,
                std_max: 0.04,
                p: 1.0,
            },
            ..AugmentationConfig::disabled()
        };
        let base = vec![0.0; N * N];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let out = augment_slice(&base, &cfg, &mut rng).unwrap();
            samples.push(out[(N / 2) * N + N / 2]);
        }
        let sd = crate::stats::sample_std(&samples);
        let mc = sd / (2.0 * (draws as f64 - 1.0)).sqrt();
        assert!(sd <= 0.04 + 3.0 * mc, "sd {sd}");
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let mut c = AugmentationConfig::default();
        c.flip.p = 1.5;
        assert!(c.validate().is_err());
        let mut c = AugmentationConfig::default();
        c.gaussian_noise.std_min = 0.1;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&AugmentationConfig::default()).unwrap();
        let back: AugmentationConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AugmentationConfig::default());
    }
}
