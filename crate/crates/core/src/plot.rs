//! Minimal PNG line plot of unprocessed against cleaned scores.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{BpregError, Result};
use crate::postprocess::CleanedScoreCurve;

const W: u32 = 640;
const H: u32 = 400;
const PAD: f64 = 30.0;
pub const UNPROCESSED_COLOR: Rgb<u8> = Rgb([120, 120, 200]);
pub const CLEANED_COLOR: Rgb<u8> = Rgb([200, 30, 30]);

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub fn render_curves(curve: &CleanedScoreCurve) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let n = curve.unprocessed.len();
    let zmax = (n.max(2) - 1) as f64 * curve.z_spacing;
    let all = curve.unprocessed.iter().chain(&curve.scores).copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let px = |z: f64, s: f64| -> (i64, i64) {
        let x = PAD + (z / zmax) * (W as f64 - 2.0 * PAD);
        let y = H as f64 - PAD - (s - lo) / (hi - lo) * (H as f64 - 2.0 * PAD);
        (x.round() as i64, y.round() as i64)
    };
    let axis = Rgb([0, 0, 0]);
    line(&mut img, px(0.0, lo), px(zmax, lo), axis);
    line(&mut img, px(0.0, lo), px(0.0, hi), axis);
    let unproc: Vec<(f64, f64)> =
        curve.unprocessed.iter().enumerate().map(|(i, &s)| (i as f64 * curve.z_spacing, s)).collect();
    let cleaned: Vec<(f64, f64)> = curve.z.iter().copied().zip(curve.scores.iter().copied()).collect();
    for (pts, c) in [(unproc, UNPROCESSED_COLOR), (cleaned, CLEANED_COLOR)] {
        for w in pts.windows(2) {
            line(&mut img, px(w[0].0, w[0].1), px(w[1].0, w[1].1), c);
        }
    }
    img
}

pub fn save_plot(curve: &CleanedScoreCurve, path: &Path) -> Result<()> {
    render_curves(curve)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| BpregError::format(path, e.to_string()))
}
