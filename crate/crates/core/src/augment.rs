// SPDX-License-Identifier: Apache-2.0

//! Multi-grid 2D elastic deformation.
//!
//! A regular grid of control points receives i.i.d. Gaussian offsets. The
//! offsets are interpolated to a dense per-pixel displacement with a
//! Catmull-Rom bicubic kernel, and each output pixel samples the source
//! image, again bicubically, at its displaced position (backward warp, so
//! the output has no holes). Both lookups clamp to the edge. The kernel
//! interpolates, so a zero field reproduces the input exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::GrayImage;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("control grid must be at least 2x2, got {0}x{1}")]
    GridTooSmall(usize, usize),
    #[error("image must be at least 4x4, got {0}x{1}")]
    ImageTooSmall(usize, usize),
    #[error("sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
}

pub const DEFAULT_GRID: usize = 5;
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Control-point offsets in pixels, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformField {
    pub grid_w: usize,
    pub grid_h: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl DeformField {
    pub fn zero(grid_w: usize, grid_h: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            dx: vec![0.0; grid_w * grid_h],
            dy: vec![0.0; grid_w * grid_h],
            sigma: 0.0,
            seed: 0,
        }
    }

    fn offset(&self, gx: isize, gy: isize) -> (f64, f64) {
        let x = gx.clamp(0, self.grid_w as isize - 1) as usize;
        let y = gy.clamp(0, self.grid_h as isize - 1) as usize;
        let i = y * self.grid_w + x;
        (self.dx[i], self.dy[i])
    }
}

/// Draws `(dx, dy)` for each control point from `N(0, sigma²)`.
pub fn sample_field(grid_w: usize, grid_h: usize, sigma: f64, seed: u64) -> Result<DeformField, AugmentError> {
    if grid_w < 2 || grid_h < 2 {
        return Err(AugmentError::GridTooSmall(grid_w, grid_h));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(AugmentError::BadSigma(sigma));
    }
    let n = grid_w * grid_h;
    let mut field = DeformField {
        sigma,
        seed,
        ..DeformField::zero(grid_w, grid_h)
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            field.dx[i] = normal.sample(&mut rng);
            field.dy[i] = normal.sample(&mut rng);
        }
    }
    Ok(field)
}

/// Catmull-Rom weights for taps at -1, 0, 1, 2 around fraction `t`.
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn bicubic(x: f64, y: f64, tap: impl Fn(isize, isize) -> f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let wx = catmull_rom(x - x0);
    let wy = catmull_rom(y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        if *wyj == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            if *wxi != 0.0 {
                row += wxi * tap(x0 + i as isize - 1, y0 + j as isize - 1);
            }
        }
        acc += wyj * row;
    }
    acc
}

/// Dense displacement at pixel `(x, y)`.
pub fn displacement(field: &DeformField, width: usize, height: usize, x: usize, y: usize) -> (f64, f64) {
    let gx = x as f64 * (field.grid_w - 1) as f64 / (width - 1) as f64;
    let gy = y as f64 * (field.grid_h - 1) as f64 / (height - 1) as f64;
    let dx = bicubic(gx, gy, |i, j| field.offset(i, j).0);
    let dy = bicubic(gx, gy, |i, j| field.offset(i, j).1);
    (dx, dy)
}

pub fn warp(image: &GrayImage, field: &DeformField) -> Result<GrayImage, AugmentError> {
    let (w, h) = (image.width(), image.height());
    if w < 4 || h < 4 {
        return Err(AugmentError::ImageTooSmall(w, h));
    }
    if field.grid_w < 2 || field.grid_h < 2 {
        return Err(AugmentError::GridTooSmall(field.grid_w, field.grid_h));
    }
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = displacement(field, w, h, x, y);
            let sx = (x as f64 + dx).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + dy).clamp(0.0, (h - 1) as f64);
            let v = bicubic(sx, sy, |i, j| image.get_clamped(i, j) as f64);
            out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glyph() -> GrayImage {
        let mut img = GrayImage::new(32, 32);
        for i in 6..26 {
            for t in 0..3 {
                img.set(i, 14 + t, 255);
                img.set(14 + t, i, 255);
            }
        }
        img
    }

    #[test]
    fn zero_sigma_field() {
        let f = sample_field(5, 5, 0.0, 9).unwrap();
        assert!(f.dx.iter().chain(&f.dy).all(|&v| v == 0.0));
        let img = glyph();
        assert_eq!(warp(&img, &f).unwrap(), img);
    }

    #[test]
    fn deterministic() {
        assert_eq!(sample_field(5, 4, 2.0, 3).unwrap(), sample_field(5, 4, 2.0, 3).unwrap());
        assert_ne!(sample_field(5, 4, 2.0, 3).unwrap(), sample_field(5, 4, 2.0, 4).unwrap());
    }

    #[test]
    fn constant_image_is_fixed() {
        let img = GrayImage::filled(20, 17, 128);
        for seed in 0..5 {
            let f = sample_field(5, 5, 3.0, seed).unwrap();
            assert_eq!(warp(&img, &f).unwrap(), img);
        }
    }

    #[test]
    fn errors() {
        assert_eq!(sample_field(1, 5, 1.0, 0), Err(AugmentError::GridTooSmall(1, 5)));
        assert_eq!(sample_field(5, 5, -1.0, 0), Err(AugmentError::BadSigma(-1.0)));
        let f = sample_field(5, 5, 1.0, 0).unwrap();
        assert_eq!(warp(&GrayImage::new(3, 8), &f), Err(AugmentError::ImageTooSmall(3, 8)));
    }

    #[test]
    fn interpolation_hits_control_points() {
        let f = sample_field(5, 5, 2.0, 11).unwrap();
        // 33 px wide: control point spacing is exactly 8 px
        for gy in 0..5 {
            for gx in 0..5 {
                let (dx, dy) = displacement(&f, 33, 33, gx * 8, gy * 8);
                let i = gy * 5 + gx;
                assert!((dx - f.dx[i]).abs() < 1e-12 && (dy - f.dy[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn glyph_changes_but_keeps_its_mass() {
        let img = glyph();
        let f = sample_field(5, 5, 2.0, 42).unwrap();
        let out = warp(&img, &f).unwrap();
        assert_ne!(out, img);
        let before = img.count_at_least(128) as f64;
        let after = out.count_at_least(128) as f64;
        assert!(((after - before) / before).abs() < 0.3);
    }
}
