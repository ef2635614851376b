// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use easa_core::augment::{displacement, sample_field, warp, DeformField};
use easa_core::image::GrayImage;
use proptest::prelude::*;

const GOLDEN: &str = "stroke_sigma2_seed7.pgm";

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(GOLDEN)
}

/// 32x32 canvas with one horizontal stroke, 3 px thick.
fn stroke() -> GrayImage {
    let mut img = GrayImage::new(32, 32);
    for x in 6..26 {
        for y in 15..18 {
            img.set(x, y, 255);
        }
    }
    img
}

fn image_strategy() -> impl Strategy<Value = GrayImage> {
    (4usize..24, 4usize..24).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), w * h).prop_map(move |px| GrayImage::from_pixels(w, h, px).unwrap())
    })
}

#[test]
fn golden_warp() {
    let f = sample_field(5, 5, 2.0, 7).unwrap();
    let out = warp(&stroke(), &f).unwrap();
    // Set EASA_BLESS=1 to rewrite the frozen image.
    if std::env::var_os("EASA_BLESS").is_some() {
        out.save_pgm(golden_path()).unwrap();
    }
    let golden = GrayImage::load_pgm(golden_path()).unwrap();
    assert_eq!(out, golden);
    assert_eq!(out.to_pgm(), std::fs::read(golden_path()).unwrap());
}

#[test]
fn golden_stroke_changes_but_keeps_its_foreground() {
    let img = stroke();
    let out = warp(&img, &sample_field(5, 5, 2.0, 7).unwrap()).unwrap();
    assert_ne!(out, img);
    let before = img.count_at_least(128) as f64;
    let after = out.count_at_least(128) as f64;
    assert!(((after - before) / before).abs() < 0.3, "{before} -> {after}");
}

#[test]
fn control_offsets_have_requested_spread() {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for seed in 0..10_000 {
        let f = sample_field(5, 5, 2.0, seed).unwrap();
        for &v in f.dx.iter().chain(&f.dy) {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    let std = (sq / n - mean * mean).sqrt();
    assert!((std - 2.0).abs() < 0.05, "std {std}");
    assert!(mean.abs() < 0.05, "mean {mean}");
}

#[test]
fn dense_field_reproduces_linear_offsets_inside() {
    let mut f = DeformField::zero(5, 5);
    for gy in 0..5 {
        for gx in 0..5 {
            f.dx[gy * 5 + gx] = 0.3 * gx as f64 - 0.1 * gy as f64 + 0.25;
            f.dy[gy * 5 + gx] = -0.2 * gx as f64 + 0.4 * gy as f64;
        }
    }
    // On a 33 px canvas grid spacing is 8 px; pixels 8..=24 only touch
    // interior taps.
    for y in 8..=24 {
        for x in 8..=24 {
            let (gx, gy) = (x as f64 / 8.0, y as f64 / 8.0);
            let (dx, dy) = displacement(&f, 33, 33, x, y);
            assert!((dx - (0.3 * gx - 0.1 * gy + 0.25)).abs() < 1e-12);
            assert!((dy - (-0.2 * gx + 0.4 * gy)).abs() < 1e-12);
        }
    }
}

#[test]
fn integer_field_is_a_clamped_shift() {
    let mut f = DeformField::zero(4, 4);
    f.dx.iter_mut().for_each(|v| *v = 2.0);
    f.dy.iter_mut().for_each(|v| *v = -1.0);
    let img = GrayImage::from_pixels(9, 7, (0..63).map(|i| (i * 4) as u8).collect()).unwrap();
    let out = warp(&img, &f).unwrap();
    for y in 0..7 {
        for x in 0..9 {
            let sx = (x + 2).min(8);
            let sy = y.max(1) - 1;
            assert_eq!(out.get(x, y), img.get(sx, sy), "({x},{y})");
        }
    }
}

proptest! {
    #[test]
    fn zero_sigma_is_identity(img in image_strategy(), seed in any::<u64>(), gw in 2usize..8, gh in 2usize..8) {
        let f = sample_field(gw, gh, 0.0, seed).unwrap();
        prop_assert_eq!(warp(&img, &f).unwrap(), img);
    }

    #[test]
    fn constant_image_is_fixed(v in any::<u8>(), w in 4usize..30, h in 4usize..30, seed in any::<u64>(), sigma in 0.0f64..6.0) {
        let img = GrayImage::filled(w, h, v);
        let f = sample_field(5, 5, sigma, seed).unwrap();
        prop_assert_eq!(warp(&img, &f).unwrap(), img);
    }

    #[test]
    fn same_seed_same_warp(seed in any::<u64>()) {
        let img = stroke();
        let a = warp(&img, &sample_field(5, 5, 2.0, seed).unwrap()).unwrap();
        let b = warp(&img, &sample_field(5, 5, 2.0, seed).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
