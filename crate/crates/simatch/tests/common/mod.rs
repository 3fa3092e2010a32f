//! Deterministic synthetic corpora and binary-format writers shared by the
//! integration tests.
//!
//! Full-scale image datasets are out of reach for a test suite, so these
//! generators produce compact datasets with the same binary layouts and the
//! structural properties each experiment needs:
//!
//! * [`glyphs`] — 28×28 grayscale stroke patterns in 10 classes (IDX
//!   layout). Oriented-edge patch statistics, easy for both patch learners
//!   and small classifiers.
//! * [`textured_glyphs`] — the same strokes over a class-independent
//!   striped background that dominates the patch statistics, for
//!   pre-training experiments where unsupervised and supervised patch
//!   codes must genuinely differ.
//! * [`gratings`] — 32×32 RGB oriented sinusoids in 10 classes with random
//!   phase (CIFAR layout). A linear classifier on raw pixels is near
//!   chance because the phase randomizes every pixel's class-conditional
//!   mean, while local patch features carry the orientation cleanly.
//! * [`mirror_clusters`] — centered feature vectors whose class signal is a
//!   direction (±μ_c with a random sign) alongside stronger class-irrelevant
//!   cluster structure. Class-conditional means are ~0, so prototype-style
//!   solutions fail; only the label-similarity term can steer a code toward
//!   the class directions, and its useful strength is bracketed on both
//!   sides (see the function docs).
//!
//! Glyph and grating pixels are quantized to the 8-bit grid (`k/255`) so
//! in-memory corpora are bit-identical to what the binary loaders would
//! produce. Mirror-cluster samples are real-valued features, not pixels.

#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use simatch::data::LabeledDataset;

pub const GLYPH_SIDE: usize = 28;
pub const CIFAR_SIDE: usize = 32;
pub const CLASSES: usize = 10;

/// Snap to the 8-bit pixel grid after clipping to `[0, 1]`, reproducing the
/// loaders' byte-to-real conversion exactly (multiply by the scale constant,
/// not divide by 255 — the two can differ in the last ulp).
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() * simatch::data::DEFAULT_PIXEL_SCALE
}

fn one_hot(classes: usize, assignments: &[usize]) -> Array2<f64> {
    let mut labels = Array2::zeros((classes, assignments.len()));
    for (j, &c) in assignments.iter().enumerate() {
        labels[[c, j]] = 1.0;
    }
    labels
}

// ---------------------------------------------------------------------------
// Glyphs (MNIST-like)
// ---------------------------------------------------------------------------

/// Distance from point `p` to the segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

enum Stroke {
    Segment((f64, f64), (f64, f64)),
    Ring { center: (f64, f64), radius: f64 },
}

fn glyph_strokes(class: usize) -> Vec<Stroke> {
    use Stroke::*;
    match class {
        0 => vec![Ring { center: (14.0, 14.0), radius: 7.5 }],
        1 => vec![Segment((14.0, 5.0), (14.0, 22.0))],
        2 => vec![Segment((5.0, 14.0), (22.0, 14.0))],
        3 => vec![Segment((6.0, 6.0), (21.0, 21.0))],
        4 => vec![Segment((21.0, 6.0), (6.0, 21.0))],
        5 => vec![Segment((9.0, 5.0), (9.0, 22.0)), Segment((18.0, 5.0), (18.0, 22.0))],
        6 => vec![Segment((5.0, 9.0), (22.0, 9.0)), Segment((5.0, 18.0), (22.0, 18.0))],
        7 => vec![Segment((6.0, 6.0), (14.0, 21.0)), Segment((21.0, 6.0), (14.0, 21.0))],
        8 => vec![Segment((14.0, 5.0), (14.0, 22.0)), Segment((5.0, 14.0), (22.0, 14.0))],
        _ => vec![Segment((7.0, 7.0), (7.0, 20.0)), Segment((7.0, 20.0), (20.0, 20.0))],
    }
}

/// `t` stroke-pattern images, classes assigned round-robin. Per-sample
/// jitter: integer translation in `[-2, 2]`, amplitude in `[0.7, 1.0]`, and
/// uniform pixel noise.
pub fn glyphs(t: usize, seed: u64) -> LabeledDataset {
    let side = GLYPH_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((side * side, t));
    let mut assignments = Vec::with_capacity(t);
    for j in 0..t {
        let class = j % CLASSES;
        assignments.push(class);
        let dx = rng.random_range(-2..=2) as f64;
        let dy = rng.random_range(-2..=2) as f64;
        let amplitude = rng.random_range(0.7..1.0);
        let strokes = glyph_strokes(class);
        for y in 0..side {
            for x in 0..side {
                let p = (x as f64 - dx, y as f64 - dy);
                let mut ink: f64 = 0.0;
                for stroke in &strokes {
                    let d = match stroke {
                        Stroke::Segment(a, b) => segment_distance(p, *a, *b),
                        Stroke::Ring { center, radius } => {
                            let r = ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt();
                            (r - radius).abs()
                        }
                    };
                    // Soft-edged stroke about 2.2 px wide.
                    ink = ink.max((1.6 - d).clamp(0.0, 1.0));
                }
                let noise = rng.random_range(0.0..0.05);
                samples[[y * side + x, j]] = quantize(amplitude * ink + noise);
            }
        }
    }
    LabeledDataset::new(samples, one_hot(CLASSES, &assignments), None).unwrap()
}

/// Glyphs drawn over a striped background whose orientation, phase, and
/// wavelength are drawn per sample, independent of the class.
///
/// Stripes cover the whole image while strokes cover a minority of pixels,
/// and per-patch standardization amplifies even faint bands to full
/// contrast, so the patch statistics are dominated by class-irrelevant
/// texture: an unsupervised patch code spends most of a small filter budget
/// on stripe detectors, which a task fine-tune then has to repurpose. A
/// label-similarity term redirects the patch code toward stroke-selective
/// filters that fine-tuning keeps, while a very large one collapses the
/// patch code onto label prototypes that fine-tuning must rebuild.
/// `texture` sets the stripe amplitude.
pub fn textured_glyphs(t: usize, texture: f64, seed: u64) -> LabeledDataset {
    let side = GLYPH_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((side * side, t));
    let mut assignments = Vec::with_capacity(t);
    for j in 0..t {
        let class = j % CLASSES;
        assignments.push(class);
        let dx = rng.random_range(-2..=2) as f64;
        let dy = rng.random_range(-2..=2) as f64;
        let amplitude = rng.random_range(0.7..1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let wavelength = rng.random_range(3.5..5.5);
        let freq = 2.0 * std::f64::consts::PI / wavelength;
        let phase = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
        let (ct, st) = (theta.cos(), theta.sin());
        let strokes = glyph_strokes(class);
        for y in 0..side {
            for x in 0..side {
                let p = (x as f64 - dx, y as f64 - dy);
                let mut ink: f64 = 0.0;
                for stroke in &strokes {
                    let d = match stroke {
                        Stroke::Segment(a, b) => segment_distance(p, *a, *b),
                        Stroke::Ring { center, radius } => {
                            let r = ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt();
                            (r - radius).abs()
                        }
                    };
                    ink = ink.max((1.6 - d).clamp(0.0, 1.0));
                }
                let band =
                    0.5 * texture * (1.0 + (freq * (x as f64 * ct + y as f64 * st) + phase).sin());
                let noise = rng.random_range(0.0..0.05);
                samples[[y * side + x, j]] = quantize(band + amplitude * ink + noise);
            }
        }
    }
    LabeledDataset::new(samples, one_hot(CLASSES, &assignments), None).unwrap()
}

// ---------------------------------------------------------------------------
// Gratings (CIFAR-like)
// ---------------------------------------------------------------------------

/// `t` oriented-sinusoid RGB images; class `c` fixes the orientation to
/// `c·π/10` (with tiny jitter) while phase, wavelength, and channel
/// amplitudes vary per sample.
pub fn gratings(t: usize, seed: u64) -> LabeledDataset {
    let side = CIFAR_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((3 * side * side, t));
    let mut assignments = Vec::with_capacity(t);
    for j in 0..t {
        let class = j % CLASSES;
        assignments.push(class);
        let theta = class as f64 * std::f64::consts::PI / CLASSES as f64
            + rng.random_range(-0.05..0.05);
        let wavelength = rng.random_range(5.0..7.0);
        let freq = 2.0 * std::f64::consts::PI / wavelength;
        let phase = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
        let (ct, st) = (theta.cos(), theta.sin());
        let amplitudes: Vec<f64> = (0..3).map(|_| 0.35 * rng.random_range(0.85..1.15)).collect();
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let g = (freq * (x as f64 * ct + y as f64 * st) + phase).sin();
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
                    samples[[c * side * side + y * side + x, j]] =
                        quantize(0.5 + amplitudes[c] * g + noise);
                }
            }
        }
    }
    LabeledDataset::new(samples, one_hot(CLASSES, &assignments), None).unwrap()
}

// ---------------------------------------------------------------------------
// Mirror clusters (CIFAR-like, for supervision sweeps)
// ---------------------------------------------------------------------------

/// A smooth random 32×32 RGB pattern: a coarse Gaussian grid, bilinearly
/// upsampled, centered, and RMS-normalized.
fn smooth_pattern(rng: &mut ChaCha8Rng, grid: usize) -> Array3<f64> {
    let side = CIFAR_SIDE;
    let coarse: Vec<f64> =
        (0..3 * grid * grid).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut out = Array3::zeros((3, side, side));
    let scale = (grid - 1) as f64 / (side - 1) as f64;
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let (gy, gx) = (y as f64 * scale, x as f64 * scale);
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let at = |yy: usize, xx: usize| coarse[c * grid * grid + yy * grid + xx];
                out[[c, y, x]] = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x1) * (1.0 - fy) * fx
                    + at(y1, x0) * fy * (1.0 - fx)
                    + at(y1, x1) * fy * fx;
            }
        }
    }
    let mean = out.sum() / out.len() as f64;
    out -= mean;
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        out /= rms;
    }
    out
}

/// Sign-symmetric class clusters for supervision sweeps.
///
/// Each sample is `signal·(±μ_class) + nuisance·η_k + noise`, where the ten
/// `μ_c` and a shared pool of five `η_k` are unit-norm smooth patterns and
/// the sign and pool index are drawn per sample. The Gram matrix therefore
/// has same-class blocks of `±signal²` (split by the sign) and same-pool
/// blocks of `+nuisance²`. With `nuisance` somewhat above `signal` an
/// unsupervised similarity-matching code spends its units on the
/// class-irrelevant pool clusters; a label-similarity weight α comparable
/// to `signal²` redirects units toward the class directions while the
/// mirror sign still forces them to stay sign-selective (so they keep
/// firing without labels at test time); and α ≫ `signal²` favors
/// sign-invariant label prototypes whose input weights average the two
/// mirrored halves of each class to ~0 and go quiet once labels are
/// withheld.
pub fn mirror_clusters(t: usize, signal: f64, nuisance: f64, seed: u64) -> LabeledDataset {
    const POOL: usize = 5;
    let side = CIFAR_SIDE;
    let dim = 3 * side * side;
    let unit = |p: Array3<f64>| {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        p.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636C_6173_735F_6D75);
    let means: Vec<Vec<f64>> =
        (0..CLASSES).map(|_| unit(smooth_pattern(&mut class_rng, 4))).collect();
    let pool: Vec<Vec<f64>> =
        (0..POOL).map(|_| unit(smooth_pattern(&mut class_rng, 5))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((dim, t));
    let mut assignments = Vec::with_capacity(t);
    for j in 0..t {
        let class = j % CLASSES;
        assignments.push(class);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let eta = &pool[rng.random_range(0..POOL)];
        let mu = &means[class];
        for i in 0..dim {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
            samples[[i, j]] = signal * sign * mu[i] + nuisance * eta[i] + noise;
        }
    }
    LabeledDataset::new(samples, one_hot(CLASSES, &assignments), None).unwrap()
}

// ---------------------------------------------------------------------------
// Binary writers (inverse of the loaders)
// ---------------------------------------------------------------------------

/// Write a dataset of square grayscale images as an IDX image/label file
/// pair, byte-per-pixel.
pub fn write_idx_files(
    dir: &Path,
    prefix: &str,
    data: &LabeledDataset,
    side: usize,
) -> (PathBuf, PathBuf) {
    assert_eq!(data.dim(), side * side, "dataset is not {side}x{side} grayscale");
    let images_path = dir.join(format!("{prefix}-images.idx"));
    let labels_path = dir.join(format!("{prefix}-labels.idx"));

    let mut images = fs::File::create(&images_path).unwrap();
    images.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
    for dim in [data.len(), side, side] {
        images.write_all(&(dim as u32).to_be_bytes()).unwrap();
    }
    let mut labels = fs::File::create(&labels_path).unwrap();
    labels.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
    labels.write_all(&(data.len() as u32).to_be_bytes()).unwrap();

    for j in 0..data.len() {
        let bytes: Vec<u8> = data
            .samples
            .column(j)
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        images.write_all(&bytes).unwrap();
        labels.write_all(&[data.class_of(j) as u8]).unwrap();
    }
    (images_path, labels_path)
}

/// Write a dataset of 32×32 RGB images as one CIFAR-10 binary batch.
pub fn write_cifar_batch(path: &Path, data: &LabeledDataset) {
    assert_eq!(data.dim(), 3 * CIFAR_SIDE * CIFAR_SIDE, "dataset is not 32x32 RGB");
    let mut file = fs::File::create(path).unwrap();
    for j in 0..data.len() {
        file.write_all(&[data.class_of(j) as u8]).unwrap();
        let bytes: Vec<u8> = data
            .samples
            .column(j)
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        file.write_all(&bytes).unwrap();
    }
}

/// First `keep` samples as the training split, the rest as test.
pub fn split(data: &LabeledDataset, keep: usize) -> (LabeledDataset, LabeledDataset) {
    assert!(keep < data.len());
    let train: Vec<usize> = (0..keep).collect();
    let test: Vec<usize> = (keep..data.len()).collect();
    (data.subset(&train).unwrap(), data.subset(&test).unwrap())
}
