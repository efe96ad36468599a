//! Procedural texture datasets.
//!
//! Every image is normalized to the same global mean and standard deviation,
//! so only spatial structure separates the classes.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Label, Sample};
use crate::config::TaskKind;
use crate::error::{Error, Result};
use crate::patch::ImageTensor;
use crate::rng::RngKey;

pub const MAX_SYNTH_CLASSES: usize = 4;
const TARGET_MEAN: f64 = 0.5;
const TARGET_STD: f64 = 0.12;

fn normalize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = if std > 0.0 { TARGET_STD / std } else { 0.0 };
    for v in field.iter_mut() {
        *v = TARGET_MEAN + (*v - mean) * s;
    }
}

fn box_blur(field: &[f64], size: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, size as isize - 1) as usize;
        let c = c.clamp(0, size as isize - 1) as usize;
        field[r * size + c]
    };
    let mut out = vec![0.0; field.len()];
    for r in 0..size as isize {
        for c in 0..size as isize {
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    s += at(r + dr, c + dc);
                }
            }
            out[r as usize * size + c as usize] = s / 9.0;
        }
    }
    out
}

fn noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    (0..size * size).map(|_| rng.sample(StandardNormal)).collect()
}

fn stripes(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let theta = rng.gen_range(0.0..PI);
    let period = rng.gen_range(4.0..8.0);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let (ct, st) = (theta.cos(), theta.sin());
    (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            (2.0 * PI * (c * ct + r * st) / period + phase).sin()
        })
        .collect()
}

fn smoothed_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    box_blur(&box_blur(&noise(rng, size), size), size)
}

fn checkerboard(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let cell = rng.gen_range(3..=6);
    let (dr, dc) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
    (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size + dr) / cell, (i % size + dc) / cell);
            if (r + c) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

fn blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let count = (size * size / 16).max(1);
    let centers: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64)))
        .collect();
    (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            centers
                .iter()
                .map(|&(y, x)| (-((r - y).powi(2) + (c - x).powi(2)) / (2.0 * 1.5 * 1.5)).exp())
                .sum()
        })
        .collect()
}

/// Normalized gray field to a 3-channel sample with per-channel contrast
/// gains drawn identically for every class.
fn colorize(rng: &mut ChaCha8Rng, mut field: Vec<f64>, size: usize) -> ImageTensor {
    normalize(&mut field);
    let mut img = ImageTensor::zeros(1, 1, 3, size, size);
    for c in 0..3 {
        let gain = rng.gen_range(0.9..1.1);
        for (dst, &v) in img.plane_mut(0, 0, c).iter_mut().zip(&field) {
            *dst = (TARGET_MEAN + gain * (v - TARGET_MEAN)).clamp(0.0, 1.0);
        }
    }
    img
}

fn assemble(
    per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
    stream: &str,
    draw: impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<Dataset> {
    if size < 3 {
        return Err(Error::UndersizedImage {
            height: size,
            width: size,
        });
    }
    let key = RngKey::new(seed).stream(stream);
    let mut samples = Vec::with_capacity(per_class * classes);
    for i in 0..per_class {
        for class in 0..classes {
            let mut rng = key.child((i * classes + class) as u64).rng();
            let field = draw(class, &mut rng);
            samples.push(Sample {
                image: colorize(&mut rng, field, size),
                label: Label::Class(class),
                path: None,
            });
        }
    }
    Dataset::new(samples, classes, TaskKind::Multiclass)
}

/// Texture-classification data: class 0 oriented stripes, 1 smoothed noise,
/// 2 checkerboards, 3 Gaussian blobs. Samples interleave classes.
pub fn generate_synthetic(per_class: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_SYNTH_CLASSES).contains(&classes) {
        return Err(Error::Config(format!(
            "synthetic textures support 2..={MAX_SYNTH_CLASSES} classes, got {classes}"
        )));
    }
    assemble(per_class, classes, size, seed, "textures", |class, rng| match class {
        0 => stripes(rng, size),
        1 => smoothed_noise(rng, size),
        2 => checkerboard(rng, size),
        _ => blobs(rng, size),
    })
}

/// Manipulation-detection analogue: class 0 is raw noise texture, class 1
/// the same kind of texture with a random half-size square smoothed.
pub fn generate_deepfake_style(per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    assemble(per_class, 2, size, seed, "deepfake", |class, rng| {
        let raw = box_blur(&noise(rng, size), size);
        if class == 0 {
            return raw;
        }
        let side = (size / 2).max(1);
        let (r0, c0) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
        let smooth = box_blur(&box_blur(&raw, size), size);
        let mut out = raw;
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                out[r * size + c] = smooth[r * size + c];
            }
        }
        out
    })
}
