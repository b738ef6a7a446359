//! Similarity proxies between an original and an iterated generation.

use image::RgbaImage;
use pigment_core::scheduler::Latent;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("cannot compare {what}: {left:?} vs {right:?}")]
pub struct ShapeError {
    what: &'static str,
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Cosine similarity of two latents flattened in channel-major order,
/// accumulated in f64. Identical inputs give exactly 1. A zero latent is
/// similar only to another zero latent.
pub fn latent_cosine_similarity(a: &Latent, b: &Latent) -> Result<f64, ShapeError> {
    if a.shape() != b.shape() {
        let (x, y) = (a.shape(), b.shape());
        return Err(ShapeError {
            what: "latents",
            left: vec![x.0, x.1, x.2],
            right: vec![y.0, y.1, y.2],
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(if na == nb { 1.0 } else { 0.0 });
    }
    // sqrt(na * na) == na exactly, which keeps self-similarity at 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean squared difference of RGB channels scaled to `[0, 1]`. Alpha is
/// ignored.
pub fn pixel_mse(a: &RgbaImage, b: &RgbaImage) -> Result<f64, ShapeError> {
    if a.dimensions() != b.dimensions() {
        return Err(ShapeError {
            what: "images",
            left: vec![a.height() as usize, a.width() as usize],
            right: vec![b.height() as usize, b.width() as usize],
        });
    }
    let mut sum = 0.0f64;
    for (p, q) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let d = (f64::from(p.0[c]) - f64::from(q.0[c])) / 255.0;
            sum += d * d;
        }
    }
    let n = (a.width() as usize * a.height() as usize * 3).max(1);
    Ok(sum / n as f64)
}
