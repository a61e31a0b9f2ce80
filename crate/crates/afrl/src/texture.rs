//! Procedural textured test images.
//!
//! Sums seeded white-noise octaves blurred at decreasing scales and
//! modulates them with a large-scale contrast envelope, so sharpness
//! varies across the image the way it does in natural scenes. Output is
//! normalized to `[0.05, 0.95]` and snapped to the 8-bit grid so it
//! survives PGM round-trips bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{gaussian_blur, GrayImage};

fn noise_field(width: usize, height: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..width * height)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let img = GrayImage::from_pixels(width, height, noise).unwrap();
    gaussian_blur(&img, sigma).pixels().to_vec()
}

/// Deterministic textured image with structure at several spatial scales
/// and a spatially varying contrast envelope.
pub fn generate_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; width * height];
    let octaves: [(f64, f64); 4] = [(8.0, 0.4), (4.0, 0.3), (2.0, 0.2), (1.0, 0.1)];
    for &(sigma, weight) in &octaves {
        for (a, b) in acc.iter_mut().zip(noise_field(width, height, sigma, &mut rng)) {
            *a += weight * b;
        }
    }

    // Contrast envelope at sub-patch scale. Cubing the normalized field
    // pushes a fair share of the image towards near-flat contrast, where
    // focal metrics lose most of their signal.
    let envelope = noise_field(width, height, 8.0, &mut rng);
    let (elo, ehi) = envelope
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let espan = (ehi - elo).max(1e-12);
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    for (v, e) in acc.iter_mut().zip(&envelope) {
        let n = (e - elo) / espan;
        let c = 0.02 + 2.6 * n * n * n;
        *v = mean + (*v - mean) * c;
    }

    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for v in &mut acc {
        let n = 0.05 + 0.9 * (*v - lo) / span;
        *v = (n * 255.0).round() / 255.0;
    }
    GrayImage::from_pixels(width, height, acc).unwrap()
}
