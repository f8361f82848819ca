//! Synthetic images of one or two smooth blobs with soft intensity edges.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::morph::components;
use super::GrayImage;
use crate::mask::Mask;

const MIN_FRACTION: f64 = 0.05;
const MAX_FRACTION: f64 = 0.5;
const MAX_ATTEMPTS: usize = 1000;

/// A star-shaped blob: radius as a low-order Fourier series of the angle.
struct Blob {
    cy: f64,
    cx: f64,
    /// vertical stretch applied before evaluating the radius
    aspect: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(rng: &mut impl Rng, cy: f64, cx: f64, radius: f64) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for (k, hm) in harmonics.iter_mut().enumerate() {
            let amp = rng.random_range(0.0..0.12 / (k + 1) as f64);
            *hm = (amp, rng.random_range(0.0..2.0 * PI));
        }
        Self {
            cy,
            cx,
            aspect: rng.random_range(1.1..1.5),
            radius,
            harmonics,
        }
    }

    /// Signed radial margin of pixel centre `(y, x)`: positive inside.
    fn margin(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.aspect;
        let dx = x - self.cx;
        let theta = dy.atan2(dx);
        let rho = (dy * dy + dx * dx).sqrt();
        let r = self.radius
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, phase))| a * ((k + 2) as f64 * theta + phase).cos())
                    .sum::<f64>());
        r - rho
    }
}

fn layout(rng: &mut impl Rng, h: usize, w: usize) -> Vec<Blob> {
    let (hf, wf) = (h as f64, w as f64);
    let two = rng.random_bool(0.7);
    let cy = hf * rng.random_range(0.42..0.58);
    if two {
        let gap = wf * rng.random_range(0.22..0.28);
        let r = wf * rng.random_range(0.12..0.2);
        let (dy0, dy1) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let r1 = r * rng.random_range(0.85..1.15);
        let left = Blob::random(rng, cy + dy0, wf / 2.0 - gap, r);
        let right = Blob::random(rng, cy + dy1, wf / 2.0 + gap, r1);
        vec![left, right]
    } else {
        let cx = wf * rng.random_range(0.4..0.6);
        let r = wf * rng.random_range(0.18..0.3);
        vec![Blob::random(rng, cy, cx, r)]
    }
}

/// Draws blobs until the mask has an admissible foreground fraction and one
/// component per blob, then renders the image.
pub(crate) fn sample_clean(rng: &mut impl Rng, h: usize, w: usize) -> (GrayImage, Mask) {
    for _ in 0..MAX_ATTEMPTS {
        let blobs = layout(rng, h, w);
        let mut margins = vec![f64::NEG_INFINITY; h * w];
        for r in 0..h {
            for c in 0..w {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                margins[r * w + c] = blobs
                    .iter()
                    .map(|b| b.margin(y, x))
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let mask = Mask::from_fn(h, w, |r, c| margins[r * w + c] > 0.0);
        let frac = mask.foreground_fraction();
        if !(MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
            continue;
        }
        if components(&mask).len() != blobs.len() {
            continue;
        }
        return (render(rng, h, w, &margins), mask);
    }
    panic!("blob sampler failed for {h}x{w}; extents too small for the fraction bounds");
}

/// Background gradient and texture plus a bright interior with soft edges.
fn render(rng: &mut impl Rng, h: usize, w: usize, margins: &[f64]) -> GrayImage {
    let noise = Normal::new(0.0, 0.05).expect("valid deviation");
    let base = rng.random_range(0.15..0.3);
    let tilt = rng.random_range(-0.1..0.1);
    let contrast = rng.random_range(0.35..0.5);
    let softness = rng.random_range(0.6..1.2);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let ramp = tilt * (r as f64 / h as f64 - 0.5);
            let m = margins[r * w + c];
            let edge = 1.0 / (1.0 + (-m / softness).exp());
            // interior brightness rises away from the edge
            let depth = (m.max(0.0) / 6.0).min(1.0) * 0.1;
            let v = base + ramp + contrast * edge + depth + noise.sample(rng);
            data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    GrayImage::new(h, w, data).expect("rendered size")
}
