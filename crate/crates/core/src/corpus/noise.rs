//! Simulated annotation noise applied to clean masks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::morph::{components, dilate, erode, trace_contour};
use super::CorpusError;
use crate::mask::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseKind {
    ErodeDilate,
    ConstantShift,
    SquareReverse,
    Polygonize,
    RandomErase,
}

impl NoiseKind {
    /// Source `m` of a corpus carries `ALL[m]`.
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::ErodeDilate,
        NoiseKind::ConstantShift,
        NoiseKind::SquareReverse,
        NoiseKind::Polygonize,
        NoiseKind::RandomErase,
    ];

    /// Inclusive magnitude range: disc radius, shift in pixels, square side,
    /// boundary point count, erase probability.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            NoiseKind::ErodeDilate => (0.0, 6.0),
            NoiseKind::ConstantShift => (0.0, 6.0),
            NoiseKind::SquareReverse => (0.0, 24.0),
            NoiseKind::Polygonize => (3.0, 48.0),
            NoiseKind::RandomErase => (0.0, 1.0),
        }
    }

    /// Maps a severity in `[0, 1]` to a magnitude; severity 0 is the mildest
    /// setting. For `Polygonize` fewer points is more severe.
    pub fn magnitude_at(self, severity: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let s = severity.clamp(0.0, 1.0);
        match self {
            NoiseKind::Polygonize => hi - s * (hi - lo),
            _ => lo + s * (hi - lo),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::ErodeDilate => "erode-dilate",
            NoiseKind::ConstantShift => "constant-shift",
            NoiseKind::SquareReverse => "square-reverse",
            NoiseKind::Polygonize => "polygonize",
            NoiseKind::RandomErase => "random-erase",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorpusError::UnknownNoiseKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (lo, hi) = self.kind.bounds();
        if !(lo..=hi).contains(&self.magnitude) {
            return Err(CorpusError::Magnitude {
                kind: self.kind,
                magnitude: self.magnitude,
                lo,
                hi,
            });
        }
        Ok(())
    }
}

/// `floor(x)` plus one with probability `frac(x)`, decided by `u ∈ [0,1)`.
/// Fractional magnitudes therefore interpolate between neighbouring integers.
pub fn stochastic_round(x: f64, u: f64) -> usize {
    let base = x.floor();
    base as usize + usize::from(u < x - base)
}

pub fn apply_noise(mask: &Mask, spec: &NoiseSpec) -> Result<Mask, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = mask.shape();
    Ok(match spec.kind {
        NoiseKind::ErodeDilate => {
            let grow = rng.random_bool(0.5);
            let r = stochastic_round(spec.magnitude, rng.random());
            if grow {
                dilate(mask, r)
            } else {
                erode(mask, r)
            }
        }
        NoiseKind::ConstantShift => {
            let d = stochastic_round(spec.magnitude, rng.random());
            shift_right(mask, d)
        }
        NoiseKind::SquareReverse => {
            let side = stochastic_round(spec.magnitude, rng.random()).min(h).min(w);
            let (ur, uc): (f64, f64) = (rng.random(), rng.random());
            let r0 = ((ur * (h - side + 1) as f64) as usize).min(h - side);
            let c0 = ((uc * (w - side + 1) as f64) as usize).min(w - side);
            let mut out = mask.clone();
            for r in r0..r0 + side {
                for c in c0..c0 + side {
                    out.set(r, c, !mask.get(r, c));
                }
            }
            out
        }
        NoiseKind::Polygonize => {
            let k = stochastic_round(spec.magnitude, rng.random());
            polygonize(mask, k, &mut rng)
        }
        NoiseKind::RandomErase => {
            let event: f64 = rng.random();
            let comps = components(mask);
            let mut out = mask.clone();
            if !comps.is_empty() {
                let pick = rng.random_range(0..comps.len());
                if event < spec.magnitude {
                    for &(r, c) in &comps[pick] {
                        out.set(r, c, false);
                    }
                }
            }
            out
        }
    })
}

pub fn shift_right(mask: &Mask, d: usize) -> Mask {
    Mask::from_fn(mask.height(), mask.width(), |r, c| {
        c >= d && mask.get(r, c - d)
    })
}

/// Samples points in contour order, outward by half a pixel from the component
/// centroid so that a polygon through them covers the boundary pixels.
fn boundary_points(
    contour: &[(usize, usize)],
    pixels: &[(usize, usize)],
    k: usize,
    rng: &mut impl Rng,
) -> Vec<(f64, f64)> {
    let n = pixels.len() as f64;
    let cy = pixels.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
    let cx = pixels.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
    let mut picks = index::sample(rng, contour.len(), k.min(contour.len())).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|i| {
            let (y, x) = (contour[i].0 as f64 + 0.5, contour[i].1 as f64 + 0.5);
            let (dy, dx) = (y - cy, x - cx);
            let len = (dy * dy + dx * dx).sqrt();
            if len > 0.0 {
                (y + 0.5 * dy / len, x + 0.5 * dx / len)
            } else {
                (y, x)
            }
        })
        .collect()
}

const SPLINE_STEPS: usize = 8;

/// Closed uniform Catmull-Rom curve through `pts`, as a dense polygon.
pub fn catmull_rom_closed(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let n = pts.len();
    let mut out = Vec::with_capacity(n * SPLINE_STEPS);
    for i in 0..n {
        let p0 = pts[(i + n - 1) % n];
        let p1 = pts[i];
        let p2 = pts[(i + 1) % n];
        let p3 = pts[(i + 2) % n];
        for s in 0..SPLINE_STEPS {
            let t = s as f64 / SPLINE_STEPS as f64;
            let (t2, t3) = (t * t, t * t * t);
            let f = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b
                    + (-a + c) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (-a + 3.0 * b - 3.0 * c + d) * t3)
            };
            out.push((f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1)));
        }
    }
    out
}

/// Even-odd scanline fill at pixel centres; points are `(y, x)`.
pub fn fill_polygon(out: &mut Mask, poly: &[(f64, f64)]) {
    let n = poly.len();
    if n < 3 {
        return;
    }
    let mut xs = Vec::new();
    for r in 0..out.height() {
        let y = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            if (a.0 <= y) != (b.0 <= y) {
                xs.push(a.1 + (y - a.0) * (b.1 - a.1) / (b.0 - a.0));
            }
        }
        xs.sort_by(|p, q| p.total_cmp(q));
        for pair in xs.chunks_exact(2) {
            let first = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let last = (pair[1] - 0.5).floor();
            if last < 0.0 {
                continue;
            }
            let last = (last as usize).min(out.width() - 1);
            for c in first..=last {
                out.set(r, c, true);
            }
        }
    }
}

fn polygonize(mask: &Mask, k: usize, rng: &mut impl Rng) -> Mask {
    let mut out = Mask::zeros(mask.height(), mask.width());
    for comp in components(mask) {
        let contour = trace_contour(mask, comp[0]);
        if contour.len() < 3 || k < 3 {
            for &(r, c) in &comp {
                out.set(r, c, true);
            }
            continue;
        }
        let pts = boundary_points(&contour, &comp, k, rng);
        fill_polygon(&mut out, &catmull_rom_closed(&pts));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    fn spec(kind: NoiseKind, magnitude: f64, seed: u64) -> NoiseSpec {
        NoiseSpec {
            kind,
            magnitude,
            seed,
        }
    }

    fn disc_mask(h: usize, w: usize, cy: f64, cx: f64, radius: f64) -> Mask {
        Mask::from_fn(h, w, |r, c| {
            let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            y * y + x * x <= radius * radius
        })
    }

    fn two_discs() -> Mask {
        let a = disc_mask(32, 32, 16.0, 9.0, 5.0);
        let b = disc_mask(32, 32, 16.0, 23.0, 5.0);
        Mask::from_fn(32, 32, |r, c| a.get(r, c) || b.get(r, c))
    }

    #[test]
    fn erode_dilate_radius_zero_is_identity() {
        let m = two_discs();
        for seed in 0..10 {
            assert_eq!(
                apply_noise(&m, &spec(NoiseKind::ErodeDilate, 0.0, seed)).unwrap(),
                m
            );
        }
    }

    #[test]
    fn shift_moves_single_pixel() {
        let m = Mask::from_fn(20, 20, |r, c| (r, c) == (10, 10));
        let out = apply_noise(&m, &spec(NoiseKind::ConstantShift, 3.0, 0)).unwrap();
        assert_eq!(out.count(), 1);
        assert!(out.get(10, 13));
        let gone = shift_right(&m, 10);
        assert!(gone.is_empty());
    }

    #[test]
    fn square_reverse_on_empty_mask_counts_side_squared() {
        let m = Mask::zeros(32, 32);
        for side in [1.0, 5.0, 12.0] {
            for seed in 0..5 {
                let out = apply_noise(&m, &spec(NoiseKind::SquareReverse, side, seed)).unwrap();
                assert_eq!(out.count(), (side * side) as usize);
            }
        }
    }

    #[test]
    fn random_erase_extremes() {
        let m = two_discs();
        for seed in 0..10 {
            assert_eq!(
                apply_noise(&m, &spec(NoiseKind::RandomErase, 0.0, seed)).unwrap(),
                m
            );
            let out = apply_noise(&m, &spec(NoiseKind::RandomErase, 1.0, seed)).unwrap();
            assert_eq!(components(&out).len(), 1);
        }
        let single = disc_mask(32, 32, 16.0, 16.0, 6.0);
        assert!(apply_noise(&single, &spec(NoiseKind::RandomErase, 1.0, 3))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn polygonize_keeps_rough_shape() {
        let m = two_discs();
        let fine = apply_noise(&m, &spec(NoiseKind::Polygonize, 48.0, 1)).unwrap();
        assert!(
            dice(&fine, &m).unwrap() > 0.9,
            "{}",
            dice(&fine, &m).unwrap()
        );
        let coarse = apply_noise(&m, &spec(NoiseKind::Polygonize, 3.0, 1)).unwrap();
        assert!(dice(&coarse, &m).unwrap() < dice(&fine, &m).unwrap());
    }

    #[test]
    fn spline_passes_through_control_points() {
        let pts = [(0.0, 0.0), (0.0, 4.0), (4.0, 4.0), (4.0, 0.0)];
        let curve = catmull_rom_closed(&pts);
        for (i, p) in pts.iter().enumerate() {
            let q = curve[i * SPLINE_STEPS];
            assert!((q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12);
        }
    }

    #[test]
    fn scanline_fills_rectangle() {
        let mut m = Mask::zeros(8, 8);
        fill_polygon(&mut m, &[(1.0, 2.0), (1.0, 6.0), (4.0, 6.0), (4.0, 2.0)]);
        assert_eq!(m.count(), 12);
        assert!(m.get(1, 2) && m.get(3, 5) && !m.get(4, 2) && !m.get(1, 6));
    }

    #[test]
    fn rejects_out_of_bounds_magnitude() {
        let m = two_discs();
        assert!(apply_noise(&m, &spec(NoiseKind::Polygonize, 2.0, 0)).is_err());
        assert!(apply_noise(&m, &spec(NoiseKind::RandomErase, 1.5, 0)).is_err());
        assert!(apply_noise(&m, &spec(NoiseKind::ConstantShift, f64::NAN, 0)).is_err());
        assert!("blur".parse::<NoiseKind>().is_err());
        assert_eq!(
            "polygonize".parse::<NoiseKind>().unwrap(),
            NoiseKind::Polygonize
        );
    }

    #[test]
    fn stochastic_rounding() {
        assert_eq!(stochastic_round(2.0, 0.0), 2);
        assert_eq!(stochastic_round(2.25, 0.2), 3);
        assert_eq!(stochastic_round(2.25, 0.3), 2);
    }

    #[test]
    fn deterministic_and_binary() {
        let m = two_discs();
        for kind in NoiseKind::ALL {
            let s = spec(kind, kind.magnitude_at(0.6), 42);
            let a = apply_noise(&m, &s).unwrap();
            let b = apply_noise(&m, &s).unwrap();
            assert_eq!(a, b, "{kind}");
            assert_eq!(a.shape(), m.shape());
            assert!(a.data().iter().all(|&v| v <= 1));
        }
    }

    /// Mean Dice over seeds does not rise as the magnitude grows.
    #[test]
    fn dice_nonincreasing_in_magnitude() {
        let masks: Vec<Mask> = crate::corpus::generate_clean(6, 32, 32, 21)
            .unwrap()
            .into_iter()
            .map(|(_, m)| m)
            .chain([two_discs()])
            .collect();
        for kind in [NoiseKind::ErodeDilate, NoiseKind::ConstantShift] {
            for m in &masks {
                let mut prev = f64::INFINITY;
                for step in 0..=12 {
                    let mag = kind.magnitude_at(step as f64 / 12.0);
                    let mean = (0..50)
                        .map(|seed| {
                            dice(&apply_noise(m, &spec(kind, mag, seed)).unwrap(), m).unwrap()
                        })
                        .sum::<f64>()
                        / 50.0;
                    assert!(mean <= prev + 1e-12, "{kind} at {mag}: {mean} > {prev}");
                    prev = mean;
                }
            }
        }
    }
}
