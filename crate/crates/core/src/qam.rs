//! Image-level quality assessment from calibration maps, and the routing of
//! each training sample to the primary or the auxiliary head.
//!
//! ```
//! use umanet::autodiff::Tensor;
//! use umanet::losses::CalibrationSet;
//! use umanet::qam::{route_sample, Route, Thresholds};
//!
//! let s = Tensor::full(&[2, 4, 4], 1.0);
//! let calib = CalibrationSet::from_maps(s).unwrap();
//! let verdict = route_sample(&calib, Thresholds::default()).unwrap();
//! assert_eq!(verdict.route, Route::HighQuality);
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::EPS;
use crate::losses::CalibrationSet;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QamError {
    #[error("agreement needs at least 2 calibration maps, got {0}")]
    TooFewSources(usize),
    #[error("threshold {name}={value} outside (0, 1]")]
    Threshold { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    HighQuality,
    LowQuality,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::HighQuality => "high",
            Route::LowQuality => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_a: f64,
    pub tau_b: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_a: 0.2,
            tau_b: 0.2,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), QamError> {
        for (name, value) in [("tau_a", self.tau_a), ("tau_b", self.tau_b)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(QamError::Threshold { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub u_a: f64,
    pub u_b: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub route: Route,
}

/// Entropy of the mean calibration map, normalised by its mass.
pub fn confidence_score(calib: &CalibrationSet) -> f64 {
    let mut entropy = 0.0;
    let mut mass = 0.0;
    for &s in calib.s_star.data() {
        if s > 0.0 {
            entropy -= s * s.ln();
        }
        mass += s;
    }
    entropy / mass.max(EPS)
}

/// `4M · Σ_i Var_m(s_i^m) / Σ_m Σ_i s_i^m`, with population variance.
pub fn agreement_score(calib: &CalibrationSet) -> Result<f64, QamError> {
    let m = calib.num_sources();
    if m < 2 {
        return Err(QamError::TooFewSources(m));
    }
    let s = calib.s.data();
    let n = s.len() / m;
    let mut var_sum = 0.0;
    for i in 0..n {
        let mean = (0..m).map(|k| s[k * n + i]).sum::<f64>() / m as f64;
        var_sum += (0..m).map(|k| (s[k * n + i] - mean).powi(2)).sum::<f64>() / m as f64;
    }
    let mass: f64 = s.iter().sum();
    Ok(4.0 * m as f64 * var_sum / mass.max(EPS))
}

/// High quality iff both scores fall strictly below their thresholds.
pub fn route_scores(u_a: f64, u_b: f64, thresholds: Thresholds) -> Route {
    if u_a < thresholds.tau_a && u_b < thresholds.tau_b {
        Route::HighQuality
    } else {
        Route::LowQuality
    }
}

pub fn route_sample(
    calib: &CalibrationSet,
    thresholds: Thresholds,
) -> Result<QualityVerdict, QamError> {
    thresholds.validate()?;
    let u_a = confidence_score(calib);
    let u_b = agreement_score(calib)?;
    Ok(QualityVerdict {
        u_a,
        u_b,
        tau_a: thresholds.tau_a,
        tau_b: thresholds.tau_b,
        route: route_scores(u_a, u_b, thresholds),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;

    const H: usize = 32;
    const W: usize = 32;

    fn calib(maps: &[Vec<f64>]) -> CalibrationSet {
        let data = maps.iter().flatten().copied().collect();
        CalibrationSet::from_maps(Tensor::new(vec![maps.len(), H, W], data).unwrap()).unwrap()
    }

    fn constant(v: f64) -> Vec<f64> {
        vec![v; H * W]
    }

    #[test]
    fn confidence_examples() {
        let certain: Vec<f64> = (0..H * W)
            .map(|i| ((i * 7) % 3 == 0) as u8 as f64)
            .collect();
        assert_eq!(confidence_score(&calib(&[certain.clone(), certain])), 0.0);

        let u = confidence_score(&calib(&[constant(0.5), constant(0.5)]));
        assert!((u - std::f64::consts::LN_2).abs() <= 1e-9, "{u}");

        let half: Vec<f64> = (0..H * W).map(|i| (i < H * W / 2) as u8 as f64).collect();
        assert_eq!(confidence_score(&calib(&[half.clone(), half])), 0.0);

        assert_eq!(
            confidence_score(&calib(&[constant(0.0), constant(0.0)])),
            0.0
        );
    }

    #[test]
    fn agreement_examples() {
        let mixed: Vec<f64> = (0..H * W).map(|i| (i % 5) as f64 / 4.0).collect();
        let same = calib(&[mixed.clone(), mixed.clone(), mixed]);
        assert_eq!(agreement_score(&same).unwrap(), 0.0);

        let u = agreement_score(&calib(&[constant(1.0), constant(0.0)])).unwrap();
        assert!((u - 2.0).abs() <= 1e-9, "{u}");

        assert_eq!(
            agreement_score(&calib(&[constant(1.0), constant(1.0)])).unwrap(),
            0.0
        );
    }

    #[test]
    fn half_disagreement_case() {
        let half: Vec<f64> = (0..H * W).map(|i| (i >= H * W / 2) as u8 as f64).collect();
        let u = agreement_score(&calib(&[constant(1.0), half])).unwrap();
        // 8 · (0.25 · N/2) / (1.5 N)
        assert!((u - 2.0 / 3.0).abs() <= 1e-12, "{u}");
    }

    #[test]
    fn single_map_is_rejected() {
        assert_eq!(
            agreement_score(&calib(&[constant(0.3)])),
            Err(QamError::TooFewSources(1))
        );
    }

    #[test]
    fn routing_examples() {
        let t = Thresholds::default();
        assert_eq!(route_scores(0.0, 0.0, t), Route::HighQuality);
        assert_eq!(route_scores(0.69, 0.0, t), Route::LowQuality);
        assert_eq!(route_scores(0.0, 2.0, t), Route::LowQuality);

        let v = route_sample(&calib(&[constant(0.5), constant(0.5)]), t).unwrap();
        assert_eq!(v.route, Route::LowQuality);
        let v = route_sample(&calib(&[constant(1.0), constant(0.0)]), t).unwrap();
        assert_eq!(v.route, Route::LowQuality);
        let v = route_sample(&calib(&[constant(1.0), constant(1.0)]), t).unwrap();
        assert_eq!((v.u_a, v.u_b, v.route), (0.0, 0.0, Route::HighQuality));
    }

    #[test]
    fn routing_truth_table() {
        let t = Thresholds {
            tau_a: 0.3,
            tau_b: 0.5,
        };
        let cases = [
            (0.1, 0.1, Route::HighQuality),
            (0.3, 0.1, Route::LowQuality),
            (0.1, 0.5, Route::LowQuality),
            (0.3, 0.5, Route::LowQuality),
            (0.299_999, 0.499_999, Route::HighQuality),
            (0.9, 0.9, Route::LowQuality),
        ];
        for (a, b, want) in cases {
            assert_eq!(route_scores(a, b, t), want, "u_a={a} u_b={b}");
        }
    }

    #[test]
    fn thresholds_are_validated() {
        let c = calib(&[constant(1.0), constant(1.0)]);
        for (a, b) in [(0.0, 0.2), (0.2, 1.5), (f64::NAN, 0.2)] {
            let t = Thresholds { tau_a: a, tau_b: b };
            assert!(route_sample(&c, t).is_err());
        }
        assert!(route_sample(
            &c,
            Thresholds {
                tau_a: 1.0,
                tau_b: 1.0
            }
        )
        .is_ok());
    }

    fn maps_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..5).prop_flat_map(|m| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 16), m)
        })
    }

    fn small(maps: &[Vec<f64>]) -> CalibrationSet {
        let data = maps.iter().flatten().copied().collect();
        CalibrationSet::from_maps(Tensor::new(vec![maps.len(), 4, 4], data).unwrap()).unwrap()
    }

    proptest! {
        #[test]
        fn scores_nonnegative_and_deterministic(maps in maps_strategy()) {
            let c = small(&maps);
            let a = route_sample(&c, Thresholds::default()).unwrap();
            let b = route_sample(&c, Thresholds::default()).unwrap();
            prop_assert!(a.u_a >= 0.0 && a.u_b >= 0.0);
            prop_assert_eq!(a.u_a.to_bits(), b.u_a.to_bits());
            prop_assert_eq!(a.u_b.to_bits(), b.u_b.to_bits());
            prop_assert_eq!(a.route, b.route);
        }

        #[test]
        fn identical_maps_agree(first in proptest::collection::vec(0.0f64..=1.0, 16), m in 2usize..5) {
            let maps = vec![first; m];
            prop_assert!(agreement_score(&small(&maps)).unwrap() <= 1e-12);
        }

        #[test]
        fn binary_mean_map_is_fully_confident(bits in proptest::collection::vec(any::<bool>(), 16)) {
            let map: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            prop_assert_eq!(confidence_score(&small(&[map.clone(), map])), 0.0);
        }
    }
}
