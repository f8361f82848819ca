//! Binary masks stored as one byte per pixel, row-major.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("mask data has {len} entries, expected {h}x{w}")]
    Size { h: usize, w: usize, len: usize },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: u8 },
    #[error("mask shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} fg)", self.h, self.w, self.count())
    }
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    /// Takes values in {0, 1}.
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self, MaskError> {
        if data.len() != h * w {
            return Err(MaskError::Size {
                h,
                w,
                len: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(MaskError::NonBinary { index, value });
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c) as u8);
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.h
            && (c as usize) < self.w
            && self.get(r as usize, c as usize)
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn check_same_shape(&self, other: &Mask) -> Result<(), MaskError> {
        if self.shape() != other.shape() {
            return Err(MaskError::ShapeMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        Ok(())
    }

    /// Pixel values as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Thresholds probabilities: foreground iff `p >= threshold`.
    pub fn from_probabilities(h: usize, w: usize, probs: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), h * w, "probability map size");
        Self {
            h,
            w,
            data: probs.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_data() {
        assert!(matches!(
            Mask::new(2, 2, vec![0, 1, 1]),
            Err(MaskError::Size { .. })
        ));
        assert_eq!(
            Mask::new(1, 3, vec![0, 7, 1]),
            Err(MaskError::NonBinary { index: 1, value: 7 })
        );
    }

    #[test]
    fn signed_access_is_background_outside() {
        let m = Mask::from_fn(3, 3, |_, _| true);
        assert!(m.get_signed(0, 0));
        assert!(!m.get_signed(-1, 0));
        assert!(!m.get_signed(0, 3));
        assert_eq!(m.count(), 9);
    }
}
