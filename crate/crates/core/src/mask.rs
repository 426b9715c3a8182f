//! Binary masks and their run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub bits: Vec<bool>,
}

/// Foreground runs over the row-major pixels: run `i` covers
/// `starts[i] .. starts[i] + lengths[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub starts: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::contract("mask", format!("{} bits for {height}x{width}", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Mask { height, width, bits }
    }

    /// Threshold probabilities at 0.5 (strictly above is foreground).
    pub fn from_probs(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| p > 0.5).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `(|A ∩ B|, |A ∪ B|)`.
    pub fn overlap(&self, other: &Mask) -> Result<(usize, usize)> {
        if !self.same_shape(other) {
            return Err(Error::shape("overlap", &[self.height, self.width], &[other.height, other.width]));
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn to_rle(&self) -> Rle {
        let mut starts = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for (i, &b) in self.bits.iter().enumerate() {
            if !b {
                continue;
            }
            match (starts.last(), lengths.last_mut()) {
                (Some(&s), Some(l)) if s + *l == i => *l += 1,
                _ => {
                    starts.push(i);
                    lengths.push(1);
                }
            }
        }
        Rle {
            height: self.height,
            width: self.width,
            starts,
            lengths,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let n = rle.height * rle.width;
        if rle.starts.len() != rle.lengths.len() {
            return Err(Error::format("rle", "starts and lengths differ in length"));
        }
        let mut bits = vec![false; n];
        let mut end = 0;
        for (&s, &l) in rle.starts.iter().zip(&rle.lengths) {
            if s < end || l == 0 || s + l > n {
                return Err(Error::format("rle", format!("run {s}+{l} out of order or out of {n} pixels")));
            }
            bits[s..s + l].iter_mut().for_each(|b| *b = true);
            end = s + l;
        }
        Mask::new(rle.height, rle.width, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_lists_foreground_runs() {
        let m = Mask::new(2, 3, vec![true, true, false, true, true, false]).unwrap();
        let r = m.to_rle();
        assert_eq!((r.starts, r.lengths), (vec![0, 3], vec![2, 2]));
        assert!(Mask::empty(2, 2).to_rle().starts.is_empty());
    }

    #[test]
    fn rle_rejects_bad_totals() {
        let rle = Rle {
            height: 2,
            width: 2,
            starts: vec![3],
            lengths: vec![2],
        };
        assert!(Mask::from_rle(&rle).is_err());
        let overlapping = Rle {
            height: 2,
            width: 2,
            starts: vec![0, 1],
            lengths: vec![2, 1],
        };
        assert!(Mask::from_rle(&overlapping).is_err());
    }

    proptest! {
        #[test]
        fn rle_roundtrip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let m = Mask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            prop_assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m);
        }
    }
}
