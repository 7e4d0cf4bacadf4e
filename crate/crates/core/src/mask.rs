use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Binary segmentation mask, row-major, `height` rows of `width` pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} pixels, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn same_dims(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Class index per pixel (0 background, 1 object).
    pub fn labels(&self) -> Vec<usize> {
        self.bits.iter().map(|&b| b as usize).collect()
    }

    /// `[height, width, 1]` map of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 1],
            self.bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask dims")
    }

    /// Block majority downsampling: an output pixel is set when strictly
    /// more than half of its `factor x factor` block is set.
    pub fn downsample_majority(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor)
        {
            return Err(Error::Input(format!(
                "mask {}x{} not divisible by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let block = factor * factor;
        Ok(Mask::from_fn(w, h, |r, c| {
            let mut n = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    n += self.get(r * factor + dy, c * factor + dx) as usize;
                }
            }
            2 * n > block
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_needs_strictly_more_than_half() {
        // 4x4 block with 8 set pixels stays background, 9 turns object
        let mut m = Mask::from_fn(4, 4, |r, _| r < 2);
        assert!(!m.downsample_majority(4).unwrap().get(0, 0));
        m.set(2, 0, true);
        assert!(m.downsample_majority(4).unwrap().get(0, 0));
    }

    #[test]
    fn downsample_rejects_indivisible() {
        assert!(Mask::empty(6, 8).downsample_majority(4).is_err());
    }
}
