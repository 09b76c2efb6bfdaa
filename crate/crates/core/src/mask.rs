use crate::error::{shape_err, Error, Result};

/// A binary `height × width` mask, row-major, values 0 or 1 (1 = water).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err!("mask of {width}x{height} needs {} values, got {}", width * height, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, data })
    }

    /// Binarizes 8-bit gray levels: `>= 128` is water.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        Self::new(width, height, gray.iter().map(|&v| u8::from(v >= 128)).collect())
    }

    /// Marks entries `>= threshold` as water.
    pub fn from_scores<S: Copy + Into<f64>>(width: usize, height: usize, scores: &[S], threshold: f64) -> Result<Self> {
        Self::new(width, height, scores.iter().map(|&s| u8::from(s.into() >= threshold)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// 0 / 255 gray levels.
    pub fn to_gray(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }

    pub fn same_shape(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(shape_err!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }
}
