//! Per-pixel `u8` grids: instance-id maps, binary masks and loss targets.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} label map with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }

    /// Top-left `height`×`width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::shape(format!("cannot crop {}x{} to {height}x{width}", self.height, self.width)));
        }
        let data = (0..height).flat_map(|r| self.data[r * self.width..r * self.width + width].iter().copied()).collect();
        Self::new(height, width, data)
    }
}
