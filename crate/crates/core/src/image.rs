//! Dense RGB image buffer shared by the scene renderer and the visual
//! encoder. Values are stored row-major, channels innermost (HWC), each in
//! `[0, 1]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * CHANNELS],
        }
    }

    /// Wrap an existing HWC buffer; `data.len()` must equal `w*h*3`.
    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * CHANNELS {
            return Err(Error::ImageDims {
                expected: width * height * CHANNELS,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(x, y, c, v);
        }
    }

    /// Flat HWC view, the storage layout used in image containers.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Fill an axis-aligned rectangle given in pixel coordinates. The
    /// rectangle is clamped to the image bounds.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [f64; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set_pixel(x, y, rgb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip() {
        let mut img = ImageBuf::new(4, 3);
        img.set_pixel(2, 1, [0.1, 0.5, 0.9]);
        assert_eq!(img.get(2, 1, 0), 0.1);
        assert_eq!(img.get(2, 1, 1), 0.5);
        assert_eq!(img.get(2, 1, 2), 0.9);
        assert_eq!(img.get(0, 0, 0), 0.0);
    }

    #[test]
    fn data_length_is_checked() {
        assert!(ImageBuf::from_data(2, 2, vec![0.0; 11]).is_err());
        assert!(ImageBuf::from_data(2, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn fill_rect_clamps_to_bounds() {
        let mut img = ImageBuf::new(3, 3);
        img.fill_rect(1, 1, 10, 10, [1.0, 1.0, 1.0]);
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(2, 2, 0), 1.0);
        assert_eq!(img.get(1, 2, 2), 1.0);
    }
}
