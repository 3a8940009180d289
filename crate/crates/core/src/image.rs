//! Grayscale image grids written as binary PGM (`P5`, 8-bit).

use std::path::Path;

use crate::data::to_byte;
use crate::error::{Error, Result};

/// A `rows × cols` tiling of equally sized images, no gutters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major bytes of the whole grid, `round(255·v)`.
    pub pixels: Vec<u8>,
}

impl ImageGrid {
    /// Tiles `images` row by row. Values are clamped to `[0, 1]`.
    pub fn from_images(images: &[Vec<f64>], rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if images.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{} images for a {rows}×{cols} grid",
                images.len()
            )));
        }
        if let Some(bad) = images.iter().find(|im| im.len() != height * width) {
            return Err(Error::shape("ImageGrid", &[height * width], &[bad.len()]));
        }
        let (gh, gw) = (rows * height, cols * width);
        let mut pixels = vec![0u8; gh * gw];
        for (k, img) in images.iter().enumerate() {
            let (gr, gc) = (k / cols, k % cols);
            for r in 0..height {
                let dst = (gr * height + r) * gw + gc * width;
                for (d, &v) in pixels[dst..dst + width].iter_mut().zip(&img[r * width..(r + 1) * width]) {
                    *d = to_byte(v);
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            height,
            width,
            pixels,
        })
    }

    pub fn pixel_height(&self) -> usize {
        self.rows * self.height
    }

    pub fn pixel_width(&self) -> usize {
        self.cols * self.width
    }

    /// Bytes of the tile at grid position `(r, c)`.
    pub fn tile(&self, r: usize, c: usize) -> Vec<u8> {
        let gw = self.pixel_width();
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            let start = (r * self.height + y) * gw + c * self.width;
            out.extend_from_slice(&self.pixels[start..start + self.width]);
        }
        out
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.pixel_width(), self.pixel_height()).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}
