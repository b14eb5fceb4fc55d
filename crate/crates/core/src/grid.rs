//! Dense row-major numeric arrays.
//!
//! `Grid2D` stores `rows x cols x channels` values channel-interleaved, so
//! the flat index of `(row, col, ch)` is `(row * cols + col) * channels + ch`.
//! Images hold intensities in [0, 1]; gradients and feature maps reuse the
//! same container.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Policy for reads outside the stored extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    /// Out-of-bounds reads return 0 and receive no gradient.
    ZeroPad,
    /// Out-of-bounds indices are clamped to the nearest valid pixel.
    Clamp,
}

impl Grid2D {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Grid2D {
            rows,
            cols,
            channels,
            data: vec![0.0; rows * cols * channels],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch {
                context: "Grid2D::from_vec",
                expected: (rows, cols, channels),
                got: (data.len(), 1, 1),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Grid2D::from_vec",
            });
        }
        Ok(Grid2D {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn flat_index(&self, row: usize, col: usize, ch: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols && ch < self.channels);
        (row * self.cols + col) * self.channels + ch
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    #[inline]
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        let ch = idx % self.channels;
        let rest = idx / self.channels;
        (rest / self.cols, rest % self.cols, ch)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.flat_index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let idx = self.flat_index(row, col, ch);
        self.data[idx] = value;
    }

    #[inline]
    pub fn add_at(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let idx = self.flat_index(row, col, ch);
        self.data[idx] += value;
    }

    /// Border-aware read at possibly out-of-range signed indices.
    pub fn get_bordered(&self, row: i64, col: i64, ch: usize, mode: BorderMode) -> Result<f64> {
        if ch >= self.channels {
            return Err(Error::ChannelOutOfRange {
                ch,
                channels: self.channels,
            });
        }
        let inside =
            row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols;
        match mode {
            BorderMode::ZeroPad => Ok(if inside {
                self.get(row as usize, col as usize, ch)
            } else {
                0.0
            }),
            BorderMode::Clamp => {
                let r = row.clamp(0, self.rows as i64 - 1) as usize;
                let c = col.clamp(0, self.cols as i64 - 1) as usize;
                Ok(self.get(r, c, ch))
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fills every channel of pixel (row, col) with `color`. Pixels outside
    /// the grid are ignored, which lets callers paint shapes that extend
    /// past the canvas.
    pub fn paint(&mut self, row: i64, col: i64, color: &[f64]) {
        debug_assert_eq!(color.len(), self.channels);
        if row < 0 || col < 0 || row as usize >= self.rows || col as usize >= self.cols {
            return;
        }
        let idx = self.flat_index(row as usize, col as usize, 0);
        self.data[idx..idx + self.channels].copy_from_slice(color);
    }
}
