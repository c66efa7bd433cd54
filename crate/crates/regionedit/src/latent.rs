//! Latent images (channel-first) and single-channel grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `C x H x W` latent stored channel-first, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * h * w {
            return Err(Error::Length(format!(
                "latent {channels}x{h}x{w} needs {} values, got {}",
                channels * h * w,
                data.len()
            )));
        }
        Ok(Self { channels, h, w, data })
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self { channels, h, w, data: vec![0.0; channels * h * w] }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.channels, self.h, self.w) == (other.channels, other.h, other.w)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Token layout `[H*W, C]`, cells in row-major order.
    pub fn to_tokens(&self) -> Vec<f32> {
        let l = self.tokens();
        let mut out = vec![0.0; l * self.channels];
        for c in 0..self.channels {
            for i in 0..l {
                out[i * self.channels + c] = self.data[c * l + i];
            }
        }
        out
    }

    pub fn from_tokens(tokens: &[f32], channels: usize, h: usize, w: usize) -> Result<Self> {
        let l = h * w;
        if tokens.len() != l * channels {
            return Err(Error::Length(format!("{} token values for {l}x{channels}", tokens.len())));
        }
        let mut data = vec![0.0; l * channels];
        for i in 0..l {
            for c in 0..channels {
                data[c * l + i] = tokens[i * channels + c];
            }
        }
        Ok(Self { channels, h, w, data })
    }
}

/// A single-channel `H x W` field; binary masks store 0.0 / 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Length(format!("grid {h}x{w} given {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, k: usize) -> Grid {
        Grid::from_fn(self.h * k, self.w * k, |y, x| self.at(y / k, x / k))
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of cells equal to 1.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_layout_is_cell_major() {
        let g = LatentGrid::new(2, 1, 2, vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(g.to_tokens(), vec![1.0, 10.0, 2.0, 20.0]);
        assert_eq!(LatentGrid::from_tokens(&g.to_tokens(), 2, 1, 2).unwrap(), g);
    }
}
