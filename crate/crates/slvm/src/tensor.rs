//! Dense row-major tensors and binary masks.
//!
//! Everything numeric in this crate runs through [`Tensor`]: images
//! (`h x w x 3`), feature maps (`h x w x c`), and single-channel fields such
//! as prior masks (`h x w x 1`). Values are `f64`; the on-disk cache format
//! is `f32`, so anything that round-trips through the cache is quantized to
//! `f32` precision at the provider boundary.

use crate::error::{Error, Result};

/// A dense `h x w x c` tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} = {} values, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(Tensor { h, w, c, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        debug_assert!(y < self.h && x < self.w && ch < self.c);
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    /// The channel slice at a pixel.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally-shaped tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "zip of {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Tensor {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape(format!(
                "channel concat of {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let c = self.c + other.c;
        let mut data = Vec::with_capacity(self.h * self.w * c);
        for y in 0..self.h {
            for x in 0..self.w {
                data.extend_from_slice(self.pixel(y, x));
                data.extend_from_slice(other.pixel(y, x));
            }
        }
        Ok(Tensor {
            h: self.h,
            w: self.w,
            c,
            data,
        })
    }

    /// Split a channel-concatenated tensor back into its two parts.
    pub fn split_channels(&self, first_c: usize) -> Result<(Tensor, Tensor)> {
        if first_c > self.c {
            return Err(Error::Shape(format!(
                "cannot split {} channels off a {}-channel tensor",
                first_c, self.c
            )));
        }
        let mut a = Tensor::zeros(self.h, self.w, first_c);
        let mut b = Tensor::zeros(self.h, self.w, self.c - first_c);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = self.pixel(y, x);
                for ch in 0..first_c {
                    *a.at_mut(y, x, ch) = px[ch];
                }
                for ch in first_c..self.c {
                    *b.at_mut(y, x, ch - first_c) = px[ch];
                }
            }
        }
        Ok((a, b))
    }

    /// Round every entry through `f32`. The embedding cache stores 32-bit
    /// floats, so feature providers quantize their outputs with this to keep
    /// save/load round-trips bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// A `{0,1}`-valued `h x w` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "expected {}x{} = {} mask values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask { h, w, data })
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

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        debug_assert!(y < self.h && x < self.w);
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Foreground as a float tensor (`h x w x 1`).
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            h: self.h,
            w: self.w,
            c: 1,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}
