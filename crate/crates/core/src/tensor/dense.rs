//! Dense rank-4 tensor in row-major (N, C, H, W) layout, double precision.

use alloc::vec;
use alloc::vec::Vec;

/// Shape of a rank-4 tensor.
pub type Dims = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        let (n, c, h, w) = dims;
        Self {
            dims,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        let (n, c, h, w) = dims;
        Self {
            dims,
            data: vec![value; n * c * h * w],
        }
    }

    /// Wraps an existing buffer; panics if the length does not match.
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Self {
        let (n, c, h, w) = dims;
        assert_eq!(data.len(), n * c * h * w, "tensor buffer length");
        Self { dims, data }
    }

    /// Scalar carrier of shape (1, 1, 1, 1).
    pub fn scalar(value: f64) -> Self {
        Self {
            dims: (1, 1, 1, 1),
            data: vec![value],
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let (_, cc, hh, ww) = self.dims;
        ((n * cc + c) * hh + h) * ww + w
    }

    /// Row `(n, c, h, ..)` as a slice.
    #[inline]
    pub fn row(&self, n: usize, c: usize, h: usize) -> &[f64] {
        let start = self.index(n, c, h, 0);
        let w = self.dims.3;
        &self.data[start..start + w]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, c: usize, h: usize) -> &mut [f64] {
        let start = self.index(n, c, h, 0);
        let w = self.dims.3;
        &mut self.data[start..start + w]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw bit patterns; used for frozen-state assertions.
    pub fn bit_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for byte in v.to_bits().to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}
