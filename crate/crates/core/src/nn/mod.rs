//! Neural-network building blocks: im2col convolution, batch normalization,
//! max pooling, elementwise activations, and the ADAM optimizer. Everything
//! is generic over f32/f64 and keeps explicit forward caches so backward
//! passes can be driven by hand through the unrolled recurrence.

pub mod act;
pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod pool;

use crate::tensor::Scalar;

/// Reusable im2col scratch storage. Convolutions chunk their work so this
/// buffer never exceeds a fixed budget regardless of batch size.
pub struct Scratch<T> {
    buf: Vec<T>,
    buf2: Vec<T>,
}

/// Cap on a single im2col buffer (elements, not bytes): 48M elements is
/// 192 MB in f32. Chunking over batch samples keeps peak memory bounded.
pub const MAX_COL_ELEMS: usize = 48 * 1024 * 1024;

impl<T: Scalar> Scratch<T> {
    pub fn new() -> Self {
        Scratch {
            buf: Vec::new(),
            buf2: Vec::new(),
        }
    }

    pub fn col(&mut self, len: usize) -> &mut [T] {
        if self.buf.len() < len {
            self.buf.resize(len, T::ZERO);
        }
        &mut self.buf[..len]
    }

    /// Second buffer for passes that need two live column matrices.
    pub fn col2(&mut self, len: usize) -> &mut [T] {
        if self.buf2.len() < len {
            self.buf2.resize(len, T::ZERO);
        }
        &mut self.buf2[..len]
    }

    /// Both buffers at once, for passes that fill one while reading the other.
    pub fn col_pair(&mut self, len1: usize, len2: usize) -> (&mut [T], &mut [T]) {
        if self.buf.len() < len1 {
            self.buf.resize(len1, T::ZERO);
        }
        if self.buf2.len() < len2 {
            self.buf2.resize(len2, T::ZERO);
        }
        (&mut self.buf[..len1], &mut self.buf2[..len2])
    }
}

impl<T: Scalar> Default for Scratch<T> {
    fn default() -> Self {
        Self::new()
    }
}
