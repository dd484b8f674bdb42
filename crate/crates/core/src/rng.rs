//! Counter-addressed random streams.
//!
//! A stream is identified by `(seed, counter)`: the seed keys a ChaCha12 generator and
//! the counter is the index of the next 64-bit word in its keystream. Two streams with
//! the same pair produce the same draws. Child streams sit `2^32` words apart so that
//! parallel chains never share draws unless one of them consumes more than `2^32` words.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

/// Upper bound on the element count of a single Gaussian draw.
pub const MAX_SAMPLE_ELEMS: usize = 1 << 24;

/// Word distance between sibling child streams.
pub const CHILD_STRIDE: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, counter: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        // Each u64 spans two 32-bit keystream words.
        rng.set_word_pos(u128::from(counter) * 2);
        Self { seed, counter, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Stream `index` blocks ahead of this stream's current position.
    pub fn child(&self, index: u64) -> RngStream {
        let offset = (index + 1).wrapping_mul(CHILD_STRIDE);
        RngStream::new(self.seed, self.counter.wrapping_add(offset))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's rejection method).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }

    /// Fills `out` with standard normals via Box–Muller; two words per pair.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_mut(2);
        for chunk in &mut chunks {
            // 1 - u keeps the log argument in (0, 1].
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let radius = (-2.0 * u1.ln()).sqrt();
            let angle = std::f64::consts::TAU * u2;
            chunk[0] = radius * angle.cos();
            if chunk.len() == 2 {
                chunk[1] = radius * angle.sin();
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let mut v = [0.0];
        self.fill_normal(&mut v);
        v[0]
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}

/// i.i.d. standard normal tensor of the given shape; advances the stream.
pub fn gaussian_sample(rng: &mut RngStream, shape: &[usize]) -> Result<Tensor> {
    let n = checked_numel(shape)?;
    if n > MAX_SAMPLE_ELEMS {
        return Err(Error::InvalidParameter(format!(
            "gaussian sample of {n} elements exceeds {MAX_SAMPLE_ELEMS}"
        )));
    }
    let mut data = vec![0.0; n];
    rng.fill_normal(&mut data);
    Ok(Tensor::from_parts(data, shape.to_vec()))
}
