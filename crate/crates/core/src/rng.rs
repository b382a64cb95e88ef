//! Portable seeded noise source.
//!
//! Uniform draws come from ChaCha8 (`rand_chacha`), with independent streams
//! selected through the ChaCha stream id. A uniform `u` is formed from the
//! top 53 bits of a `u64`. Gaussian draws use the Box–Muller transform on two
//! consecutive uniforms `(u1, u2)`: `√(−2 ln(1 − u1))·cos(2π·u2)`; the sine
//! half is discarded so every normal costs exactly two `u64` words. These
//! rules are enough to reproduce a trace bit-for-bit in another language.

use nalgebra::{Matrix3, Vector3};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named noise streams, one per sensor or purpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Gyro = 1,
    Wheel = 2,
    BiasWalk = 3,
    Pixel = 4,
    Landmarks = 5,
    Dropout = 6,
    MonteCarlo = 7,
    Test = 8,
}

#[derive(Clone, Debug)]
pub struct NoiseRng {
    inner: ChaCha8Rng,
}

impl NoiseRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            // keep the stream position independent of the noise level
            self.normal();
            0.0
        } else {
            sigma * self.normal()
        }
    }

    pub fn normal3(&mut self) -> Vector3<f64> {
        Vector3::new(self.normal(), self.normal(), self.normal())
    }

    /// Draw from `N(0, Σ)` given a lower Cholesky-like factor `L` with `L·Lᵀ = Σ`.
    pub fn correlated3(&mut self, factor: &Matrix3<f64>) -> Vector3<f64> {
        factor * self.normal3()
    }
}

/// Square-root factor of a symmetric PSD 3×3 matrix (zero-safe).
pub fn psd_sqrt3(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = cov.symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose()
}
