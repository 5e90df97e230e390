//! Iterative radix-2 FFT over `Complex64` buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Precomputed twiddles and bit-reversal permutation for one transform length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    twiddle: Vec<Complex64>,
    swaps: Vec<(u32, u32)>,
}

impl FftPlan {
    /// # Panics
    /// Panics if `n` is not a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "fft length must be a power of two");
        let bits = n.trailing_zeros();
        let swaps = if n > 1 {
            (0..n)
                .filter_map(|i| {
                    let j = i.reverse_bits() >> (usize::BITS - bits);
                    (j > i).then_some((i as u32, j as u32))
                })
                .collect()
        } else {
            Vec::new()
        };
        let twiddle = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex64::new(a.cos(), a.sin())
            })
            .collect();
        Self { n, twiddle, swaps }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place transform. `inverse` applies the conjugate kernel and the 1/N scale.
    ///
    /// # Panics
    /// Panics if the buffer length differs from the plan length.
    pub fn process(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "buffer length must match the plan");
        if n <= 1 {
            return;
        }
        for &(i, j) in &self.swaps {
            buf.swap(i as usize, j as usize);
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let t = self.twiddle[k * stride];
                    let w = if inverse { t.conj() } else { t };
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
        if inverse {
            let s = 1.0 / n as f64;
            for v in buf.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// In-place transform. `inverse` applies the conjugate kernel and the 1/N scale.
///
/// # Panics
/// Panics if the buffer length is not a power of two.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    FftPlan::new(buf.len()).process(buf, inverse);
}

/// Transform of a real sequence zero-padded to `n` (power of two).
pub fn rfft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    fft_in_place(&mut buf, false);
    buf
}

/// Inverse transform returning the real part.
pub fn irfft(mut spec: Vec<Complex64>) -> Vec<f64> {
    fft_in_place(&mut spec, true);
    spec.into_iter().map(|c| c.re).collect()
}

/// Frequency in Hz of bin `k` of an `n`-point transform, negative above Nyquist.
pub fn bin_freq(k: usize, n: usize, fs: f64) -> f64 {
    if k <= n / 2 {
        k as f64 * fs / n as f64
    } else {
        (k as f64 - n as f64) * fs / n as f64
    }
}

/// Analytic-signal magnitude (Hilbert envelope) of a real sequence.
pub fn envelope(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = next_pow2(2 * x.len());
    let mut spec = rfft(x, n);
    for (k, v) in spec.iter_mut().enumerate() {
        if k == 0 || k == n / 2 {
            continue;
        }
        if k < n / 2 {
            *v *= 2.0;
        } else {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft_in_place(&mut spec, true);
    spec.iter().take(x.len()).map(|c| c.norm()).collect()
}

/// Hilbert envelope interpolated by `factor` through spectral zero padding.
pub fn envelope_upsampled(x: &[f64], factor: usize) -> Vec<f64> {
    if x.is_empty() || factor == 0 {
        return Vec::new();
    }
    let n = next_pow2(2 * x.len());
    let spec = rfft(x, n);
    let m = n * factor;
    let mut up = vec![Complex64::new(0.0, 0.0); m];
    up[0] = spec[0] * factor as f64;
    for k in 1..n / 2 {
        up[k] = spec[k] * (2.0 * factor as f64);
    }
    fft_in_place(&mut up, true);
    up.iter().take(x.len() * factor).map(|c| c.norm()).collect()
}
