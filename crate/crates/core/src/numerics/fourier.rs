//! Discrete Fourier transform, `X[k] = Σ_t x[t]·exp(−2πi·kt/n)`.
//!
//! Arbitrary lengths use the direct O(n²) sum; powers of two go through an
//! iterative radix-2 path that is cross-checked against the direct sum in
//! tests.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward DFT of a real sequence.
pub fn dft<T: Scalar>(x: &[T]) -> Result<Vec<Complex<T>>> {
    if x.is_empty() {
        return Err(Error::Empty("dft"));
    }
    let buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    Ok(transform(buf, false))
}

/// Forward DFT by the direct double sum, for any length.
pub fn dft_naive<T: Scalar>(x: &[T]) -> Result<Vec<Complex<T>>> {
    if x.is_empty() {
        return Err(Error::Empty("dft_naive"));
    }
    let buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    Ok(naive(&buf, false))
}

/// Magnitudes `|X[k]|` of the forward DFT.
pub fn dft_magnitudes<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    Ok(dft(x)?.into_iter().map(|c| c.norm()).collect())
}

/// Unnormalized complex transform. `inverse` flips the exponent sign; the
/// caller applies any `1/n` or `1/√n` scaling.
pub(crate) fn transform<T: Scalar>(buf: Vec<Complex<T>>, inverse: bool) -> Vec<Complex<T>> {
    if buf.len().is_power_of_two() {
        radix2(buf, inverse)
    } else {
        naive(&buf, inverse)
    }
}

fn twiddle<T: Scalar>(k: usize, n: usize, inverse: bool) -> Complex<T> {
    // Reduce the phase index first so large k·t does not lose precision.
    let angle = -2.0 * std::f64::consts::PI * (k % n) as f64 / n as f64;
    let angle = if inverse { -angle } else { angle };
    Complex::new(T::of(angle.cos()), T::of(angle.sin()))
}

fn naive<T: Scalar>(x: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = x.len();
    let table: Vec<Complex<T>> = (0..n).map(|j| twiddle(j, n, inverse)).collect();
    (0..n)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (t, &v) in x.iter().enumerate() {
                acc = acc + v * table[(k * t) % n];
            }
            acc
        })
        .collect()
}

fn radix2<T: Scalar>(mut a: Vec<Complex<T>>, inverse: bool) -> Vec<Complex<T>> {
    let n = a.len();
    if n <= 1 {
        return a;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            a.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let w = twiddle::<T>(k * step, n, inverse);
                let u = a[start + k];
                let v = a[start + k + len / 2] * w;
                a[start + k] = u + v;
                a[start + k + len / 2] = u - v;
            }
        }
        len <<= 1;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn impulse_has_flat_spectrum() {
        let m = dft_magnitudes(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for v in m {
            assert!((v - 1.0f64).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_is_pure_dc() {
        let c = 2.5f64;
        let m = dft_magnitudes(&[c; 4]).unwrap();
        assert!((m[0] - 4.0 * c).abs() < 1e-14);
        for v in &m[1..] {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(dft::<f64>(&[]).is_err());
    }

    #[test]
    fn radix2_agrees_with_direct_sum() {
        let mut rng = Rng::new(3);
        for &n in &[1usize, 2, 8, 64, 256] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let fast = dft(&x).unwrap();
            let slow = dft_naive(&x).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-9, "n={n}");
            }
        }
    }
}
