//! Row-wise normalization helpers shared by the block and the model stack.

use crate::scalar::Scalar;
use crate::ssm::{silu, silu_grad};

pub const RMS_EPS: f64 = 1e-6;

/// `out = x / rms(x) ⊙ w`; returns `1/rms(x)`.
pub fn rms_norm<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) -> T {
    let n = T::of(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + T::of(RMS_EPS)).sqrt();
    for ((o, &v), &wv) in out.iter_mut().zip(x).zip(w) {
        *o = v * inv * wv;
    }
    inv
}

/// Backward of [`rms_norm`]: accumulates into `dx` and `dw`.
pub fn rms_norm_backward<T: Scalar>(x: &[T], w: &[T], inv: T, dout: &[T], dx: &mut [T], dw: &mut [T]) {
    let n = T::of(x.len() as f64);
    let mut radial = T::zero();
    for i in 0..x.len() {
        let xhat = x[i] * inv;
        dw[i] += dout[i] * xhat;
        radial += dout[i] * w[i] * xhat;
    }
    radial /= n;
    for i in 0..x.len() {
        let xhat = x[i] * inv;
        dx[i] += (dout[i] * w[i] - xhat * radial) * inv;
    }
}

/// Gated RMS norm `(y ⊙ SiLU(z)) / rms ⊙ w`; returns the gated vector and `1/rms`.
pub fn rms_norm_gated<T: Scalar>(y: &[T], z: &[T], w: &[T], out: &mut [T]) -> (Vec<T>, T) {
    let g: Vec<T> = y.iter().zip(z).map(|(&yv, &zv)| yv * silu(zv)).collect();
    let inv = rms_norm(&g, w, out);
    (g, inv)
}

/// Backward of [`rms_norm_gated`], accumulating into `dy`, `dz` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn rms_norm_gated_backward<T: Scalar>(
    y: &[T],
    z: &[T],
    w: &[T],
    g: &[T],
    inv: T,
    dout: &[T],
    dy: &mut [T],
    dz: &mut [T],
    dw: &mut [T],
) {
    let mut dg = vec![T::zero(); g.len()];
    rms_norm_backward(g, w, inv, dout, &mut dg, dw);
    for i in 0..g.len() {
        dy[i] += dg[i] * silu(z[i]);
        dz[i] += dg[i] * y[i] * silu_grad(z[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_gate_outputs_zero() {
        let mut out = [1.0; 3];
        rms_norm_gated(&[1.0, -2.0, 3.0], &[0.0; 3], &[1.0; 3], &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn constant_gated_vector() {
        // z large so SiLU(z) ≈ z; choose y so that g is constant.
        let z = [30.0f64; 4];
        let c = -0.7;
        let y: Vec<f64> = z.iter().map(|&zv| c / silu(zv)).collect();
        let mut out = [0.0; 4];
        rms_norm_gated(&y, &z, &[1.0; 4], &mut out);
        let expect = c.signum() * (c * c / (c * c + 1e-6)).sqrt();
        for v in out {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_norm_matches_formula() {
        let y = [0.3f64, -1.2, 2.2, 0.05];
        let z = [1.0f64, -0.5, 0.25, 3.0];
        let w = [1.5, 0.5, -1.0, 2.0];
        let mut out = [0.0; 4];
        rms_norm_gated(&y, &z, &w, &mut out);
        let g: Vec<f64> = (0..4).map(|i| y[i] * z[i] / (1.0 + (-z[i]).exp())).collect();
        let ms = g.iter().map(|v| v * v).sum::<f64>() / 4.0;
        for i in 0..4 {
            let want = g[i] / (ms + 1e-6).sqrt() * w[i];
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_backward_matches_finite_differences() {
        let y = [0.3, -1.2, 2.2, 0.05];
        let z = [1.0, -0.5, 0.25, 3.0];
        let w = [1.5, 0.5, -1.0, 2.0];
        let up = [0.7, -0.3, 1.1, 0.4];
        let f = |y: &[f64], z: &[f64], w: &[f64]| {
            let mut out = [0.0; 4];
            rms_norm_gated(y, z, w, &mut out);
            out.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut o = [0.0; 4];
        let (g, inv) = rms_norm_gated(&y, &z, &w, &mut o);
        let (mut dy, mut dz, mut dw) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        rms_norm_gated_backward(&y, &z, &w, &g, inv, &up, &mut dy, &mut dz, &mut dw);
        let h = 1e-6;
        for i in 0..4 {
            for (which, analytic) in [(0, dy[i]), (1, dz[i]), (2, dw[i])] {
                let (mut a, mut b, mut c) = (y, z, w);
                let (mut a2, mut b2, mut c2) = (y, z, w);
                match which {
                    0 => {
                        a[i] += h;
                        a2[i] -= h
                    }
                    1 => {
                        b[i] += h;
                        b2[i] -= h
                    }
                    _ => {
                        c[i] += h;
                        c2[i] -= h
                    }
                }
                let num = (f(&a, &b, &c) - f(&a2, &b2, &c2)) / (2.0 * h);
                assert!((num - analytic).abs() < 1e-7, "{which} {i}: {num} vs {analytic}");
            }
        }
    }
}
