//! Discretized selective scan for a single head and its equivalent
//! lower-triangular filter matrix.
//!
//! One head with state `h ∈ R^{N×P}` evolves as
//! `h_t = a_t·h_{t−1} + (Δ_t·B̄_t)·x_tᵀ` and reads out `y_t = C_tᵀ·h_t + D·x_t`.
//! Unrolling the recurrence gives `y = M·x` per channel with
//! `M[t][s] = C_t·B̄_s·Δ_s·∏_{i=s+1..t} a_i` (empty product = 1) plus `D` on
//! the diagonal.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Overflow-safe `ln(1 + eˣ)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Per-token decay `exp(−Δ·exp(a_log))`, in `(0, 1)` for `Δ > 0`.
#[inline]
pub fn decay<T: Scalar>(delta: T, a_log: T) -> T {
    (-delta * a_log.exp()).exp()
}

/// Discretized parameters of one head over a sequence of `T` tokens.
#[derive(Clone, Debug)]
pub struct HeadDiscretized<T> {
    /// Decay per token, length `T`.
    pub a: Vec<T>,
    /// Input vectors `B̄_t`, row-major `T × N`.
    pub b: Vec<T>,
    /// Readout vectors `C_t`, row-major `T × N`.
    pub c: Vec<T>,
    /// Step sizes, length `T`.
    pub delta: Vec<T>,
    /// Skip coefficient.
    pub d: T,
    pub state_dim: usize,
}

impl<T: Scalar> HeadDiscretized<T> {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n) = (self.len(), self.state_dim);
        if self.b.len() != t * n || self.c.len() != t * n || self.delta.len() != t {
            return Err(Error::shape(
                "HeadDiscretized",
                format!("a,delta: {t}; b,c: {}", t * n),
                format!("delta {}, b {}, c {}", self.delta.len(), self.b.len(), self.c.len()),
            ));
        }
        if !self.a.iter().all(|&a| a > T::zero() && a < T::one()) {
            return Err(Error::Config("head decay must lie strictly in (0, 1)".into()));
        }
        if !self.delta.iter().all(|&d| d > T::zero() && d.is_finite()) {
            return Err(Error::Config("head step sizes must be positive".into()));
        }
        if !(self.b.iter().chain(&self.c).all(|v| v.is_finite()) && self.d.is_finite()) {
            return Err(Error::NonFinite("HeadDiscretized".into()));
        }
        Ok(())
    }
}

/// One recurrence step on `state` (`N × P`), returning `y_t` into `y`.
#[inline]
pub fn scan_step<T: Scalar>(state: &mut [T], a: T, delta: T, b: &[T], c: &[T], d: T, x: &[T], y: &mut [T]) {
    let p = x.len();
    for (i, (&bn, &cn)) in b.iter().zip(c).enumerate() {
        let db = delta * bn;
        let row = &mut state[i * p..(i + 1) * p];
        for (j, h) in row.iter_mut().enumerate() {
            *h = a * *h + db * x[j];
        }
        if i == 0 {
            for (j, out) in y.iter_mut().enumerate() {
                *out = cn * row[j];
            }
        } else {
            for (j, out) in y.iter_mut().enumerate() {
                *out += cn * row[j];
            }
        }
    }
    if b.is_empty() {
        y.iter_mut().for_each(|v| *v = T::zero());
    }
    for (out, &xv) in y.iter_mut().zip(x) {
        *out += d * xv;
    }
}

/// Output of a scan that kept every intermediate state for the backward pass.
#[derive(Clone, Debug)]
pub struct ScanTrace<T> {
    /// `T × P`.
    pub y: Vec<T>,
    /// State after each step, `T × N × P`.
    pub states: Vec<T>,
}

/// Selective scan of one head from a zero state. `x` is row-major `T × P`.
pub fn scan_head<T: Scalar>(disc: &HeadDiscretized<T>, x: &[T], p: usize) -> Result<Vec<T>> {
    Ok(scan_head_traced(disc, x, p)?.y)
}

pub fn scan_head_traced<T: Scalar>(disc: &HeadDiscretized<T>, x: &[T], p: usize) -> Result<ScanTrace<T>> {
    let (t_len, n) = (disc.len(), disc.state_dim);
    if x.len() != t_len * p {
        return Err(Error::shape("scan_head", t_len * p, x.len()));
    }
    if disc.b.len() != t_len * n || disc.c.len() != t_len * n || disc.delta.len() != t_len {
        return Err(Error::shape(
            "scan_head",
            "consistent T and N",
            "mismatched head parameters",
        ));
    }
    let mut y = vec![T::zero(); t_len * p];
    let mut states = vec![T::zero(); t_len * n * p];
    let mut h = vec![T::zero(); n * p];
    for t in 0..t_len {
        scan_step(
            &mut h,
            disc.a[t],
            disc.delta[t],
            &disc.b[t * n..(t + 1) * n],
            &disc.c[t * n..(t + 1) * n],
            disc.d,
            &x[t * p..(t + 1) * p],
            &mut y[t * p..(t + 1) * p],
        );
        states[t * n * p..(t + 1) * n * p].copy_from_slice(&h);
    }
    Ok(ScanTrace { y, states })
}

/// Adjoints of [`scan_head_traced`] with respect to each input.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub a: Vec<T>,
    pub delta: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: T,
    pub x: Vec<T>,
}

/// Reverse-time adjoint recurrence:
/// `∂h_t = C_t·∂y_tᵀ + a_{t+1}·∂h_{t+1}`.
pub fn scan_head_backward<T: Scalar>(
    disc: &HeadDiscretized<T>,
    x: &[T],
    p: usize,
    trace: &ScanTrace<T>,
    dy: &[T],
) -> ScanGrads<T> {
    let (t_len, n) = (disc.len(), disc.state_dim);
    let mut g = ScanGrads {
        a: vec![T::zero(); t_len],
        delta: vec![T::zero(); t_len],
        b: vec![T::zero(); t_len * n],
        c: vec![T::zero(); t_len * n],
        d: T::zero(),
        x: vec![T::zero(); t_len * p],
    };
    let mut dh = vec![T::zero(); n * p];
    let zeros = vec![T::zero(); n * p];
    for t in (0..t_len).rev() {
        let h = &trace.states[t * n * p..(t + 1) * n * p];
        let h_prev = if t == 0 {
            &zeros[..]
        } else {
            &trace.states[(t - 1) * n * p..t * n * p]
        };
        let xt = &x[t * p..(t + 1) * p];
        let dyt = &dy[t * p..(t + 1) * p];
        let bt = &disc.b[t * n..(t + 1) * n];
        let ct = &disc.c[t * n..(t + 1) * n];
        let (delta, a) = (disc.delta[t], disc.a[t]);

        for j in 0..p {
            g.d += dyt[j] * xt[j];
            g.x[t * p + j] += disc.d * dyt[j];
        }
        let mut da = T::zero();
        let mut ddelta = T::zero();
        for i in 0..n {
            let row = &mut dh[i * p..(i + 1) * p];
            let hrow = &h[i * p..(i + 1) * p];
            let prow = &h_prev[i * p..(i + 1) * p];
            let mut dc = T::zero();
            let mut dbx = T::zero();
            for j in 0..p {
                row[j] += ct[i] * dyt[j];
                dc += hrow[j] * dyt[j];
                da += row[j] * prow[j];
                dbx += row[j] * xt[j];
                g.x[t * p + j] += row[j] * delta * bt[i];
            }
            g.c[t * n + i] = dc;
            g.b[t * n + i] = delta * dbx;
            ddelta += bt[i] * dbx;
        }
        g.a[t] = da;
        g.delta[t] = ddelta;
        for v in dh.iter_mut() {
            *v *= a;
        }
    }
    g
}

/// Lower-triangular `T × T` matrix realizing the head as a time-variant filter.
pub fn materialize_matrix<T: Scalar>(disc: &HeadDiscretized<T>) -> Tensor<T> {
    let (t_len, n) = (disc.len(), disc.state_dim);
    let mut m = Tensor::zeros(&[t_len, t_len]);
    for t in 0..t_len {
        let ct = &disc.c[t * n..(t + 1) * n];
        // Walk s downward so the decay product grows one factor at a time.
        let mut prod = T::one();
        for s in (0..=t).rev() {
            if s < t {
                prod *= disc.a[s + 1];
            }
            let bs = &disc.b[s * n..(s + 1) * n];
            let cb: T = ct.iter().zip(bs).map(|(&c, &b)| c * b).sum();
            m.set(t, s, cb * disc.delta[s] * prod);
        }
        let diag = m.at(t, t) + disc.d;
        m.set(t, t, diag);
    }
    m
}

/// Time-invariant kernel `[CB, CAB, …, CA^K B]` for diagonal `A`.
pub fn kernel_lti<T: Scalar>(a_diag: &[T], b: &[T], c: &[T], order: usize) -> Result<Vec<T>> {
    if a_diag.len() != b.len() || b.len() != c.len() {
        return Err(Error::shape(
            "kernel_lti",
            a_diag.len(),
            format!("b {}, c {}", b.len(), c.len()),
        ));
    }
    let mut pow: Vec<T> = vec![T::one(); a_diag.len()];
    let mut out = Vec::with_capacity(order + 1);
    for _ in 0..=order {
        out.push((0..a_diag.len()).map(|i| c[i] * pow[i] * b[i]).sum());
        for (p, &a) in pow.iter_mut().zip(a_diag) {
            *p *= a;
        }
    }
    Ok(out)
}

/// Causal convolution `y[t] = Σ_k kernel[k]·x[t−k]`.
pub fn causal_convolve<T: Scalar>(x: &[T], kernel: &[T]) -> Vec<T> {
    (0..x.len())
        .map(|t| kernel.iter().enumerate().take(t + 1).map(|(k, &w)| w * x[t - k]).sum())
        .collect()
}
