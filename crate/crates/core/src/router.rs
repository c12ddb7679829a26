//! Spectral-residual routing over shared and expert filters.
//!
//! Filters are indexed `0..M`. Experts occupy `0..E` and the `S` shared
//! filters occupy `E..M`. Each token activates `H = Q + S` slots laid out as
//! `[Q selected experts in descending score order ‖ S shared filters]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Rng, Tensor};
use crate::scalar::Scalar;
use crate::ssm::softplus;

/// Normalizer of the position feature used by [`RouterMode::PositionBias`].
/// Fixed so prefill and streaming decode see the same feature.
pub const POSITION_SCALE: f64 = 2048.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    /// Residual-driven scores and spectral bias.
    #[default]
    Spectral,
    /// Experts `0..Q` for every token.
    Fixed,
    /// Seeded draw of `Q` experts per token, independent of the input.
    Random,
    /// Scores and bias from the raw input instead of the residual.
    InputOnly,
    /// Residual-driven selection with the bias path disabled.
    NoBias,
    /// Normalized token position in place of the residual.
    PositionBias,
}

impl std::str::FromStr for RouterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spectral" => Self::Spectral,
            "fixed" => Self::Fixed,
            "random" => Self::Random,
            "input_only" => Self::InputOnly,
            "no_bias" => Self::NoBias,
            "position_bias" => Self::PositionBias,
            other => return Err(Error::Config(format!("unknown router mode `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Total filters `M`.
    pub n_filters: usize,
    /// Shared filters `S`.
    pub n_shared: usize,
    /// Active slots per token `H`.
    pub n_active: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub mode: RouterMode,
    /// Seed of the [`RouterMode::Random`] stream.
    pub seed: u64,
    /// Distinguishes the random streams of different layers.
    pub stream: u64,
}

impl RouterConfig {
    pub fn n_experts(&self) -> usize {
        self.n_filters - self.n_shared
    }

    pub fn n_selected(&self) -> usize {
        self.n_active - self.n_shared
    }

    /// Output width of the router projection, `E + Q = M + H − 2S`.
    pub fn out_width(&self) -> usize {
        self.n_experts() + self.n_selected()
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.mode == RouterMode::NoBias {
            0.0
        } else {
            self.gamma
        }
    }

    pub fn shared_ids(&self) -> std::ops::Range<usize> {
        self.n_experts()..self.n_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shared > self.n_active || self.n_active > self.n_filters {
            return Err(Error::Config(format!(
                "need S <= H <= M, got S={} H={} M={}",
                self.n_shared, self.n_active, self.n_filters
            )));
        }
        if self.n_active == 0 {
            return Err(Error::Config("H must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be finite and >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Joint score/bias projection `W_h`, shape `(d + M) × (E + Q)`, no bias term.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    pub w: Tensor<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn zeros(d_model: usize, cfg: &RouterConfig) -> Self {
        Self {
            w: Tensor::zeros(&[d_model + cfg.n_filters, cfg.out_width()]),
        }
    }
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    /// 1-based position in the stream.
    pub token_index: usize,
    /// Selected experts, highest score first.
    pub expert_ids: Vec<usize>,
    /// Raw expert scores `s_t`, length `E`.
    pub scores: Vec<f64>,
    /// Spectral bias `γ·b` added to each selected slot, length `Q`.
    pub bias: Vec<f64>,
    pub shared_ids: Vec<usize>,
}

/// Inclusive running sum of the inputs seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMeanState<T> {
    pub cumsum: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> RunningMeanState<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            cumsum: vec![T::zero(); dim],
            count: 0,
        }
    }
}

/// Accumulates `u_t`, then returns `r_t = u_t − mean(u_1..u_t)`.
pub fn spectral_residual<T: Scalar>(u_t: &[T], state: &mut RunningMeanState<T>) -> Result<Vec<T>> {
    if u_t.len() != state.cumsum.len() {
        return Err(Error::shape("spectral_residual", state.cumsum.len(), u_t.len()));
    }
    state.count += 1;
    let inv = T::one() / T::of(state.count as f64);
    Ok(u_t
        .iter()
        .zip(state.cumsum.iter_mut())
        .map(|(&u, acc)| {
            *acc += u;
            u - *acc * inv
        })
        .collect())
}

/// `[feature ‖ delta_base]·W_h`, split into `E` scores and `Q` raw bias terms.
pub fn score_and_bias<T: Scalar>(
    delta_base: &[T],
    feature: &[T],
    params: &RouterParams<T>,
    cfg: &RouterConfig,
) -> Result<(Vec<T>, Vec<T>)> {
    let width = cfg.out_width();
    let rows = feature.len() + delta_base.len();
    if params.w.shape() != [rows, width] || delta_base.len() != cfg.n_filters {
        return Err(Error::shape(
            "score_and_bias",
            format!("W_h [{rows}, {width}] and M={}", cfg.n_filters),
            format!("{:?}, delta {}", params.w.shape(), delta_base.len()),
        ));
    }
    let mut out = vec![T::zero(); width];
    for (k, &v) in feature.iter().chain(delta_base).enumerate() {
        if v == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(params.w.row(k)) {
            *o += v * w;
        }
    }
    let bias = out.split_off(cfg.n_experts());
    Ok((out, bias))
}

/// Indices of the `q` largest scores, highest first; ties go to the lower index.
pub fn top_q<T: Scalar>(scores: &[T], q: usize) -> Result<Vec<usize>> {
    if q > scores.len() {
        return Err(Error::Config(format!("Q={q} exceeds E={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(q);
    Ok(idx)
}

/// Smallest gap between the `Q`-th and `(Q+1)`-th score, the distance to a
/// change of selection. `None` when nothing is selected or nothing is left out.
pub fn selection_margin<T: Scalar>(scores: &[T], q: usize) -> Option<f64> {
    if q == 0 || q >= scores.len() {
        return None;
    }
    let mut s: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Some(s[q - 1] - s[q])
}

/// Expert choice for the token at 1-based position `token_index`.
pub fn select_experts<T: Scalar>(scores: &[T], cfg: &RouterConfig, token_index: usize) -> Result<Vec<usize>> {
    let q = cfg.n_selected();
    match cfg.mode {
        RouterMode::Fixed => Ok((0..q).collect()),
        RouterMode::Random => {
            let mut rng = Rng::new(cfg.seed).fork(cfg.stream).fork(token_index as u64);
            Ok(rng.sample_distinct(cfg.n_experts(), q))
        }
        _ => top_q(scores, q),
    }
}

/// Per-slot step sizes of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDeltas<T> {
    /// Filter id feeding each slot.
    pub ids: Vec<usize>,
    /// Pre-activation `gathered + dt_bias + γ·bias`.
    pub pre: Vec<T>,
    /// `Softplus(pre)`.
    pub delta: Vec<T>,
    /// `Softplus(gathered + dt_bias)`, the unbiased step size.
    pub baseline: Vec<T>,
}

pub fn assemble_slots<T: Scalar>(
    delta_base: &[T],
    expert_ids: &[usize],
    bias_raw: &[T],
    cfg: &RouterConfig,
    dt_bias: &[T],
) -> Result<SlotDeltas<T>> {
    let q = cfg.n_selected();
    if expert_ids.len() != q || bias_raw.len() != q || dt_bias.len() != cfg.n_active {
        return Err(Error::shape(
            "assemble_slots",
            format!("Q={q} ids and bias, H={} dt_bias", cfg.n_active),
            format!(
                "{} ids, {} bias, {} dt_bias",
                expert_ids.len(),
                bias_raw.len(),
                dt_bias.len()
            ),
        ));
    }
    if let Some(&bad) = expert_ids.iter().find(|&&id| id >= cfg.n_experts()) {
        return Err(Error::Config(format!(
            "expert id {bad} out of range 0..{}",
            cfg.n_experts()
        )));
    }
    let gamma = T::of(cfg.effective_gamma());
    let ids: Vec<usize> = expert_ids.iter().copied().chain(cfg.shared_ids()).collect();
    let mut pre = Vec::with_capacity(ids.len());
    let mut baseline = Vec::with_capacity(ids.len());
    for (slot, &id) in ids.iter().enumerate() {
        let base = delta_base[id] + dt_bias[slot];
        baseline.push(softplus(base));
        pre.push(if slot < q { base + gamma * bias_raw[slot] } else { base });
    }
    let delta = pre.iter().map(|&v| softplus(v)).collect();
    Ok(SlotDeltas {
        ids,
        pre,
        delta,
        baseline,
    })
}

/// Squared coefficient of variation of one token's scores, population variance.
pub fn cv_squared<T: Scalar>(scores: &[T], epsilon: T) -> T {
    if scores.is_empty() {
        return T::zero();
    }
    let n = T::of(scores.len() as f64);
    let mean = scores.iter().copied().sum::<T>() / n;
    let var = scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / n;
    var / (mean * mean + epsilon)
}

/// Adds `scale · ∂cv²/∂s` into `grad`.
pub fn cv_squared_backward<T: Scalar>(scores: &[T], epsilon: T, scale: T, grad: &mut [T]) {
    if scores.is_empty() {
        return;
    }
    let n = T::of(scores.len() as f64);
    let mean = scores.iter().copied().sum::<T>() / n;
    let var = scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / n;
    let denom = mean * mean + epsilon;
    let two = T::of(2.0);
    let common = var * two * mean / (n * denom * denom);
    for (g, &s) in grad.iter_mut().zip(scores) {
        *g += scale * (two * (s - mean) / (n * denom) - common);
    }
}

/// Mean CV² over every token of a `[…, E]` score tensor.
pub fn balance_loss<T: Scalar>(scores: &Tensor<T>, epsilon: T) -> Result<T> {
    let e = *scores.shape().last().ok_or(Error::Empty("balance_loss"))?;
    if scores.is_empty() || e == 0 {
        return Ok(T::zero());
    }
    let tokens = scores.len() / e;
    let total: T = scores.data().chunks(e).map(|s| cv_squared(s, epsilon)).sum();
    Ok(total / T::of(tokens as f64))
}

/// Orthogonality penalty of one token's `H × P` slot outputs: mean over all
/// ordered pairs of `(⟨ŷ_i, ŷ_j⟩ − δ_ij)²`. Zero-norm outputs stay zero rows.
pub fn diversity_token<T: Scalar>(y: &[T], h: usize, p: usize) -> T {
    let normed = normalize_rows(y, h, p);
    let mut acc = T::zero();
    for i in 0..h {
        for j in 0..h {
            let g = dot(&normed.0[i * p..(i + 1) * p], &normed.0[j * p..(j + 1) * p]);
            let target = if i == j { T::one() } else { T::zero() };
            acc += (g - target) * (g - target);
        }
    }
    acc / T::of((h * h) as f64)
}

/// Adds `scale · ∂diversity_token/∂y` into `grad`.
pub fn diversity_token_backward<T: Scalar>(y: &[T], h: usize, p: usize, scale: T, grad: &mut [T]) {
    let (normed, norms) = normalize_rows(y, h, p);
    let hh = T::of((h * h) as f64);
    let two = T::of(2.0);
    let mut dhat = vec![T::zero(); h * p];
    for i in 0..h {
        for j in 0..h {
            let g = dot(&normed[i * p..(i + 1) * p], &normed[j * p..(j + 1) * p]);
            let target = if i == j { T::one() } else { T::zero() };
            // d/dŷ_i of (g_ij − δ)² picks up ŷ_j; the symmetric (j, i) term
            // contributes the same amount, hence the factor 2·2.
            let coef = two * two * (g - target) / hh;
            for k in 0..p {
                dhat[i * p + k] += coef * normed[j * p + k];
            }
        }
    }
    for i in 0..h {
        if norms[i] == T::zero() {
            continue;
        }
        let yi = &normed[i * p..(i + 1) * p];
        let di = &dhat[i * p..(i + 1) * p];
        let radial = dot(yi, di);
        for k in 0..p {
            grad[i * p + k] += scale * (di[k] - yi[k] * radial) / norms[i];
        }
    }
}

fn normalize_rows<T: Scalar>(y: &[T], h: usize, p: usize) -> (Vec<T>, Vec<T>) {
    let mut out = y.to_vec();
    let mut norms = vec![T::zero(); h];
    for i in 0..h {
        let row = &mut out[i * p..(i + 1) * p];
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms[i] = n;
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    (out, norms)
}

/// Mean diversity penalty over every token of a `[…, H, P]` tensor.
pub fn diversity_loss<T: Scalar>(y: &Tensor<T>) -> Result<T> {
    let shape = y.shape();
    if shape.len() < 2 {
        return Err(Error::shape("diversity_loss", "[…, H, P]", format!("{shape:?}")));
    }
    let (h, p) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 {
        return Err(Error::Config("diversity_loss needs H >= 1".into()));
    }
    if y.is_empty() {
        return Ok(T::zero());
    }
    let tokens = y.len() / (h * p);
    let total: T = y.data().chunks(h * p).map(|t| diversity_token(t, h, p)).sum();
    Ok(total / T::of(tokens as f64))
}

/// Writes `token_index,rank,expert_id,score,bias`, one row per selected expert.
pub fn write_records_csv<W: Write>(records: &[SelectionRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "token_index,rank,expert_id,score,bias")?;
    for r in records {
        for (rank, &id) in r.expert_ids.iter().enumerate() {
            let score = r.scores.get(id).copied().unwrap_or(f64::NAN);
            writeln!(out, "{},{},{},{},{}", r.token_index, rank, id, score, r.bias[rank])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, s: usize, h: usize) -> RouterConfig {
        RouterConfig {
            n_filters: m,
            n_shared: s,
            n_active: h,
            gamma: 0.25,
            epsilon: 1e-10,
            mode: RouterMode::Spectral,
            seed: 0,
            stream: 0,
        }
    }

    #[test]
    fn constant_stream_has_zero_residual() {
        let mut st = RunningMeanState::new(1);
        for _ in 0..3 {
            assert_eq!(spectral_residual(&[2.5f64], &mut st).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn inclusive_mean_arithmetic() {
        let mut st = RunningMeanState::new(1);
        assert_eq!(spectral_residual(&[1.0f64], &mut st).unwrap(), vec![0.0]);
        assert_eq!(spectral_residual(&[3.0f64], &mut st).unwrap(), vec![1.0]);
        assert_eq!(st.count, 2);
        assert_eq!(st.cumsum, vec![4.0]);
    }

    #[test]
    fn zero_projection_gives_zero_outputs() {
        let c = cfg(4, 1, 2);
        let p = RouterParams::<f64>::zeros(3, &c);
        let (s, b) = score_and_bias(&[1.0; 4], &[1.0; 3], &p, &c).unwrap();
        assert_eq!(s, vec![0.0; 3]);
        assert_eq!(b, vec![0.0; 1]);
    }

    #[test]
    fn basis_delta_selects_router_row() {
        let c = cfg(4, 1, 2);
        let d = 3;
        let data: Vec<f64> = (0..(d + 4) * 4).map(|v| v as f64).collect();
        let p = RouterParams {
            w: Tensor::from_vec(&[d + 4, 4], data).unwrap(),
        };
        let (s, b) = score_and_bias(&[0.0, 0.0, 1.0, 0.0], &[0.0; 3], &p, &c).unwrap();
        let row = p.w.row(d + 2);
        assert_eq!(s, row[..3].to_vec());
        assert_eq!(b, row[3..].to_vec());
    }

    #[test]
    fn score_shape_mismatch_is_an_error() {
        let c = cfg(4, 1, 2);
        let p = RouterParams::<f64>::zeros(3, &c);
        assert!(score_and_bias(&[0.0; 4], &[0.0; 2], &p, &c).is_err());
    }

    #[test]
    fn top_q_examples() {
        assert_eq!(top_q(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_q(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert!(top_q(&[0.5], 2).is_err());
    }

    #[test]
    fn slots_without_bias() {
        let mut c = cfg(4, 2, 3);
        c.gamma = 0.0;
        let slots = assemble_slots(&[0.3, -0.2, 0.0, 1.0], &[1], &[5.0], &c, &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(slots.ids, vec![1, 2, 3]);
        assert_eq!(slots.delta, slots.baseline);
        assert!((slots.delta[1] - 2f64.ln()).abs() < 1e-15);
        assert!((slots.delta[2] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bias_only_touches_expert_slots() {
        let c = cfg(4, 2, 3);
        let slots = assemble_slots(&[0.3, -0.2, 0.0, 1.0], &[0], &[2.0], &c, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(slots.pre[0], 0.3 + 0.1 + 0.25 * 2.0);
        assert_eq!(slots.pre[1], 0.0 + 0.2);
        assert_eq!(slots.pre[2], 1.0 + 0.3);
        assert!(assemble_slots(&[0.0; 4], &[2], &[0.0], &c, &[0.0; 3]).is_err());
    }

    #[test]
    fn no_bias_mode_zeroes_gamma() {
        let mut c = cfg(4, 2, 3);
        c.mode = RouterMode::NoBias;
        let slots = assemble_slots(&[0.3, -0.2, 0.0, 1.0], &[0], &[2.0], &c, &[0.0; 3]).unwrap();
        assert_eq!(slots.delta, slots.baseline);
    }

    #[test]
    fn balance_loss_examples() {
        let flat = Tensor::from_vec(&[2, 3], vec![0.7; 6]).unwrap();
        assert!(balance_loss(&flat, 1e-10).unwrap() < 1e-30);
        let one = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        assert!((balance_loss(&one, 1e-10).unwrap() - 1.0).abs() < 1e-9);
        let two = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 2.0, 1.0]).unwrap();
        let v1 = cv_squared(&[1.0, 0.0], 1e-10);
        let v2 = cv_squared(&[2.0, 1.0], 1e-10);
        assert!((balance_loss(&two, 1e-10).unwrap() - (v1 + v2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn diversity_examples() {
        let ortho = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(diversity_loss(&ortho).unwrap(), 0.0);
        let same = Tensor::from_vec(&[1, 2, 3], vec![1.0f64, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((diversity_loss(&same).unwrap() - 0.5).abs() < 1e-15);
        let zero = Tensor::from_vec(&[1, 2, 2], vec![0.0f64, 0.0, 1.0, 0.0]).unwrap();
        // The zero row contributes only its (missing) diagonal term.
        assert!((diversity_loss(&zero).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn fixed_and_random_modes() {
        let mut c = cfg(6, 2, 4);
        c.mode = RouterMode::Fixed;
        assert_eq!(select_experts(&[0.0, 9.0, 1.0, 3.0], &c, 1).unwrap(), vec![0, 1]);
        c.mode = RouterMode::Random;
        c.seed = 11;
        let a = select_experts(&[0.0f64; 4], &c, 5).unwrap();
        let b = select_experts(&[9.0f64, 8.0, 7.0, 6.0], &c, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn csv_rows_per_selection() {
        let rec = SelectionRecord {
            token_index: 1,
            expert_ids: vec![2, 0],
            scores: vec![0.5, 0.1, 0.9],
            bias: vec![0.01, -0.02],
            shared_ids: vec![3],
        };
        let mut buf = Vec::new();
        write_records_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("1,0,2,0.9,0.01"));
    }
}
