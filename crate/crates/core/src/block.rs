//! One routed SSM layer.
//!
//! Per token: packed input projection `[z ‖ xBC ‖ dt]`, depthwise causal
//! convolution over `xBC` followed by SiLU, routing of the `dt` columns into
//! `H` slots, one selective scan per slot with a single `B̄`/`C` group shared
//! by all slots, SiLU-gated RMS norm and the output projection.
//!
//! [`prefill`] processes a whole sequence and keeps the intermediates needed
//! by [`backward`]; [`decode_step`] advances an [`InferenceCache`] by one token
//! and reproduces the prefill numerics position by position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_backward, matmul_into, Rng, Tensor};
use crate::ops::{rms_norm_gated, rms_norm_gated_backward};
use crate::router::{
    assemble_slots, cv_squared, cv_squared_backward, diversity_token, diversity_token_backward, score_and_bias,
    select_experts, spectral_residual, RouterConfig, RouterMode, RouterParams, RunningMeanState, SelectionRecord,
    POSITION_SCALE,
};
use crate::scalar::Scalar;
use crate::ssm::{
    decay, scan_head_backward, scan_head_traced, scan_step, sigmoid, silu, silu_grad, HeadDiscretized, ScanTrace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    /// `P`.
    pub head_dim: usize,
    /// `N`.
    pub d_state: usize,
    pub d_conv: usize,
    pub router: RouterConfig,
}

impl BlockConfig {
    pub fn n_slots(&self) -> usize {
        self.router.n_active
    }

    /// `H·P`.
    pub fn inner(&self) -> usize {
        self.router.n_active * self.head_dim
    }

    /// `H·P + 2N`, the convolved channels.
    pub fn conv_channels(&self) -> usize {
        self.inner() + 2 * self.d_state
    }

    /// `2·H·P + 2N + M`.
    pub fn proj_width(&self) -> usize {
        2 * self.inner() + 2 * self.d_state + self.router.n_filters
    }

    fn dt_offset(&self) -> usize {
        2 * self.inner() + 2 * self.d_state
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        if self.d_model == 0 || self.head_dim == 0 || self.d_conv == 0 {
            return Err(Error::Config("d_model, head_dim and d_conv must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    /// `d × (2HP + 2N + M)`, columns packed as `[z ‖ xBC ‖ dt]`.
    pub w_in: Tensor<T>,
    /// `(HP + 2N) × d_conv`; tap `d_conv − 1` multiplies the current token.
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub dt_bias: Tensor<T>,
    pub router: RouterParams<T>,
    pub norm_w: Tensor<T>,
    /// `HP × d`.
    pub w_out: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let h = cfg.n_slots();
        Self {
            w_in: Tensor::zeros(&[cfg.d_model, cfg.proj_width()]),
            conv_w: Tensor::zeros(&[cfg.conv_channels(), cfg.d_conv]),
            conv_b: Tensor::zeros(&[cfg.conv_channels()]),
            a_log: Tensor::zeros(&[h]),
            d_skip: Tensor::zeros(&[h]),
            dt_bias: Tensor::zeros(&[h]),
            router: RouterParams::zeros(cfg.d_model, &cfg.router),
            norm_w: Tensor::zeros(&[cfg.inner()]),
            w_out: Tensor::zeros(&[cfg.inner(), cfg.d_model]),
        }
    }

    /// Mamba2-style initialization: decay rates `exp(a_log) ∈ [1, 16]`, initial
    /// step sizes log-uniform in `[1e-3, 1e-1]`, unit skip and norm weights.
    pub fn init(cfg: &BlockConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(cfg);
        let d = cfg.d_model as f64;
        let fill = |t: &mut Tensor<T>, rng: &mut Rng, std: f64| {
            t.data_mut().iter_mut().for_each(|v| *v = T::of(rng.normal() * std));
        };
        fill(&mut p.w_in, rng, 1.0 / d.sqrt());
        let bound = 1.0 / (cfg.d_conv as f64).sqrt();
        for v in p.conv_w.data_mut().iter_mut().chain(p.conv_b.data_mut()) {
            *v = T::of(rng.uniform_in(-bound, bound));
        }
        for v in p.a_log.data_mut() {
            *v = T::of(rng.uniform_in(1.0, 16.0).ln());
        }
        for v in p.dt_bias.data_mut() {
            let dt = rng.uniform_in(1e-3f64.ln(), 1e-1f64.ln()).exp();
            // Inverse softplus.
            *v = T::of(dt + (-(-dt).exp_m1()).ln());
        }
        p.d_skip.fill(T::one());
        fill(&mut p.router.w, rng, 0.02);
        p.norm_w.fill(T::one());
        fill(&mut p.w_out, rng, 1.0 / (cfg.inner() as f64).sqrt());
        p
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_in", &self.w_in),
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("dt_bias", &self.dt_bias),
            ("router_w", &self.router.w),
            ("norm_w", &self.norm_w),
            ("w_out", &self.w_out),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_in", &mut self.w_in),
            ("conv_w", &mut self.conv_w),
            ("conv_b", &mut self.conv_b),
            ("a_log", &mut self.a_log),
            ("d_skip", &mut self.d_skip),
            ("dt_bias", &mut self.dt_bias),
            ("router_w", &mut self.router.w),
            ("norm_w", &mut self.norm_w),
            ("w_out", &mut self.w_out),
        ]
    }

    pub fn check_shapes(&self, cfg: &BlockConfig) -> Result<()> {
        let want = Self::zeros(cfg);
        for ((name, have), (_, expect)) in self.named_tensors().into_iter().zip(want.named_tensors()) {
            if have.shape() != expect.shape() {
                return Err(Error::shape(
                    "BlockParams",
                    format!("{name} {:?}", expect.shape()),
                    format!("{:?}", have.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Streaming state of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceCache<T> {
    /// `(HP + 2N) × d_conv` pre-activation channel values; column `d_conv − 1`
    /// is the newest token.
    pub conv_state: Tensor<T>,
    /// `H × N × P`.
    pub ssm_state: Tensor<T>,
    pub mean_state: RunningMeanState<T>,
    /// 1-based position of the next token.
    pub t_pos: usize,
}

impl<T: Scalar> InferenceCache<T> {
    pub fn new(cfg: &BlockConfig) -> Self {
        Self {
            conv_state: Tensor::zeros(&[cfg.conv_channels(), cfg.d_conv]),
            ssm_state: Tensor::zeros(&[cfg.n_slots(), cfg.d_state, cfg.head_dim]),
            mean_state: RunningMeanState::new(cfg.d_model),
            t_pos: 1,
        }
    }

    fn check(&self, cfg: &BlockConfig) -> Result<()> {
        if self.conv_state.shape() != [cfg.conv_channels(), cfg.d_conv]
            || self.ssm_state.shape() != [cfg.n_slots(), cfg.d_state, cfg.head_dim]
            || self.mean_state.cumsum.len() != cfg.d_model
            || self.t_pos == 0
        {
            return Err(Error::shape(
                "InferenceCache",
                "cache built for this block configuration",
                format!("conv {:?}, ssm {:?}", self.conv_state.shape(), self.ssm_state.shape()),
            ));
        }
        Ok(())
    }
}

/// Router input (excluding the `dt` part) for the token at 1-based `t_pos`.
fn router_feature<T: Scalar>(mode: RouterMode, u_t: &[T], residual: &[T], t_pos: usize) -> Vec<T> {
    match mode {
        RouterMode::InputOnly => u_t.to_vec(),
        RouterMode::PositionBias => vec![T::of(t_pos as f64 / POSITION_SCALE); u_t.len()],
        _ => residual.to_vec(),
    }
}

/// Everything [`backward`] needs from a prefill pass.
#[derive(Clone, Debug)]
pub struct BlockTrace<T> {
    pub len: usize,
    /// Block input, `T × d`.
    pub u: Vec<T>,
    /// `T × (2HP + 2N + M)`.
    pub proj: Vec<T>,
    /// Convolution output before SiLU, `T × (HP + 2N)`.
    pub conv_out: Vec<T>,
    /// After SiLU.
    pub xbc: Vec<T>,
    /// Router inputs `[feature ‖ dt]`, `T × (d + M)`.
    pub features: Vec<T>,
    /// Router outputs `[scores ‖ bias]`, `T × (E + Q)`.
    pub routed: Vec<T>,
    /// Filter id per slot, `T × H`.
    pub ids: Vec<usize>,
    /// Step-size pre-activations, `T × H`.
    pub delta_pre: Vec<T>,
    /// `T × H`.
    pub delta: Vec<T>,
    /// Unbiased step sizes, `T × H`.
    pub delta_baseline: Vec<T>,
    pub heads: Vec<HeadDiscretized<T>>,
    /// Per-slot scan inputs, `T × P` each.
    pub head_x: Vec<Vec<T>>,
    pub scans: Vec<ScanTrace<T>>,
    /// Slot outputs, `T × HP`.
    pub y: Vec<T>,
    pub gated: Vec<T>,
    pub inv_rms: Vec<T>,
    pub normed: Vec<T>,
    /// `T × d`.
    pub out: Vec<T>,
    /// Sums over tokens.
    pub balance_sum: T,
    pub diversity_sum: T,
    pub records: Vec<SelectionRecord>,
}

impl<T: Scalar> BlockTrace<T> {
    /// Slot outputs reshaped as a `[T, H, P]` tensor.
    pub fn slot_outputs(&self, cfg: &BlockConfig) -> Tensor<T> {
        Tensor::from_vec(&[self.len, cfg.n_slots(), cfg.head_dim], self.y.clone()).expect("shape")
    }
}

/// Result of a whole-sequence forward pass.
#[derive(Clone, Debug)]
pub struct PrefillOutput<T> {
    /// `T × d`.
    pub out: Tensor<T>,
    pub balance: T,
    pub diversity: T,
    pub records: Vec<SelectionRecord>,
    pub cache: InferenceCache<T>,
}

pub fn prefill<T: Scalar>(u: &Tensor<T>, params: &BlockParams<T>, cfg: &BlockConfig) -> Result<PrefillOutput<T>> {
    let (trace, cache) = prefill_traced(u, params, cfg)?;
    let n = T::of(trace.len as f64);
    Ok(PrefillOutput {
        out: Tensor::from_vec(&[trace.len, cfg.d_model], trace.out)?,
        balance: trace.balance_sum / n,
        diversity: trace.diversity_sum / n,
        records: trace.records,
        cache,
    })
}

pub fn prefill_traced<T: Scalar>(
    u: &Tensor<T>,
    params: &BlockParams<T>,
    cfg: &BlockConfig,
) -> Result<(BlockTrace<T>, InferenceCache<T>)> {
    let d = cfg.d_model;
    if u.shape().len() != 2 || u.cols() != d {
        return Err(Error::shape(
            "block prefill input",
            format!("[T, {d}]"),
            format!("{:?}", u.shape()),
        ));
    }
    let t_len = u.rows();
    if t_len == 0 {
        return Err(Error::Empty("block prefill"));
    }
    let (hp, n, p, h) = (cfg.inner(), cfg.d_state, cfg.head_dim, cfg.n_slots());
    let (pw, cc, k) = (cfg.proj_width(), cfg.conv_channels(), cfg.d_conv);
    let (m, e) = (cfg.router.n_filters, cfg.router.n_experts());
    let rw = cfg.router.out_width();
    let dt_off = cfg.dt_offset();

    let mut proj = vec![T::zero(); t_len * pw];
    matmul_into(u.data(), t_len, d, params.w_in.data(), pw, &mut proj);
    check_finite(&proj, "block.in_proj")?;

    let mut conv_out = vec![T::zero(); t_len * cc];
    for t in 0..t_len {
        let row = &mut conv_out[t * cc..(t + 1) * cc];
        row.copy_from_slice(params.conv_b.data());
        for tap in 0..k {
            // Tap `tap` sees token t − (k − 1) + tap.
            let Some(src) = (t + tap).checked_sub(k - 1) else {
                continue;
            };
            let src_row = &proj[src * pw + hp..src * pw + hp + cc];
            for c in 0..cc {
                row[c] += params.conv_w.data()[c * k + tap] * src_row[c];
            }
        }
    }
    let xbc: Vec<T> = conv_out.iter().map(|&v| silu(v)).collect();

    let mut mean_state = RunningMeanState::new(d);
    let mut features = Vec::with_capacity(t_len * (d + m));
    for t in 0..t_len {
        let u_t = u.row(t);
        let r = spectral_residual(u_t, &mut mean_state)?;
        features.extend(router_feature(cfg.router.mode, u_t, &r, t + 1));
        features.extend_from_slice(&proj[t * pw + dt_off..(t + 1) * pw]);
    }
    let mut routed = vec![T::zero(); t_len * rw];
    matmul_into(&features, t_len, d + m, params.router.w.data(), rw, &mut routed);

    let mut ids = Vec::with_capacity(t_len * h);
    let mut delta_pre = Vec::with_capacity(t_len * h);
    let mut delta = Vec::with_capacity(t_len * h);
    let mut delta_baseline = Vec::with_capacity(t_len * h);
    let mut records = Vec::with_capacity(t_len);
    let mut balance_sum = T::zero();
    let eps = T::of(cfg.router.epsilon);
    for t in 0..t_len {
        let scores = &routed[t * rw..t * rw + e];
        let bias_raw = &routed[t * rw + e..(t + 1) * rw];
        let dt_base = &proj[t * pw + dt_off..(t + 1) * pw];
        let chosen = select_experts(scores, &cfg.router, t + 1)?;
        let slots = assemble_slots(dt_base, &chosen, bias_raw, &cfg.router, params.dt_bias.data())?;
        balance_sum += cv_squared(scores, eps);
        records.push(make_record(t + 1, &chosen, scores, bias_raw, &cfg.router));
        ids.extend_from_slice(&slots.ids);
        delta_pre.extend_from_slice(&slots.pre);
        delta.extend_from_slice(&slots.delta);
        delta_baseline.extend_from_slice(&slots.baseline);
    }
    check_finite(&delta, "block.delta")?;

    let mut b_all = Vec::with_capacity(t_len * n);
    let mut c_all = Vec::with_capacity(t_len * n);
    for t in 0..t_len {
        b_all.extend_from_slice(&xbc[t * cc + hp..t * cc + hp + n]);
        c_all.extend_from_slice(&xbc[t * cc + hp + n..t * cc + hp + 2 * n]);
    }
    let mut y = vec![T::zero(); t_len * hp];
    let mut heads = Vec::with_capacity(h);
    let mut head_x = Vec::with_capacity(h);
    let mut scans = Vec::with_capacity(h);
    let mut ssm_state = Tensor::zeros(&[h, n, p]);
    for j in 0..h {
        let a_log = params.a_log.data()[j];
        let slot_delta: Vec<T> = (0..t_len).map(|t| delta[t * h + j]).collect();
        let head = HeadDiscretized {
            a: slot_delta.iter().map(|&dl| decay(dl, a_log)).collect(),
            b: b_all.clone(),
            c: c_all.clone(),
            delta: slot_delta,
            d: params.d_skip.data()[j],
            state_dim: n,
        };
        let x: Vec<T> = (0..t_len)
            .flat_map(|t| xbc[t * cc + j * p..t * cc + (j + 1) * p].iter().copied())
            .collect();
        let scan = scan_head_traced(&head, &x, p)?;
        for t in 0..t_len {
            y[t * hp + j * p..t * hp + (j + 1) * p].copy_from_slice(&scan.y[t * p..(t + 1) * p]);
        }
        ssm_state.data_mut()[j * n * p..(j + 1) * n * p]
            .copy_from_slice(&scan.states[(t_len - 1) * n * p..t_len * n * p]);
        heads.push(head);
        head_x.push(x);
        scans.push(scan);
    }
    check_finite(&y, "block.y")?;

    let mut diversity_sum = T::zero();
    let mut gated = Vec::with_capacity(t_len * hp);
    let mut inv_rms = Vec::with_capacity(t_len);
    let mut normed = vec![T::zero(); t_len * hp];
    for t in 0..t_len {
        let yt = &y[t * hp..(t + 1) * hp];
        diversity_sum += diversity_token(yt, h, p);
        let z = &proj[t * pw..t * pw + hp];
        let (g, inv) = rms_norm_gated(yt, z, params.norm_w.data(), &mut normed[t * hp..(t + 1) * hp]);
        gated.extend(g);
        inv_rms.push(inv);
    }
    let mut out = vec![T::zero(); t_len * d];
    matmul_into(&normed, t_len, hp, params.w_out.data(), d, &mut out);
    check_finite(&out, "block.out")?;

    let mut conv_state = Tensor::zeros(&[cc, k]);
    for tap in 0..k {
        let Some(src) = (t_len + tap).checked_sub(k) else {
            continue;
        };
        for c in 0..cc {
            conv_state.data_mut()[c * k + tap] = proj[src * pw + hp + c];
        }
    }
    let cache = InferenceCache {
        conv_state,
        ssm_state,
        mean_state,
        t_pos: t_len + 1,
    };
    let trace = BlockTrace {
        len: t_len,
        u: u.data().to_vec(),
        proj,
        conv_out,
        xbc,
        features,
        routed,
        ids,
        delta_pre,
        delta,
        delta_baseline,
        heads,
        head_x,
        scans,
        y,
        gated,
        inv_rms,
        normed,
        out,
        balance_sum,
        diversity_sum,
        records,
    };
    Ok((trace, cache))
}

fn make_record<T: Scalar>(
    token_index: usize,
    chosen: &[usize],
    scores: &[T],
    bias_raw: &[T],
    cfg: &RouterConfig,
) -> SelectionRecord {
    let gamma = cfg.effective_gamma();
    SelectionRecord {
        token_index,
        expert_ids: chosen.to_vec(),
        scores: scores.iter().map(|v| v.as_f64()).collect(),
        bias: bias_raw.iter().map(|v| gamma * v.as_f64()).collect(),
        shared_ids: cfg.shared_ids().collect(),
    }
}

fn check_finite<T: Scalar>(v: &[T], name: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Output of one streaming step.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    /// Length `d`.
    pub out: Vec<T>,
    pub record: SelectionRecord,
    pub balance: T,
    pub diversity: T,
    /// Step sizes applied per slot, and their unbiased counterparts.
    pub delta: Vec<T>,
    pub delta_baseline: Vec<T>,
}

pub fn decode_step<T: Scalar>(
    u_t: &[T],
    params: &BlockParams<T>,
    cfg: &BlockConfig,
    cache: &mut InferenceCache<T>,
) -> Result<StepOutput<T>> {
    cache.check(cfg)?;
    let d = cfg.d_model;
    if u_t.len() != d {
        return Err(Error::shape("decode_step input", d, u_t.len()));
    }
    let (hp, n, p, h) = (cfg.inner(), cfg.d_state, cfg.head_dim, cfg.n_slots());
    let (pw, cc, k) = (cfg.proj_width(), cfg.conv_channels(), cfg.d_conv);
    let e = cfg.router.n_experts();
    let dt_off = cfg.dt_offset();
    let t_pos = cache.t_pos;

    let mut proj = vec![T::zero(); pw];
    matmul_into(u_t, 1, d, params.w_in.data(), pw, &mut proj);
    check_finite(&proj, "block.in_proj")?;

    let mut xbc = vec![T::zero(); cc];
    {
        let state = cache.conv_state.data_mut();
        for c in 0..cc {
            let row = &mut state[c * k..(c + 1) * k];
            row.rotate_left(1);
            row[k - 1] = proj[hp + c];
            let mut acc = params.conv_b.data()[c];
            for tap in 0..k {
                acc += params.conv_w.data()[c * k + tap] * row[tap];
            }
            xbc[c] = silu(acc);
        }
    }

    let r = spectral_residual(u_t, &mut cache.mean_state)?;
    let feature = router_feature(cfg.router.mode, u_t, &r, t_pos);
    let dt_base = &proj[dt_off..];
    let (scores, bias_raw) = score_and_bias(dt_base, &feature, &params.router, &cfg.router)?;
    let chosen = select_experts(&scores, &cfg.router, t_pos)?;
    let slots = assemble_slots(dt_base, &chosen, &bias_raw, &cfg.router, params.dt_bias.data())?;
    check_finite(&slots.delta, "block.delta")?;
    let balance = cv_squared(&scores, T::of(cfg.router.epsilon));
    debug_assert_eq!(scores.len(), e);

    let bvec = &xbc[hp..hp + n];
    let cvec = &xbc[hp + n..hp + 2 * n];
    let mut y = vec![T::zero(); hp];
    for j in 0..h {
        let a = decay(slots.delta[j], params.a_log.data()[j]);
        scan_step(
            &mut cache.ssm_state.data_mut()[j * n * p..(j + 1) * n * p],
            a,
            slots.delta[j],
            bvec,
            cvec,
            params.d_skip.data()[j],
            &xbc[j * p..(j + 1) * p],
            &mut y[j * p..(j + 1) * p],
        );
    }
    check_finite(&y, "block.y")?;
    let diversity = diversity_token(&y, h, p);
    let mut normed = vec![T::zero(); hp];
    rms_norm_gated(&y, &proj[..hp], params.norm_w.data(), &mut normed);
    let mut out = vec![T::zero(); d];
    matmul_into(&normed, 1, hp, params.w_out.data(), d, &mut out);
    check_finite(&out, "block.out")?;
    cache.t_pos += 1;

    Ok(StepOutput {
        out,
        record: make_record(t_pos, &chosen, &scores, &bias_raw, &cfg.router),
        balance,
        diversity,
        delta: slots.delta,
        delta_baseline: slots.baseline,
    })
}

/// Reverse pass through one block.
///
/// `d_out` is the upstream gradient of the block output (`T × d`).
/// `balance_scale` and `diversity_scale` multiply each token's auxiliary
/// loss term in the objective. Parameter gradients are accumulated into
/// `grads`; the gradient with respect to the block input is returned.
pub fn backward<T: Scalar>(
    trace: &BlockTrace<T>,
    params: &BlockParams<T>,
    cfg: &BlockConfig,
    d_out: &[T],
    balance_scale: T,
    diversity_scale: T,
    grads: &mut BlockParams<T>,
) -> Vec<T> {
    let t_len = trace.len;
    let d = cfg.d_model;
    let (hp, n, p, h) = (cfg.inner(), cfg.d_state, cfg.head_dim, cfg.n_slots());
    let (pw, cc, k) = (cfg.proj_width(), cfg.conv_channels(), cfg.d_conv);
    let (m, e, q) = (cfg.router.n_filters, cfg.router.n_experts(), cfg.router.n_selected());
    let rw = cfg.router.out_width();
    let dt_off = cfg.dt_offset();
    let gamma = T::of(cfg.router.effective_gamma());

    // Output projection.
    let mut d_normed = vec![T::zero(); t_len * hp];
    matmul_backward(
        &trace.normed,
        t_len,
        hp,
        params.w_out.data(),
        d,
        d_out,
        Some(&mut d_normed),
        Some(grads.w_out.data_mut()),
    );

    // Gated norm and diversity penalty.
    let mut d_proj = vec![T::zero(); t_len * pw];
    let mut dy = vec![T::zero(); t_len * hp];
    for t in 0..t_len {
        let rows = t * hp..(t + 1) * hp;
        let (dz, _) = d_proj[t * pw..(t + 1) * pw].split_at_mut(hp);
        rms_norm_gated_backward(
            &trace.y[rows.clone()],
            &trace.proj[t * pw..t * pw + hp],
            params.norm_w.data(),
            &trace.gated[rows.clone()],
            trace.inv_rms[t],
            &d_normed[rows.clone()],
            &mut dy[rows.clone()],
            dz,
            grads.norm_w.data_mut(),
        );
        if diversity_scale != T::zero() {
            diversity_token_backward(&trace.y[rows.clone()], h, p, diversity_scale, &mut dy[rows]);
        }
    }

    // Per-slot scans.
    let mut d_xbc = vec![T::zero(); t_len * cc];
    let mut d_delta = vec![T::zero(); t_len * h];
    for j in 0..h {
        let head = &trace.heads[j];
        let dyj: Vec<T> = (0..t_len)
            .flat_map(|t| dy[t * hp + j * p..t * hp + (j + 1) * p].iter().copied())
            .collect();
        let g = scan_head_backward(head, &trace.head_x[j], p, &trace.scans[j], &dyj);
        let a_log = params.a_log.data()[j];
        let rate = a_log.exp();
        grads.d_skip.data_mut()[j] += g.d;
        for t in 0..t_len {
            let (dl, a) = (head.delta[t], head.a[t]);
            // a = exp(−Δ·e^{a_log})
            d_delta[t * h + j] += g.delta[t] - g.a[t] * rate * a;
            grads.a_log.data_mut()[j] += -g.a[t] * dl * rate * a;
            let row = &mut d_xbc[t * cc..(t + 1) * cc];
            for c in 0..p {
                row[j * p + c] += g.x[t * p + c];
            }
            for i in 0..n {
                row[hp + i] += g.b[t * n + i];
                row[hp + n + i] += g.c[t * n + i];
            }
        }
    }

    // Slot assembly and router.
    let mut d_routed = vec![T::zero(); t_len * rw];
    let eps = T::of(cfg.router.epsilon);
    for t in 0..t_len {
        for j in 0..h {
            let d_pre = d_delta[t * h + j] * sigmoid(trace.delta_pre[t * h + j]);
            d_proj[t * pw + dt_off + trace.ids[t * h + j]] += d_pre;
            grads.dt_bias.data_mut()[j] += d_pre;
            if j < q {
                d_routed[t * rw + e + j] += gamma * d_pre;
            }
        }
        if balance_scale != T::zero() && e > 0 {
            let scores = &trace.routed[t * rw..t * rw + e];
            cv_squared_backward(scores, eps, balance_scale, &mut d_routed[t * rw..t * rw + e]);
        }
    }
    let mut d_features = vec![T::zero(); t_len * (d + m)];
    matmul_backward(
        &trace.features,
        t_len,
        d + m,
        params.router.w.data(),
        rw,
        &d_routed,
        Some(&mut d_features),
        Some(grads.router.w.data_mut()),
    );
    let mut du = vec![T::zero(); t_len * d];
    for t in 0..t_len {
        for i in 0..m {
            d_proj[t * pw + dt_off + i] += d_features[t * (d + m) + d + i];
        }
    }
    match cfg.router.mode {
        RouterMode::PositionBias => {}
        RouterMode::InputOnly => {
            for t in 0..t_len {
                for i in 0..d {
                    du[t * d + i] += d_features[t * (d + m) + i];
                }
            }
        }
        _ => {
            // r_t = u_t − (1/t)·Σ_{s≤t} u_s
            let mut suffix = vec![T::zero(); d];
            for t in (0..t_len).rev() {
                let inv = T::one() / T::of((t + 1) as f64);
                for i in 0..d {
                    let dr = d_features[t * (d + m) + i];
                    suffix[i] += dr * inv;
                    du[t * d + i] += dr - suffix[i];
                }
            }
        }
    }

    // SiLU and depthwise convolution.
    for t in 0..t_len {
        for c in 0..cc {
            let idx = t * cc + c;
            let dc = d_xbc[idx] * silu_grad(trace.conv_out[idx]);
            if dc == T::zero() {
                continue;
            }
            grads.conv_b.data_mut()[c] += dc;
            for tap in 0..k {
                let Some(src) = (t + tap).checked_sub(k - 1) else {
                    continue;
                };
                grads.conv_w.data_mut()[c * k + tap] += dc * trace.proj[src * pw + hp + c];
                d_proj[src * pw + hp + c] += dc * params.conv_w.data()[c * k + tap];
            }
        }
    }

    matmul_backward(
        &trace.u,
        t_len,
        d,
        params.w_in.data(),
        pw,
        &d_proj,
        Some(&mut du),
        Some(grads.w_in.data_mut()),
    );
    du
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg(mode: RouterMode) -> BlockConfig {
        BlockConfig {
            d_model: 6,
            head_dim: 3,
            d_state: 4,
            d_conv: 3,
            router: RouterConfig {
                n_filters: 5,
                n_shared: 1,
                n_active: 3,
                gamma: 0.25,
                epsilon: 0.5,
                mode,
                seed: 3,
                stream: 0,
            },
        }
    }

    fn random_params(cfg: &BlockConfig, seed: u64) -> BlockParams<f64> {
        let mut rng = Rng::new(seed);
        let mut p = BlockParams::init(cfg, &mut rng);
        // Spread the router and norm weights so every path is exercised.
        for v in p.router.w.data_mut() {
            *v = rng.normal() * 0.5;
        }
        for v in p.norm_w.data_mut().iter_mut().chain(p.d_skip.data_mut()) {
            *v = 1.0 + 0.3 * rng.normal();
        }
        for v in p.dt_bias.data_mut() {
            *v = rng.normal() * 0.5;
        }
        p
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = tiny_cfg(RouterMode::Spectral);
        let p = BlockParams::<f64>::zeros(&cfg);
        let u: Tensor<f64> = Rng::new(1).normal_tensor(&[5, 6]);
        let out = prefill(&u, &p, &cfg).unwrap();
        assert!(out.out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.balance, 0.0);
    }

    #[test]
    fn decode_matches_prefill() {
        for mode in [
            RouterMode::Spectral,
            RouterMode::Random,
            RouterMode::InputOnly,
            RouterMode::PositionBias,
        ] {
            let cfg = tiny_cfg(mode);
            let p = random_params(&cfg, 4);
            let u: Tensor<f64> = Rng::new(5).normal_tensor(&[7, 6]);
            let full = prefill(&u, &p, &cfg).unwrap();
            let mut cache = InferenceCache::new(&cfg);
            for t in 0..7 {
                let step = decode_step(u.row(t), &p, &cfg, &mut cache).unwrap();
                for (a, b) in step.out.iter().zip(full.out.row(t)) {
                    assert!((a - b).abs() < 1e-12, "{mode:?} t={t}");
                }
                assert_eq!(step.record, full.records[t]);
            }
            assert_eq!(cache.t_pos, 8);
            for (a, b) in cache.ssm_state.data().iter().zip(full.cache.ssm_state.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(cache.conv_state, full.cache.conv_state);
        }
    }

    #[test]
    fn prefill_cache_continues_stream() {
        let cfg = tiny_cfg(RouterMode::Spectral);
        let p = random_params(&cfg, 8);
        let u: Tensor<f64> = Rng::new(9).normal_tensor(&[2, 6]);
        let both = prefill(&u, &p, &cfg).unwrap();
        let first = Tensor::from_vec(&[1, 6], u.row(0).to_vec()).unwrap();
        let mut cache = prefill(&first, &p, &cfg).unwrap().cache;
        let step = decode_step(u.row(1), &p, &cfg, &mut cache).unwrap();
        for (a, b) in step.out.iter().zip(both.out.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_shape_mismatch_is_rejected() {
        let cfg = tiny_cfg(RouterMode::Spectral);
        let mut other = cfg.clone();
        other.d_state = 2;
        let p = BlockParams::<f64>::zeros(&cfg);
        let mut cache = InferenceCache::new(&other);
        assert!(decode_step(&[0.0; 6], &p, &cfg, &mut cache).is_err());
    }

    #[test]
    fn baseline_mode_routes_every_filter() {
        let mut cfg = tiny_cfg(RouterMode::Spectral);
        cfg.router.n_active = 5;
        cfg.router.n_shared = 5;
        let p = random_params(&cfg, 2);
        let u: Tensor<f64> = Rng::new(3).normal_tensor(&[4, 6]);
        let (trace, _) = prefill_traced(&u, &p, &cfg).unwrap();
        for t in 0..4 {
            assert_eq!(&trace.ids[t * 5..(t + 1) * 5], &[0, 1, 2, 3, 4]);
            assert!(trace.records[t].expert_ids.is_empty());
        }
    }

    fn objective(u: &Tensor<f64>, p: &BlockParams<f64>, cfg: &BlockConfig, up: &[f64], lb: f64, ld: f64) -> f64 {
        let (trace, _) = prefill_traced(u, p, cfg).unwrap();
        let main: f64 = trace.out.iter().zip(up).map(|(a, b)| a * b).sum();
        main + lb * trace.balance_sum + ld * trace.diversity_sum
    }

    #[test]
    fn backward_matches_finite_differences() {
        for mode in [
            RouterMode::Spectral,
            RouterMode::InputOnly,
            RouterMode::PositionBias,
            RouterMode::Fixed,
        ] {
            let cfg = tiny_cfg(mode);
            let p = random_params(&cfg, 21);
            let mut rng = Rng::new(22);
            let u: Tensor<f64> = rng.normal_tensor(&[6, 6]);
            let up: Vec<f64> = (0..36).map(|_| rng.normal()).collect();
            let (lb, ld) = (0.3, 0.7);
            let (trace, _) = prefill_traced(&u, &p, &cfg).unwrap();
            let mut grads = BlockParams::zeros(&cfg);
            let du = backward(&trace, &p, &cfg, &up, lb, ld, &mut grads);
            let h = 1e-6;
            let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
                let num = (plus - minus) / (2.0 * h);
                let err = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-2);
                assert!(err < 1e-5, "{mode:?} {what}: analytic {analytic} numeric {num}");
            };
            for i in 0..u.len() {
                let mut a = u.clone();
                a.data_mut()[i] += h;
                let mut b = u.clone();
                b.data_mut()[i] -= h;
                check(
                    du[i],
                    objective(&a, &p, &cfg, &up, lb, ld),
                    objective(&b, &p, &cfg, &up, lb, ld),
                    "u",
                );
            }
            let names: Vec<&str> = p.named_tensors().iter().map(|(n, _)| *n).collect();
            for (ti, name) in names.iter().enumerate() {
                let len = p.named_tensors()[ti].1.len();
                for i in 0..len {
                    let mut a = p.clone();
                    a.named_tensors_mut()[ti].1.data_mut()[i] += h;
                    let mut b = p.clone();
                    b.named_tensors_mut()[ti].1.data_mut()[i] -= h;
                    let analytic = grads.named_tensors()[ti].1.data()[i];
                    check(
                        analytic,
                        objective(&u, &a, &cfg, &up, lb, ld),
                        objective(&u, &b, &cfg, &up, lb, ld),
                        name,
                    );
                }
            }
        }
    }
}
