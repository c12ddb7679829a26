//! Embedding, pre-norm residual stack of routed blocks, output head, and the
//! parameter and FLOPs calculators.

use serde::{Deserialize, Serialize};

use crate::block::{self, BlockConfig, BlockParams, BlockTrace, InferenceCache};
use crate::error::{Error, Result};
use crate::numerics::{matmul_into, Rng, Tensor};
use crate::ops::rms_norm;
use crate::router::{RouterConfig, RouterMode, SelectionRecord};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Total filters `M`.
    pub n_filters: usize,
    /// Active slots per token `H`.
    pub n_active: usize,
    /// Shared filters `S`.
    pub n_shared: usize,
    /// `P`.
    pub head_dim: usize,
    /// `N`.
    pub d_state: usize,
    pub d_conv: usize,
    pub n_layer: usize,
    pub vocab_size: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub router_mode: RouterMode,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// Seed of the per-layer streams used by random routing.
    #[serde(default)]
    pub route_seed: u64,
}

impl ModelConfig {
    /// The 370M configuration: `d = 1024, M = 32, H = 16, S = 8, P = 64,
    /// N = 128, d_conv = 4`, 48 layers.
    pub fn paper_370m() -> Self {
        Self {
            d_model: 1024,
            n_filters: 32,
            n_active: 16,
            n_shared: 8,
            head_dim: 64,
            d_state: 128,
            d_conv: 4,
            n_layer: 48,
            vocab_size: 50277,
            gamma: 1.0,
            lambda1: 1e-3,
            lambda2: 1e-3,
            epsilon: 1e-6,
            router_mode: RouterMode::Spectral,
            tie_embeddings: false,
            route_seed: 0,
        }
    }

    /// Two-layer model small enough for exhaustive gradient checks.
    pub fn desk_tiny() -> Self {
        Self {
            d_model: 16,
            n_filters: 4,
            n_active: 2,
            n_shared: 1,
            head_dim: 8,
            d_state: 8,
            d_conv: 4,
            n_layer: 2,
            vocab_size: 64,
            gamma: 1.0,
            lambda1: 1e-3,
            lambda2: 1e-3,
            epsilon: 1e-2,
            router_mode: RouterMode::Spectral,
            tie_embeddings: false,
            route_seed: 0,
        }
    }

    pub fn router(&self, layer: usize) -> RouterConfig {
        RouterConfig {
            n_filters: self.n_filters,
            n_shared: self.n_shared,
            n_active: self.n_active,
            gamma: self.gamma,
            epsilon: self.epsilon,
            mode: self.router_mode,
            seed: self.route_seed,
            stream: layer as u64,
        }
    }

    pub fn block(&self, layer: usize) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            head_dim: self.head_dim,
            d_state: self.d_state,
            d_conv: self.d_conv,
            router: self.router(layer),
        }
    }

    /// The matching baseline: every filter active, nothing routed.
    pub fn baseline(&self) -> Self {
        Self {
            n_active: self.n_filters,
            n_shared: self.n_filters,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".into()));
        }
        self.block(0).validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// Pre-norm weight, length `d`.
    pub norm: Tensor<T>,
    pub block: BlockParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `V × d`.
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `d × V`; `None` when tied to the transposed input embedding.
    pub head: Option<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            embed: Tensor::zeros(&[cfg.vocab_size, d]),
            layers: (0..cfg.n_layer)
                .map(|l| LayerParams {
                    norm: Tensor::zeros(&[d]),
                    block: BlockParams::zeros(&cfg.block(l)),
                })
                .collect(),
            final_norm: Tensor::zeros(&[d]),
            head: (!cfg.tie_embeddings).then(|| Tensor::zeros(&[d, cfg.vocab_size])),
        }
    }

    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let root = Rng::new(seed);
        let d = cfg.d_model;
        let mut rng = root.fork(0);
        let mut p = Self::zeros(cfg);
        for v in p.embed.data_mut() {
            *v = T::of(rng.normal());
        }
        for (l, layer) in p.layers.iter_mut().enumerate() {
            layer.norm.fill(T::one());
            layer.block = BlockParams::init(&cfg.block(l), &mut root.fork(1 + l as u64));
        }
        p.final_norm.fill(T::one());
        if let Some(head) = &mut p.head {
            let mut rng = root.fork(u64::MAX);
            let std = 1.0 / (d as f64).sqrt();
            for v in head.data_mut() {
                *v = T::of(rng.normal() * std);
            }
        }
        p
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.norm"), &layer.norm));
            for (name, t) in layer.block.named_tensors() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(head) = &self.head {
            out.push(("head".to_string(), head));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.norm"), &mut layer.norm));
            for (name, t) in layer.block.named_tensors_mut() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(head) = &mut self.head {
            out.push(("head".to_string(), head));
        }
        out
    }

    pub fn n_elements(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            embed: self.embed.cast(),
            layers: Vec::with_capacity(self.layers.len()),
            final_norm: self.final_norm.cast(),
            head: self.head.as_ref().map(|h| h.cast()),
        };
        for layer in &self.layers {
            let b = &layer.block;
            out.layers.push(LayerParams {
                norm: layer.norm.cast(),
                block: BlockParams {
                    w_in: b.w_in.cast(),
                    conv_w: b.conv_w.cast(),
                    conv_b: b.conv_b.cast(),
                    a_log: b.a_log.cast(),
                    d_skip: b.d_skip.cast(),
                    dt_bias: b.dt_bias.cast(),
                    router: crate::router::RouterParams { w: b.router.w.cast() },
                    norm_w: b.norm_w.cast(),
                    w_out: b.w_out.cast(),
                },
            });
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

/// Auxiliary losses, each averaged over tokens and then over layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxLosses {
    pub balance: f64,
    pub diversity: f64,
}

/// Batched forward result.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `B × T × V`.
    pub logits: Tensor<T>,
    pub aux: AuxLosses,
    /// `records[b][l]` holds one record per token.
    pub records: Vec<Vec<Vec<SelectionRecord>>>,
}

/// Intermediates of one sequence, consumed by the trainer's backward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace<T> {
    pub ids: Vec<usize>,
    /// Residual stream entering each layer, plus the stream after the last
    /// layer: `L + 1` entries of `T × d`.
    pub streams: Vec<Vec<T>>,
    /// Pre-norm outputs per layer and their inverse RMS per token.
    pub normed: Vec<Vec<T>>,
    pub inv_rms: Vec<Vec<T>>,
    pub blocks: Vec<BlockTrace<T>>,
    /// Final-norm output and inverse RMS.
    pub final_normed: Vec<T>,
    pub final_inv_rms: Vec<T>,
    /// `T × V`.
    pub logits: Vec<T>,
}

impl<T: Scalar> ModelTrace<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per-layer token-averaged losses, averaged over layers.
    pub fn aux(&self) -> AuxLosses {
        if self.blocks.is_empty() || self.ids.is_empty() {
            return AuxLosses::default();
        }
        let norm = (self.blocks.len() * self.ids.len()) as f64;
        AuxLosses {
            balance: self.blocks.iter().map(|b| b.balance_sum.as_f64()).sum::<f64>() / norm,
            diversity: self.blocks.iter().map(|b| b.diversity_sum.as_f64()).sum::<f64>() / norm,
        }
    }
}

/// Streaming state of a whole model.
#[derive(Clone, Debug)]
pub struct DecodeState<T> {
    pub caches: Vec<InferenceCache<T>>,
}

fn norm_rows<T: Scalar>(x: &[T], w: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let inv = x
        .chunks(d)
        .zip(out.chunks_mut(d))
        .map(|(row, o)| rms_norm(row, w, o))
        .collect();
    (out, inv)
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        cfg.validate()?;
        let want = ModelParams::<T>::zeros(&cfg);
        let have = params.named_tensors();
        let expect = want.named_tensors();
        if have.len() != expect.len() {
            return Err(Error::shape(
                "Model::new",
                format!("{} tensors", expect.len()),
                have.len(),
            ));
        }
        for ((hn, ht), (en, et)) in have.iter().zip(&expect) {
            if hn != en || ht.shape() != et.shape() {
                return Err(Error::shape(
                    "Model::new",
                    format!("{en} {:?}", et.shape()),
                    format!("{hn} {:?}", ht.shape()),
                ));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg, seed);
        Ok(Self { cfg, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::OutOfVocab {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_row(&self, id: usize) -> &[T] {
        self.params.embed.row(id)
    }

    fn head_into(&self, x: &[T], rows: usize, out: &mut [T]) {
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        match &self.params.head {
            Some(head) => matmul_into(x, rows, d, head.data(), v, out),
            None => {
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    for (k, o) in out[r * v..(r + 1) * v].iter_mut().enumerate() {
                        *o += crate::numerics::dot(xr, self.params.embed.row(k));
                    }
                }
            }
        }
    }

    /// Single-sequence forward pass keeping every intermediate.
    pub fn forward_traced(&self, ids: &[usize]) -> Result<(ModelTrace<T>, DecodeState<T>)> {
        if ids.is_empty() {
            return Err(Error::Empty("model forward"));
        }
        self.check_ids(ids)?;
        let (d, v, t_len) = (self.cfg.d_model, self.cfg.vocab_size, ids.len());
        let mut x: Vec<T> = ids.iter().flat_map(|&id| self.embed_row(id).iter().copied()).collect();
        let mut streams = Vec::with_capacity(self.cfg.n_layer + 1);
        let mut normed = Vec::with_capacity(self.cfg.n_layer);
        let mut inv_rms = Vec::with_capacity(self.cfg.n_layer);
        let mut blocks = Vec::with_capacity(self.cfg.n_layer);
        let mut caches = Vec::with_capacity(self.cfg.n_layer);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let (nx, inv) = norm_rows(&x, layer.norm.data(), d);
            let input = Tensor::from_vec(&[t_len, d], nx)?;
            let (trace, cache) = block::prefill_traced(&input, &layer.block, &self.cfg.block(l))?;
            let mut next = x.clone();
            for (a, &b) in next.iter_mut().zip(&trace.out) {
                *a += b;
            }
            streams.push(std::mem::replace(&mut x, next));
            normed.push(input.into_data());
            inv_rms.push(inv);
            blocks.push(trace);
            caches.push(cache);
        }
        let (final_normed, final_inv_rms) = norm_rows(&x, self.params.final_norm.data(), d);
        streams.push(x);
        let mut logits = vec![T::zero(); t_len * v];
        self.head_into(&final_normed, t_len, &mut logits);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let trace = ModelTrace {
            ids: ids.to_vec(),
            streams,
            normed,
            inv_rms,
            blocks,
            final_normed,
            final_inv_rms,
            logits,
        };
        Ok((trace, DecodeState { caches }))
    }

    /// Batched forward. Every sequence in `batch` must have the same length.
    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<ForwardOutput<T>> {
        let t_len = batch.first().map(Vec::len).ok_or(Error::Empty("model forward"))?;
        if let Some(bad) = batch.iter().find(|s| s.len() != t_len) {
            return Err(Error::shape("model forward batch", t_len, bad.len()));
        }
        let v = self.cfg.vocab_size;
        let mut logits = Vec::with_capacity(batch.len() * t_len * v);
        let mut aux = AuxLosses::default();
        let mut records = Vec::with_capacity(batch.len());
        for ids in batch {
            let (trace, _) = self.forward_traced(ids)?;
            let a = trace.aux();
            aux.balance += a.balance / batch.len() as f64;
            aux.diversity += a.diversity / batch.len() as f64;
            records.push(trace.blocks.iter().map(|b| b.records.clone()).collect());
            logits.extend_from_slice(&trace.logits);
        }
        Ok(ForwardOutput {
            logits: Tensor::from_vec(&[batch.len(), t_len, v], logits)?,
            aux,
            records,
        })
    }

    pub fn new_state(&self) -> DecodeState<T> {
        DecodeState {
            caches: (0..self.cfg.n_layer)
                .map(|l| InferenceCache::new(&self.cfg.block(l)))
                .collect(),
        }
    }

    /// Process a prompt, returning the logits of its last position.
    pub fn prefill(&self, ids: &[usize]) -> Result<(Vec<T>, DecodeState<T>)> {
        let (trace, state) = self.forward_traced(ids)?;
        let v = self.cfg.vocab_size;
        let last = trace.logits[(ids.len() - 1) * v..].to_vec();
        Ok((last, state))
    }

    /// Advance the stream by one token and return its logits.
    pub fn step(&self, id: usize, state: &mut DecodeState<T>) -> Result<StepLogits<T>> {
        self.check_ids(&[id])?;
        if state.caches.len() != self.cfg.n_layer {
            return Err(Error::shape("DecodeState", self.cfg.n_layer, state.caches.len()));
        }
        let d = self.cfg.d_model;
        let mut x = self.embed_row(id).to_vec();
        let mut records = Vec::with_capacity(self.cfg.n_layer);
        let mut deltas = Vec::with_capacity(self.cfg.n_layer);
        for (l, (layer, cache)) in self.params.layers.iter().zip(&mut state.caches).enumerate() {
            let mut nx = vec![T::zero(); d];
            rms_norm(&x, layer.norm.data(), &mut nx);
            let out = block::decode_step(&nx, &layer.block, &self.cfg.block(l), cache)?;
            for (a, &b) in x.iter_mut().zip(&out.out) {
                *a += b;
            }
            records.push(out.record);
            deltas.push((out.delta, out.delta_baseline));
        }
        let mut nx = vec![T::zero(); d];
        rms_norm(&x, self.params.final_norm.data(), &mut nx);
        let mut logits = vec![T::zero(); self.cfg.vocab_size];
        self.head_into(&nx, 1, &mut logits);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(StepLogits {
            logits,
            records,
            deltas,
        })
    }

    /// Greedy continuation of `prompt` by `n` tokens.
    pub fn generate_greedy(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        let (mut logits, mut state) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < n {
                logits = self.step(next, &mut state)?.logits;
            }
        }
        Ok(out)
    }

    /// Sampled continuation at `temperature`; zero falls back to greedy.
    pub fn generate_sampled(&self, prompt: &[usize], n: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        if temperature <= 0.0 {
            return self.generate_greedy(prompt, n);
        }
        let (mut logits, mut state) = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let probs = softmax(&logits.iter().map(|l| l.as_f64() / temperature).collect::<Vec<_>>());
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut next = probs.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    next = k;
                    break;
                }
            }
            out.push(next);
            if i + 1 < n {
                logits = self.step(next, &mut state)?.logits;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct StepLogits<T> {
    pub logits: Vec<T>,
    pub records: Vec<SelectionRecord>,
    /// Per layer: applied step sizes and their unbiased counterparts.
    pub deltas: Vec<(Vec<T>, Vec<T>)>,
}

/// Index of the largest value, the first on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// One row of the component breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub component: String,
    pub baseline: u64,
    pub hades: u64,
}

/// Counts from the closed-form table, per layer unless noted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaCounts {
    /// `P(3d + d_conv + 1) + d + 3`.
    pub per_filter: u64,
    /// `N(2d + d_conv)`.
    pub shared_term: u64,
    /// `(d + M)(M + H − 2S)`, without the trailing `+2`.
    pub router_added: u64,
    pub baseline_mixer: u64,
    pub hades_mixer: u64,
    /// `(M − H)·per_filter − router_added`; negative when routing costs more
    /// than the dropped filters.
    pub reduction: i64,
    /// `reduction − 2`, reading the `+2` literally.
    pub reduction_with_constant: i64,
    pub baseline_mixer_total: u64,
    pub hades_mixer_total: u64,
    pub reduction_total: i64,
    pub reduction_total_with_constant: i64,
    pub rows: Vec<ComponentRow>,
}

/// Counts from an instantiated model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructedCounts {
    pub total: u64,
    pub embeddings: u64,
    pub mixer_per_layer: u64,
    pub mixer_total: u64,
    pub router_per_layer: u64,
    pub baseline_total: u64,
    pub baseline_mixer_per_layer: u64,
    pub reduction_total: i64,
    pub tensors: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub formula: FormulaCounts,
    pub constructed: ConstructedCounts,
    /// Externally quoted baseline size the formula reduction is subtracted from.
    pub reference_total: Option<u64>,
    pub reference_after_reduction: Option<i64>,
}

impl ParamReport {
    pub fn with_reference(mut self, total: u64) -> Self {
        self.reference_total = Some(total);
        self.reference_after_reduction = Some(total as i64 - self.formula.reduction_total);
        self
    }
}

fn constructed_counts(cfg: &ModelConfig) -> (u64, u64, u64, Vec<(String, u64)>) {
    let p = ModelParams::<f32>::zeros(cfg);
    let tensors: Vec<(String, u64)> = p
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len() as u64))
        .collect();
    let total = tensors.iter().map(|(_, n)| n).sum();
    let mixer = p
        .layers
        .first()
        .map(|l| l.block.named_tensors().iter().map(|(_, t)| t.len() as u64).sum())
        .unwrap_or(0);
    let router = p.layers.first().map(|l| l.block.router.w.len() as u64).unwrap_or(0);
    (total, mixer, router, tensors)
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let u = |x: usize| x as u64;
    let (d, m, h, s) = (u(cfg.d_model), u(cfg.n_filters), u(cfg.n_active), u(cfg.n_shared));
    let (p, n, k, l) = (u(cfg.head_dim), u(cfg.d_state), u(cfg.d_conv), u(cfg.n_layer));
    let per_filter = p * (3 * d + k + 1) + d + 3;
    let shared_term = n * (2 * d + k);
    let router_added = (d + m) * (m + h - 2 * s);
    let routed = h < m;
    let constant = if routed { 2 } else { 0 };
    let baseline_mixer = m * per_filter + shared_term;
    let hades_mixer = h * per_filter + shared_term + router_added + constant;
    let reduction = ((m - h) * per_filter) as i64 - router_added as i64;
    let rows = vec![
        ComponentRow {
            component: "in_proj".into(),
            baseline: d * (2 * m * p + 2 * n + m),
            hades: d * (2 * h * p + 2 * n + m),
        },
        ComponentRow {
            component: "conv1d".into(),
            baseline: (m * p + n) * k,
            hades: (h * p + n) * k,
        },
        ComponentRow {
            component: "out_proj".into(),
            baseline: m * p * d,
            hades: h * p * d,
        },
        ComponentRow {
            component: "rms_norm".into(),
            baseline: m * p,
            hades: h * p,
        },
        ComponentRow {
            component: "ssm_params".into(),
            baseline: 3 * m,
            hades: 3 * h,
        },
        ComponentRow {
            component: "router".into(),
            baseline: 0,
            hades: router_added + constant,
        },
    ];
    let formula = FormulaCounts {
        per_filter,
        shared_term,
        router_added,
        baseline_mixer,
        hades_mixer,
        reduction,
        reduction_with_constant: reduction - constant as i64,
        baseline_mixer_total: l * baseline_mixer,
        hades_mixer_total: l * hades_mixer,
        reduction_total: l as i64 * reduction,
        reduction_total_with_constant: l as i64 * (reduction - constant as i64),
        rows,
    };
    let (total, mixer, router, tensors) = constructed_counts(cfg);
    let (baseline_total, baseline_mixer_c, _, _) = constructed_counts(&cfg.baseline());
    let embeddings = tensors
        .iter()
        .filter(|(name, _)| name == "embed" || name == "head")
        .map(|(_, n)| n)
        .sum();
    let constructed = ConstructedCounts {
        total,
        embeddings,
        mixer_per_layer: mixer,
        mixer_total: l * mixer,
        router_per_layer: router,
        baseline_total,
        baseline_mixer_per_layer: baseline_mixer_c,
        reduction_total: baseline_total as i64 - total as i64,
        tensors,
    };
    Ok(ParamReport {
        formula,
        constructed,
        reference_total: None,
        reference_after_reduction: None,
    })
}

/// Cost constants of the FLOPs model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopConstants {
    pub c_rms: f64,
    pub c_top: f64,
    /// Scaled so `c_ssd·N·log₂N` equals the recurrence's `5NP` per-filter
    /// operations at `N = P = 16`.
    pub c_ssd: f64,
}

impl Default for FlopConstants {
    fn default() -> Self {
        Self {
            c_rms: 4.0,
            c_top: 2.0,
            c_ssd: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub operation: String,
    pub baseline: f64,
    pub hades: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub constants: FlopConstants,
    /// Per-token mixer costs.
    pub mixer: Vec<FlopRow>,
    /// Per-token routing costs, HADES only.
    pub routing: Vec<(String, f64)>,
    pub baseline_per_token: f64,
    pub hades_mixer_per_token: f64,
    pub routing_per_token: f64,
    pub hades_per_token: f64,
    /// Per layer, over the whole sequence.
    pub baseline_total: f64,
    pub hades_total: f64,
    pub ratio: f64,
    /// Routing cost as a fraction of the HADES total.
    pub routing_share: f64,
}

pub fn count_flops(cfg: &ModelConfig, seq_len: usize) -> Result<FlopReport> {
    cfg.validate()?;
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    let c = FlopConstants::default();
    let f = |x: usize| x as f64;
    let (d, m, h, s) = (f(cfg.d_model), f(cfg.n_filters), f(cfg.n_active), f(cfg.n_shared));
    let (p, n, k) = (f(cfg.head_dim), f(cfg.d_state), f(cfg.d_conv));
    let e = m - s;
    let nlogn = if n > 1.0 { n * n.log2() } else { 0.0 };
    let row = |name: &str, per: &dyn Fn(f64) -> f64| FlopRow {
        operation: name.into(),
        baseline: per(m),
        hades: per(h),
    };
    let mixer = vec![
        row("in_projection", &|x| 2.0 * d * (2.0 * x * p + 2.0 * n + m)),
        row("conv1d", &|x| 2.0 * (x * p + n) * k),
        row("out_projection", &|x| 2.0 * x * p * d),
        row("rms_norm", &|x| c.c_rms * x * p),
        row("ssd", &|x| c.c_ssd * x * nlogn),
    ];
    let routed = cfg.n_active < cfg.n_filters;
    let routing = if routed {
        vec![
            ("residual".to_string(), 2.0 * d),
            ("score_projection".to_string(), 2.0 * (d + m) * (m + h - 2.0 * s)),
            ("top_q".to_string(), if e > 1.0 { c.c_top * e * e.log2() } else { 0.0 }),
            ("spectral_bias".to_string(), 2.0 * h),
            ("delta_modulation".to_string(), 2.0 * h),
        ]
    } else {
        Vec::new()
    };
    let baseline_per_token: f64 = mixer.iter().map(|r| r.baseline).sum();
    let hades_mixer_per_token: f64 = mixer.iter().map(|r| r.hades).sum();
    let routing_per_token: f64 = routing.iter().map(|(_, v)| v).sum();
    let hades_per_token = hades_mixer_per_token + routing_per_token;
    let t = f(seq_len);
    Ok(FlopReport {
        seq_len,
        constants: c,
        mixer,
        routing,
        baseline_per_token,
        hades_mixer_per_token,
        routing_per_token,
        hades_per_token,
        baseline_total: t * baseline_per_token,
        hades_total: t * hades_per_token,
        ratio: hades_per_token / baseline_per_token,
        routing_share: routing_per_token / hades_per_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_filters: 4,
            n_active: 2,
            n_shared: 1,
            head_dim: 4,
            d_state: 4,
            d_conv: 2,
            n_layer: 1,
            vocab_size: 11,
            ..ModelConfig::desk_tiny()
        }
    }

    #[test]
    fn paper_reduction() {
        let r = count_params(&ModelConfig::paper_370m()).unwrap();
        assert_eq!(r.formula.per_filter, 197_955);
        assert_eq!(r.formula.reduction_total, 150_407_424);
        assert_eq!(r.formula.reduction_total_with_constant, 150_407_328);
        let r = r.with_reference(368_346_624);
        assert_eq!(r.reference_after_reduction, Some(217_939_200));
    }

    #[test]
    fn baseline_config_has_no_reduction() {
        let cfg = ModelConfig::paper_370m().baseline();
        let r = count_params(&cfg).unwrap();
        assert_eq!(r.formula.router_added, 0);
        assert_eq!(r.formula.reduction_total, 0);
        assert_eq!(r.formula.hades_mixer, r.formula.baseline_mixer);
        assert_eq!(r.constructed.router_per_layer, 0);
        assert_eq!(r.constructed.reduction_total, 0);
    }

    #[test]
    fn constructed_counts_every_element() {
        let cfg = tiny();
        let r = count_params(&cfg).unwrap();
        let p = ModelParams::<f64>::zeros(&cfg);
        assert_eq!(r.constructed.total, p.n_elements() as u64);
    }

    #[test]
    fn flops_paper_ratio() {
        let r = count_flops(&ModelConfig::paper_370m(), 2048).unwrap();
        assert!((r.ratio - 0.5).abs() < 0.05, "{}", r.ratio);
        assert!(r.routing_share < 0.05);
        let inproj = &r.mixer[0];
        assert_eq!(inproj.baseline - inproj.hades, 4.0 * 1024.0 * 64.0 * 16.0);
    }

    #[test]
    fn flops_without_reduction() {
        let r = count_flops(&ModelConfig::paper_370m().baseline(), 16).unwrap();
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn empty_stack_is_norm_then_head() {
        let cfg = ModelConfig { n_layer: 0, ..tiny() };
        let m = Model::<f64>::init(cfg.clone(), 3).unwrap();
        let ids = [1, 5, 2];
        let out = m.forward(&[ids.to_vec()]).unwrap();
        for (t, &id) in ids.iter().enumerate() {
            let mut nx = vec![0.0; 8];
            rms_norm(m.params.embed.row(id), m.params.final_norm.data(), &mut nx);
            let head = m.params.head.as_ref().unwrap();
            for v in 0..cfg.vocab_size {
                let want: f64 = (0..8).map(|i| nx[i] * head.at(i, v)).sum();
                assert!((out.logits.data()[t * 11 + v] - want).abs() < 1e-12);
            }
        }
        assert_eq!(out.aux, AuxLosses::default());
    }

    #[test]
    fn zero_blocks_pass_the_residual_through() {
        let cfg = tiny();
        let mut m = Model::<f64>::init(cfg.clone(), 3).unwrap();
        for layer in &mut m.params.layers {
            layer.block = BlockParams::zeros(&cfg.block(0));
        }
        let empty = Model {
            cfg: ModelConfig {
                n_layer: 0,
                ..cfg.clone()
            },
            params: ModelParams {
                layers: Vec::new(),
                ..m.params.clone()
            },
        };
        let ids = vec![vec![0, 3, 10, 4]];
        assert_eq!(m.forward(&ids).unwrap().logits, empty.forward(&ids).unwrap().logits);
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let m = Model::<f64>::init(tiny(), 1).unwrap();
        assert!(matches!(
            m.forward(&[vec![0, 11]]),
            Err(Error::OutOfVocab { id: 11, .. })
        ));
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        let m = Model::<f64>::init(ModelConfig { n_layer: 2, ..tiny() }, 9).unwrap();
        let a = m.forward(&[vec![1, 2, 3, 4, 5]]).unwrap().logits;
        let b = m.forward(&[vec![1, 2, 3, 9, 0]]).unwrap().logits;
        assert_eq!(&a.data()[..3 * 11], &b.data()[..3 * 11]);
        assert_ne!(&a.data()[3 * 11..], &b.data()[3 * 11..]);
    }

    #[test]
    fn stepping_matches_forward() {
        let m = Model::<f64>::init(ModelConfig { n_layer: 2, ..tiny() }, 5).unwrap();
        let ids = [3, 1, 4, 1, 5, 9];
        let full = m.forward(&[ids.to_vec()]).unwrap().logits;
        let mut state = m.new_state();
        for (t, &id) in ids.iter().enumerate() {
            let step = m.step(id, &mut state).unwrap();
            for (a, b) in step.logits.iter().zip(&full.data()[t * 11..(t + 1) * 11]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tied_head_uses_embedding() {
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..tiny()
        };
        let m = Model::<f64>::init(cfg, 2).unwrap();
        assert!(m.params.head.is_none());
        assert!(m.params.named_tensors().iter().all(|(n, _)| n != "head"));
        let out = m.forward(&[vec![1, 2]]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2, 11]);
    }
}
