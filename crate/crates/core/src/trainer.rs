//! Loss assembly, reverse-mode gradients of the full model, AdamW, the
//! finite-difference gradient check and the training loop.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::block;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{AuxLosses, Model, ModelConfig, ModelParams, ModelTrace};
use crate::numerics::{matmul_backward, Rng, Tensor};
use crate::ops::rms_norm_backward;
use crate::router::selection_margin;
use crate::scalar::Scalar;

/// One training sequence. `mask[t]` selects the positions that count toward
/// the task loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Example {
    pub fn new(input: Vec<usize>, target: Vec<usize>) -> Self {
        let mask = vec![true; target.len()];
        Self { input, target, mask }
    }

    pub fn with_mask(input: Vec<usize>, target: Vec<usize>, mask: Vec<bool>) -> Self {
        Self { input, target, mask }
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if self.input.len() != self.target.len() || self.mask.len() != self.target.len() {
            return Err(Error::shape(
                "Example",
                format!("{} targets and mask entries", self.input.len()),
                format!("{} targets, {} mask", self.target.len(), self.mask.len()),
            ));
        }
        if let Some(&id) = self.target.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocab { id, vocab });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cross-entropy in nats per counted token.
    pub task: f64,
    pub balance: f64,
    pub diversity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(task: f64, aux: AuxLosses, lambda1: f64, lambda2: f64) -> Self {
        Self {
            task,
            balance: aux.balance,
            diversity: aux.diversity,
            total: task + lambda1 * aux.balance + lambda2 * aux.diversity,
        }
    }
}

/// Summed cross-entropy over masked rows of `logits` (`T × V`) and the
/// number of rows counted.
fn cross_entropy_sum<T: Scalar>(logits: &[T], vocab: usize, targets: &[usize], mask: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        sum += lse - row[target].as_f64();
        count += 1;
    }
    (sum, count)
}

/// Loss of a batch of `B × T × V` logits against next-token targets.
pub fn total_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[Vec<usize>],
    aux: AuxLosses,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != targets.len() || targets.iter().any(|t| t.len() != shape[1]) {
        return Err(Error::shape(
            "total_loss",
            format!("logits [{}, T, V]", targets.len()),
            format!("{shape:?}"),
        ));
    }
    let (t_len, vocab) = (shape[1], shape[2]);
    let mut sum = 0.0;
    let mut count = 0;
    for (b, tg) in targets.iter().enumerate() {
        if let Some(&id) = tg.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocab { id, vocab });
        }
        let rows = &logits.data()[b * t_len * vocab..(b + 1) * t_len * vocab];
        let (s, c) = cross_entropy_sum(rows, vocab, tg, &vec![true; t_len]);
        sum += s;
        count += c;
    }
    let task = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(LossBreakdown::compose(task, aux, lambda1, lambda2))
}

/// Forward a batch, keeping the traces the backward pass needs.
pub fn forward_batch<T: Scalar>(model: &Model<T>, batch: &[Example]) -> Result<(LossBreakdown, Vec<ModelTrace<T>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut traces = Vec::with_capacity(batch.len());
    let (mut sum, mut count) = (0.0, 0);
    let mut aux = AuxLosses::default();
    for ex in batch {
        ex.validate(model.cfg.vocab_size)?;
        let (trace, _) = model.forward_traced(&ex.input)?;
        let (s, c) = cross_entropy_sum(&trace.logits, model.cfg.vocab_size, &ex.target, &ex.mask);
        sum += s;
        count += c;
        let a = trace.aux();
        aux.balance += a.balance / batch.len() as f64;
        aux.diversity += a.diversity / batch.len() as f64;
        traces.push(trace);
    }
    let task = if count == 0 { 0.0 } else { sum / count as f64 };
    if !task.is_finite() {
        return Err(Error::NonFinite("task loss".into()));
    }
    Ok((
        LossBreakdown::compose(task, aux, model.cfg.lambda1, model.cfg.lambda2),
        traces,
    ))
}

/// Gradients of the total loss of `batch` with respect to every parameter,
/// given the traces from [`forward_batch`].
pub fn backward<T: Scalar>(model: &Model<T>, batch: &[Example], traces: &[ModelTrace<T>]) -> Result<ModelParams<T>> {
    if traces.len() != batch.len() || traces.iter().zip(batch).any(|(tr, ex)| tr.ids != ex.input) {
        return Err(Error::Other("backward needs the traces of this batch".into()));
    }
    let cfg = &model.cfg;
    let (d, vocab, n_layer) = (cfg.d_model, cfg.vocab_size, cfg.n_layer);
    let count: usize = batch.iter().map(|ex| ex.mask.iter().filter(|&&m| m).count()).sum();
    let mut grads = ModelParams::<T>::zeros(cfg);
    for (ex, trace) in batch.iter().zip(traces) {
        let t_len = trace.len();
        if trace.blocks.len() != n_layer || trace.streams.len() != n_layer + 1 {
            return Err(Error::Other("trace does not match the model depth".into()));
        }
        let aux_norm = (batch.len() * n_layer.max(1) * t_len) as f64;
        let balance_scale = T::of(cfg.lambda1 / aux_norm);
        let diversity_scale = T::of(cfg.lambda2 / aux_norm);

        let mut dlogits = vec![T::zero(); t_len * vocab];
        if count > 0 {
            let inv = 1.0 / count as f64;
            for t in 0..t_len {
                if !ex.mask[t] {
                    continue;
                }
                let row = &trace.logits[t * vocab..(t + 1) * vocab];
                let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
                let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                for (k, g) in dlogits[t * vocab..(t + 1) * vocab].iter_mut().enumerate() {
                    let p = (row[k].as_f64() - max).exp() / z;
                    let onehot = if k == ex.target[t] { 1.0 } else { 0.0 };
                    *g = T::of((p - onehot) * inv);
                }
            }
        }

        let mut dfinal = vec![T::zero(); t_len * d];
        match (&model.params.head, &mut grads.head) {
            (Some(head), Some(ghead)) => matmul_backward(
                &trace.final_normed,
                t_len,
                d,
                head.data(),
                vocab,
                &dlogits,
                Some(&mut dfinal),
                Some(ghead.data_mut()),
            ),
            _ => {
                // logits = x · Eᵀ
                let embed = model.params.embed.data();
                let gembed = grads.embed.data_mut();
                for t in 0..t_len {
                    let x = &trace.final_normed[t * d..(t + 1) * d];
                    for k in 0..vocab {
                        let g = dlogits[t * vocab + k];
                        if g == T::zero() {
                            continue;
                        }
                        for i in 0..d {
                            dfinal[t * d + i] += g * embed[k * d + i];
                            gembed[k * d + i] += g * x[i];
                        }
                    }
                }
            }
        }

        let mut dx = vec![T::zero(); t_len * d];
        let last = &trace.streams[n_layer];
        for t in 0..t_len {
            let r = t * d..(t + 1) * d;
            rms_norm_backward(
                &last[r.clone()],
                model.params.final_norm.data(),
                trace.final_inv_rms[t],
                &dfinal[r.clone()],
                &mut dx[r],
                grads.final_norm.data_mut(),
            );
        }

        for l in (0..n_layer).rev() {
            let layer = &model.params.layers[l];
            let glayer = &mut grads.layers[l];
            let dnormed = block::backward(
                &trace.blocks[l],
                &layer.block,
                &cfg.block(l),
                &dx,
                balance_scale,
                diversity_scale,
                &mut glayer.block,
            );
            let x = &trace.streams[l];
            for t in 0..t_len {
                let r = t * d..(t + 1) * d;
                rms_norm_backward(
                    &x[r.clone()],
                    layer.norm.data(),
                    trace.inv_rms[l][t],
                    &dnormed[r.clone()],
                    &mut dx[r],
                    glayer.norm.data_mut(),
                );
            }
        }

        let gembed = grads.embed.data_mut();
        for (t, &id) in trace.ids.iter().enumerate() {
            for i in 0..d {
                gembed[id * d + i] += dx[t * d + i];
            }
        }
    }
    Ok(grads)
}

/// Loss and gradients of one batch.
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, batch: &[Example]) -> Result<(LossBreakdown, ModelParams<T>)> {
    let (loss, traces) = forward_batch(model, batch)?;
    let grads = backward(model, batch, &traces)?;
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip: Some(1.0),
        }
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak·min_ratio` at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

/// Moment accumulators mirroring the parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            step: 0,
        }
    }
}

/// One AdamW update on a flat tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: usize,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let p = param[i].as_f64();
        let update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        param[i] = T::of(p - lr * (update + wd * p));
    }
}

pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Clip, then apply AdamW to every tensor. Weight decay applies to matrices
/// only. Returns the gradient norm before clipping.
pub fn optimizer_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &mut ModelParams<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> f64 {
    let norm = global_norm(grads);
    if let Some(clip) = cfg.clip {
        if norm > clip {
            let s = T::of(clip / norm);
            for (_, g) in grads.named_tensors_mut() {
                g.scale(s);
            }
        }
    }
    state.step += 1;
    let step = state.step;
    let ps = params.named_tensors_mut();
    let gs = grads.named_tensors();
    let ms = state.m.named_tensors_mut();
    let vs = state.v.named_tensors_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let decay = p.shape().len() >= 2;
        adamw_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, lr, cfg, decay);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seq_len: usize,
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    /// Seeds whose smallest top-Q margin is below this are skipped.
    pub min_margin: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seq_len: 8,
            batch: 2,
            step: 1e-5,
            min_margin: 1e-3,
            floor: 1e-4,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

/// Smallest top-Q margin seen anywhere in the forward pass of `batch`.
pub fn min_selection_margin<T: Scalar>(model: &Model<T>, batch: &[Example]) -> Result<Option<f64>> {
    let q = model.cfg.n_active - model.cfg.n_shared;
    let mut best: Option<f64> = None;
    for ex in batch {
        let (trace, _) = model.forward_traced(&ex.input)?;
        for rec in trace.blocks.iter().flat_map(|b| &b.records) {
            if let Some(m) = selection_margin(&rec.scores, q) {
                best = Some(best.map_or(m, |b: f64| b.min(m)));
            }
        }
    }
    Ok(best)
}

/// Random batch of next-token examples for gradient checks.
pub fn random_batch(rng: &mut Rng, vocab: usize, batch: usize, seq_len: usize) -> Vec<Example> {
    (0..batch)
        .map(|_| {
            let seq: Vec<usize> = (0..=seq_len).map(|_| rng.below(vocab)).collect();
            Example::new(seq[..seq_len].to_vec(), seq[1..].to_vec())
        })
        .collect()
}

/// Builds the model and batch used by the gradient check for `seed`, or
/// `None` when a top-Q margin falls below the exclusion threshold.
pub fn gradcheck_case(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<Option<(Model<f64>, Vec<Example>)>> {
    let model = Model::<f64>::init(cfg.clone(), seed)?;
    let mut rng = Rng::new(seed).fork(7);
    let batch = random_batch(&mut rng, cfg.vocab_size, opts.batch, opts.seq_len);
    if let Some(m) = min_selection_margin(&model, &batch)? {
        if m < opts.min_margin {
            return Ok(None);
        }
    }
    Ok(Some((model, batch)))
}

/// Compare every analytic gradient against central differences of the total loss.
pub fn gradcheck_model(model: &Model<f64>, batch: &[Example], opts: &GradcheckOptions) -> Result<GradcheckResult> {
    let (_, grads) = loss_and_grad(model, batch)?;
    let loss = |m: &Model<f64>| -> Result<f64> { Ok(forward_batch(m, batch)?.0.total) };
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut probe = model.clone();
    let mut result = GradcheckResult {
        seed: 0,
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    for (ti, name) in names.iter().enumerate() {
        for i in 0..analytic[ti].len() {
            let orig = probe.params.named_tensors()[ti].1.data()[i];
            probe.params.named_tensors_mut()[ti].1.data_mut()[i] = orig + opts.step;
            let plus = loss(&probe)?;
            probe.params.named_tensors_mut()[ti].1.data_mut()[i] = orig - opts.step;
            let minus = loss(&probe)?;
            probe.params.named_tensors_mut()[ti].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            result.checked += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst_param = format!("{name}[{i}]");
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    result.passed = result.max_rel_error < opts.tolerance;
    Ok(result)
}

/// Check `count` accepted seeds starting at `first_seed`, skipping near-tie seeds.
pub fn gradcheck(
    cfg: &ModelConfig,
    first_seed: u64,
    count: usize,
    opts: &GradcheckOptions,
) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    let mut tried = 0;
    while out.len() < count {
        if tried > 50 * count.max(1) {
            return Err(Error::Degenerate("gradcheck: too many near-tie seeds"));
        }
        tried += 1;
        if let Some((model, batch)) = gradcheck_case(cfg, seed, opts)? {
            let mut r = gradcheck_model(&model, &batch, opts)?;
            r.seed = seed;
            out.push(r);
        }
        seed = seed.wrapping_add(1);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 3e-3,
            warmup: 100,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const METRICS_HEADER: &str = "step,task,balance,diversity,total,lr,grad_norm";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss.task, self.loss.balance, self.loss.diversity, self.loss.total, self.lr, self.grad_norm
        )
    }
}

/// Train `model` on examples drawn from `sample`, appending one CSV row per
/// step to `log`. The sampler receives a generator seeded from `cfg.seed`.
pub fn train_loop<T: Scalar, F, W>(
    model: &mut Model<T>,
    mut sample: F,
    cfg: &TrainConfig,
    mut log: W,
) -> Result<Vec<StepMetrics>>
where
    F: FnMut(&mut Rng) -> Example,
    W: Write,
{
    let schedule = Schedule {
        peak: cfg.lr,
        warmup: cfg.warmup,
        total: cfg.steps,
        min_ratio: cfg.min_lr_ratio,
    };
    let opt = AdamWConfig {
        weight_decay: cfg.weight_decay,
        clip: (cfg.clip > 0.0).then_some(cfg.clip),
        ..AdamWConfig::default()
    };
    let io = |e| Error::io("metrics log", e);
    writeln!(log, "{METRICS_HEADER}").map_err(io)?;
    let save = |model: &Model<T>, step: usize| -> Result<()> {
        match &cfg.out_dir {
            Some(dir) => checkpoint::save(model, &dir.join(format!("step_{step:06}.ckpt"))),
            None => Ok(()),
        }
    };
    save(model, 0)?;
    let mut rng = Rng::new(cfg.seed).fork(0x7261_696e);
    let mut state = OptimizerState::new(&model.cfg);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch.max(1)).map(|_| sample(&mut rng)).collect();
        let (loss, mut grads) = loss_and_grad(model, &batch)?;
        let lr = schedule.lr(step);
        let grad_norm = optimizer_step(&mut model.params, &mut grads, &mut state, lr, &opt);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let m = StepMetrics {
            step: step + 1,
            loss,
            lr,
            grad_norm,
        };
        writeln!(log, "{}", m.csv_row()).map_err(io)?;
        metrics.push(m);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            save(model, step + 1)?;
        }
    }
    log.flush().map_err(io)?;
    Ok(metrics)
}
