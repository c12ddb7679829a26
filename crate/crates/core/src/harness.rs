//! Tokenization and task generation: byte tokenizer, copy and
//! frequency-mix tasks, and the passkey retrieval benchmark.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::Region;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Rng;
use crate::scalar::Scalar;
use crate::trainer::Example;

/// Byte-level vocabulary; no special tokens are reserved.
pub const BYTE_VOCAB: usize = 256;

pub fn byte_tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn byte_detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::OutOfVocab { id, vocab: BYTE_VOCAB }))
        .collect()
}

pub const TASK_DESCRIPTION: &str = "There is an important piece of information hidden inside a lot of irrelevant text. Find it and memorize it. I will quiz you about this important information.";
pub const DUMMY_TEXT: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";
pub const QUERY: &str = "What is the pass key? The pass key is";

pub fn passkey_sentence(key: &str) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key.")
}

/// Depths `0, 10, …, 100` percent.
pub fn depth_grid() -> Vec<u32> {
    (0..=10).map(|i| i * 10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeySpec {
    pub context_lengths: Vec<usize>,
    pub depths: Vec<u32>,
    pub trials: usize,
    pub seed: u64,
}

impl PasskeySpec {
    pub fn desk() -> Self {
        Self {
            context_lengths: vec![256, 512, 1024, 2048, 4096],
            depths: depth_grid(),
            trials: 10,
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            context_lengths: vec![1024, 2048, 4096, 8192, 16384],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths != depth_grid() {
            return Err(Error::Config("passkey depths must be the 0..100 step 10 grid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasskeyPrompt {
    pub ids: Vec<usize>,
    pub regions: Vec<Region>,
    pub passkey: String,
    pub context_length: usize,
    pub depth_percent: u32,
}

/// Bytes taken by everything except dummy filler.
pub fn mandatory_len() -> usize {
    TASK_DESCRIPTION.len() + 1 + passkey_sentence("00000").len() + 1 + QUERY.len()
}

/// Dummy granules that fit in `context_length`.
pub fn dummy_granules(context_length: usize) -> Result<usize> {
    let base = mandatory_len();
    if context_length < base {
        return Err(Error::Config(format!(
            "context length {context_length} cannot hold the {base} mandatory prompt bytes"
        )));
    }
    Ok((context_length - base) / (DUMMY_TEXT.len() + 1))
}

pub fn random_passkey(rng: &mut Rng) -> String {
    format!("{}", 10_000 + rng.below(90_000))
}

/// Prompt with a fresh five-digit key drawn from `rng`.
pub fn build_passkey_prompt(context_length: usize, depth_percent: u32, rng: &mut Rng) -> Result<PasskeyPrompt> {
    let key = random_passkey(rng);
    build_passkey_prompt_with_key(context_length, depth_percent, &key)
}

/// `[task] [dummy × before] [passkey] [dummy × after] [query]`, joined by
/// single spaces. Each joining space is labeled with the segment it precedes.
pub fn build_passkey_prompt_with_key(context_length: usize, depth_percent: u32, key: &str) -> Result<PasskeyPrompt> {
    if !depth_grid().contains(&depth_percent) {
        return Err(Error::Config(format!("depth {depth_percent}% is not on the 10% grid")));
    }
    if key.len() != 5 || !key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Config(format!("passkey {key:?} is not five digits")));
    }
    let n_dummy = dummy_granules(context_length)?;
    let before = (n_dummy as f64 * depth_percent as f64 / 100.0).round() as usize;
    let mut segments: Vec<(Region, String)> = vec![(Region::TaskDescription, TASK_DESCRIPTION.to_string())];
    segments.extend((0..before).map(|_| (Region::Dummy, DUMMY_TEXT.to_string())));
    segments.push((Region::Passkey, passkey_sentence(key)));
    segments.extend((before..n_dummy).map(|_| (Region::Dummy, DUMMY_TEXT.to_string())));
    segments.push((Region::Query, QUERY.to_string()));
    let mut ids = Vec::with_capacity(context_length);
    let mut regions = Vec::with_capacity(context_length);
    for (i, (region, text)) in segments.iter().enumerate() {
        let piece = if i == 0 { text.clone() } else { format!(" {text}") };
        ids.extend(byte_tokenize(piece.as_bytes()));
        regions.extend(std::iter::repeat(*region).take(piece.len()));
    }
    Ok(PasskeyPrompt {
        ids,
        regions,
        passkey: key.to_string(),
        context_length,
        depth_percent,
    })
}

/// Region labels of `ids` when it is exactly a prompt produced by
/// [`build_passkey_prompt_with_key`], otherwise `None`.
pub fn label_passkey_prompt(ids: &[usize]) -> Option<Vec<Region>> {
    let bytes = byte_detokenize(ids).ok()?;
    let text = std::str::from_utf8(&bytes).ok()?;
    let marker = "The pass key is ";
    let start = text.find(marker)? + marker.len();
    let key = text.get(start..start + 5)?;
    let n_dummy = text.matches(DUMMY_TEXT).count();
    let context_length = mandatory_len() + n_dummy * (DUMMY_TEXT.len() + 1);
    depth_grid().into_iter().find_map(|depth| {
        let p = build_passkey_prompt_with_key(context_length, depth, key).ok()?;
        (p.ids == ids).then_some(p.regions)
    })
}

/// Training example: prompt followed by ` NNNNN`, with the loss on the
/// answer bytes only.
pub fn passkey_training_example(prompt: &PasskeyPrompt) -> Example {
    let mut seq = prompt.ids.clone();
    seq.extend(byte_tokenize(format!(" {}", prompt.passkey).as_bytes()));
    let input = seq[..seq.len() - 1].to_vec();
    let target = seq[1..].to_vec();
    let answer_start = prompt.ids.len() - 1;
    let mask = (0..target.len()).map(|i| i >= answer_start).collect();
    Example::with_mask(input, target, mask)
}

/// Training prompt without the task description: whole dummy sentences
/// fill the context, split at a random sentence boundary around the key, so
/// the key-to-query distance varies from prompt to prompt.
pub fn varied_passkey_prompt(context_length: usize, rng: &mut Rng) -> Result<PasskeyPrompt> {
    let sentences: Vec<&str> = DUMMY_TEXT.split_inclusive('.').map(str::trim).collect();
    let key = random_passkey(rng);
    let fixed = passkey_sentence(&key).len() + 1 + QUERY.len();
    if context_length < fixed {
        return Err(Error::Config(format!(
            "context length {context_length} cannot hold the {fixed} bytes of key and query"
        )));
    }
    let mut filler = Vec::new();
    let mut used = 0;
    let mut i = rng.below(sentences.len());
    while used + sentences[i % sentences.len()].len() + 1 <= context_length - fixed {
        let s = sentences[i % sentences.len()];
        used += s.len() + 1;
        filler.push(s);
        i += 1;
    }
    let split = rng.below(filler.len() + 1);
    let key_sentence = passkey_sentence(&key);
    let mut segments: Vec<(Region, &str)> = filler[..split].iter().map(|s| (Region::Dummy, *s)).collect();
    segments.push((Region::Passkey, &key_sentence));
    segments.extend(filler[split..].iter().map(|s| (Region::Dummy, *s)));
    segments.push((Region::Query, QUERY));
    let mut ids = Vec::with_capacity(context_length);
    let mut regions = Vec::with_capacity(context_length);
    for (i, (region, text)) in segments.iter().enumerate() {
        let piece = if i == 0 { text.to_string() } else { format!(" {text}") };
        ids.extend(byte_tokenize(piece.as_bytes()));
        regions.extend(std::iter::repeat(*region).take(piece.len()));
    }
    let depth = if filler.is_empty() {
        0
    } else {
        (100 * split / filler.len()) as u32
    };
    Ok(PasskeyPrompt {
        ids,
        regions,
        passkey: key,
        context_length,
        depth_percent: depth,
    })
}

/// Like [`passkey_training_example`], but the loss also covers every repeat of
/// the key after its first occurrence, the only other predictable digits.
pub fn passkey_recall_example(prompt: &PasskeyPrompt) -> Example {
    let ex = passkey_training_example(prompt);
    let mut seen = 0;
    let mask = ex
        .target
        .iter()
        .zip(&ex.mask)
        .map(|(&b, &m)| {
            let digit = (b'0' as usize..=b'9' as usize).contains(&b);
            seen += digit as usize;
            m || (digit && seen > 5)
        })
        .collect();
    Example::with_mask(ex.input, ex.target, mask)
}

/// Training draw at `context_length`: half standard prompts at a random grid
/// depth, half [`varied_passkey_prompt`]s, with the recall mask.
pub fn passkey_training_sample(context_length: usize, rng: &mut Rng) -> Result<Example> {
    let prompt = if rng.below(2) == 0 {
        let depths = depth_grid();
        let depth = depths[rng.below(depths.len())];
        build_passkey_prompt(context_length, depth, rng)?
    } else {
        varied_passkey_prompt(context_length, rng)?
    };
    Ok(passkey_recall_example(&prompt))
}

/// Anything that can continue a token prompt.
pub trait Completer {
    fn complete(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>>;
}

impl<T: Scalar> Completer for Model<T> {
    fn complete(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        self.generate_greedy(prompt, n)
    }
}

/// Bytes decoded after the query, as scored.
pub const ANSWER_TOKENS: usize = 6;

/// Exact match of the first five non-space characters of the continuation.
pub fn passkey_correct<C: Completer + ?Sized>(model: &C, prompt: &PasskeyPrompt) -> Result<bool> {
    let out = model.complete(&prompt.ids, ANSWER_TOKENS)?;
    let text = byte_detokenize(&out)?;
    let text = String::from_utf8_lossy(&text);
    let answer: String = text.trim_start().chars().take(5).collect();
    Ok(answer == prompt.passkey)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyCell {
    pub context_length: usize,
    pub depth_percent: u32,
    pub score: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyGrid {
    pub cells: Vec<PasskeyCell>,
}

impl PasskeyGrid {
    pub fn cell(&self, context_length: usize, depth_percent: u32) -> Option<&PasskeyCell> {
        self.cells
            .iter()
            .find(|c| c.context_length == context_length && c.depth_percent == depth_percent)
    }

    /// Fraction correct over every depth at one length.
    pub fn accuracy_at(&self, context_length: usize) -> f64 {
        let (s, n) = self
            .cells
            .iter()
            .filter(|c| c.context_length == context_length)
            .fold((0, 0), |(s, n), c| (s + c.score, n + c.trials));
        if n == 0 {
            0.0
        } else {
            s as f64 / n as f64
        }
    }

    pub fn write_csv<W: Write>(&self, tag: &str, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# normalization=counts {tag}")?;
        writeln!(out, "context_length,depth_percent,score,trials")?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.context_length, c.depth_percent, c.score, c.trials)?;
        }
        Ok(())
    }
}

/// Score every (length, depth) cell; the keys of cell `(i, j)` come from a
/// dedicated stream so cells are independent of evaluation order.
pub fn score_passkey<C: Completer + ?Sized>(model: &C, spec: &PasskeySpec) -> Result<PasskeyGrid> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut cells = Vec::new();
    for (i, &len) in spec.context_lengths.iter().enumerate() {
        for (j, &depth) in spec.depths.iter().enumerate() {
            let mut rng = root.fork(i as u64).fork(j as u64);
            let mut score = 0;
            for _ in 0..spec.trials {
                let prompt = build_passkey_prompt(len, depth, &mut rng)?;
                if passkey_correct(model, &prompt)? {
                    score += 1;
                }
            }
            cells.push(PasskeyCell {
                context_length: len,
                depth_percent: depth,
                score,
                trials: spec.trials,
            });
        }
    }
    Ok(PasskeyGrid { cells })
}

/// Copy task of even length `t_len`: `k = t_len/2` random symbols from
/// `0..vocab−1`, the delimiter `vocab − 1`, then the symbols again. The loss
/// mask covers the copy region, positions `k..t_len`.
pub fn copy_task(rng: &mut Rng, t_len: usize, vocab: usize) -> Result<Example> {
    if t_len < 2 || t_len % 2 != 0 {
        return Err(Error::Config(format!("copy task length {t_len} must be even and >= 2")));
    }
    if vocab < 2 {
        return Err(Error::Config("copy task needs at least two symbols".into()));
    }
    let k = t_len / 2;
    let src: Vec<usize> = (0..k).map(|_| rng.below(vocab - 1)).collect();
    let mut seq = src.clone();
    seq.push(vocab - 1);
    seq.extend_from_slice(&src);
    let mask = (0..t_len).map(|i| i >= k).collect();
    Ok(Example::with_mask(seq[..t_len].to_vec(), seq[1..].to_vec(), mask))
}

pub const FREQ_LEVELS: usize = 16;

/// Generated frequency-mix sequence and its planted bins.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMix {
    pub signal: Vec<f64>,
    pub tokens: Vec<usize>,
    pub slow_bin: usize,
    pub fast_bin: usize,
}

/// Slow sinusoid at a bin in `1..=T/16` plus a fast one at a bin in
/// `T/4..T/2`, each with a random phase, quantized to 16 levels.
pub fn freq_mix_with(rng: &mut Rng, t_len: usize, fast_amplitude: f64) -> Result<FreqMix> {
    if t_len < 32 {
        return Err(Error::Config(format!(
            "frequency-mix length {t_len} must be at least 32"
        )));
    }
    let slow_bin = 1 + rng.below(t_len / 16);
    let fast_bin = t_len / 4 + rng.below(t_len / 4);
    let (p1, p2) = (
        rng.uniform_in(0.0, std::f64::consts::TAU),
        rng.uniform_in(0.0, std::f64::consts::TAU),
    );
    let w = std::f64::consts::TAU / t_len as f64;
    let signal: Vec<f64> = (0..t_len)
        .map(|t| {
            let t = t as f64;
            (w * slow_bin as f64 * t + p1).cos() + fast_amplitude * (w * fast_bin as f64 * t + p2).cos()
        })
        .collect();
    Ok(FreqMix {
        tokens: quantize(&signal, FREQ_LEVELS),
        signal,
        slow_bin,
        fast_bin,
    })
}

/// Fast amplitude 0.5; next-token example over the quantized sequence.
pub fn freq_mix_task(rng: &mut Rng, t_len: usize) -> Result<Example> {
    let mix = freq_mix_with(rng, t_len + 1, 0.5)?;
    Ok(Example::new(mix.tokens[..t_len].to_vec(), mix.tokens[1..].to_vec()))
}

/// Uniform quantizer mapping the minimum to 0 and the maximum to `levels − 1`.
pub fn quantize(x: &[f64], levels: usize) -> Vec<usize> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    x.iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                (((v - lo) / span) * (levels - 1) as f64).round() as usize
            }
        })
        .collect()
}
