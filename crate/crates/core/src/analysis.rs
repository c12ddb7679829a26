//! Diagnostics over trained or hand-built models: output spectra, filter
//! frequency responses, effective rank, linear CKA, selection barcodes and
//! the step-size shift histogram.

use std::io::Write;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{dft, singular_values, transform, Tensor};
use crate::router::SelectionRecord;
use crate::scalar::Scalar;
use crate::ssm::{scan_head, HeadDiscretized};

/// Largest sequence length accepted by [`frequency_response`] by default.
pub const RESPONSE_CAP: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Max,
    L2,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Max => "max",
            Normalization::L2 => "l2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Frequency index per entry, `0..T`.
    pub bins: Vec<usize>,
    pub magnitude: Vec<f64>,
    pub normalization: Normalization,
    /// Set when the input had no energy; magnitudes are then left at zero.
    pub degenerate: bool,
}

impl SpectralReport {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Bins `0..=⌊T/2⌋`.
    pub fn one_sided(&self) -> SpectralReport {
        let keep = self.bins.len() / 2 + 1;
        SpectralReport {
            bins: self.bins[..keep.min(self.bins.len())].to_vec(),
            magnitude: self.magnitude[..keep.min(self.magnitude.len())].to_vec(),
            normalization: self.normalization,
            degenerate: self.degenerate,
        }
    }

    /// Share of squared magnitude in each of `n_bands` equal-width bands.
    pub fn band_energy_fractions(&self, n_bands: usize) -> Vec<f64> {
        band_energy_fractions(&self.magnitude, n_bands)
    }

    /// One-sided CSV with a comment line naming the normalization and `tag`.
    pub fn write_csv<W: Write>(&self, tag: &str, mut out: W) -> std::io::Result<()> {
        let one = self.one_sided();
        writeln!(
            out,
            "# normalization={} degenerate={} {tag}",
            self.normalization.name(),
            self.degenerate
        )?;
        writeln!(out, "bin,magnitude")?;
        for (b, m) in one.bins.iter().zip(&one.magnitude) {
            writeln!(out, "{b},{m}")?;
        }
        Ok(())
    }
}

pub fn band_energy_fractions(curve: &[f64], n_bands: usize) -> Vec<f64> {
    let n_bands = n_bands.max(1);
    let total: f64 = curve.iter().map(|v| v * v).sum();
    let mut out = vec![0.0; n_bands];
    if total == 0.0 {
        return out;
    }
    for (k, v) in curve.iter().enumerate() {
        let band = (k * n_bands / curve.len()).min(n_bands - 1);
        out[band] += v * v / total;
    }
    out
}

/// DFT magnitude along time of each channel of `y` (`T × P`), averaged over
/// channels and scaled so the peak is 1.
pub fn output_spectrum<T: Scalar>(y: &Tensor<T>) -> Result<SpectralReport> {
    if y.shape().len() != 2 {
        return Err(Error::shape("output_spectrum", "[T, P]", format!("{:?}", y.shape())));
    }
    let (t_len, p) = (y.rows(), y.cols());
    if t_len < 2 || p == 0 {
        return Err(Error::Empty("output_spectrum"));
    }
    let mut mag = vec![0.0; t_len];
    for c in 0..p {
        let col: Vec<f64> = (0..t_len).map(|t| y.at(t, c).as_f64()).collect();
        for (m, z) in mag.iter_mut().zip(dft(&col)?) {
            *m += z.norm() / p as f64;
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if !peak.is_finite() {
        return Err(Error::NonFinite("output_spectrum".into()));
    }
    let degenerate = peak == 0.0;
    if !degenerate {
        mag.iter_mut().for_each(|m| *m /= peak);
    }
    Ok(SpectralReport {
        bins: (0..t_len).collect(),
        magnitude: mag,
        normalization: Normalization::Max,
        degenerate,
    })
}

/// `Λ = F·M·F⁻¹` with the unitary DFT matrix `F`.
pub fn spectral_similarity<T: Scalar>(m: &Tensor<T>, cap: usize) -> Result<Vec<Vec<Complex<f64>>>> {
    if m.shape().len() != 2 || m.rows() != m.cols() {
        return Err(Error::shape(
            "frequency_response",
            "square [T, T]",
            format!("{:?}", m.shape()),
        ));
    }
    let n = m.rows();
    if n == 0 {
        return Err(Error::Empty("frequency_response"));
    }
    if n > cap {
        return Err(Error::Config(format!(
            "frequency response of T={n} exceeds the cap of {cap}"
        )));
    }
    let scale = 1.0 / (n as f64).sqrt();
    // X = M·F⁻¹, row by row: (M·F⁻¹)[i, k] = Σ_t M[i, t]·e^{+2πikt/n}/√n.
    let mut x: Vec<Vec<Complex<f64>>> = (0..n)
        .map(|i| {
            let row: Vec<Complex<f64>> = m.row(i).iter().map(|v| Complex::new(v.as_f64(), 0.0)).collect();
            transform(row, true).into_iter().map(|z| z * scale).collect()
        })
        .collect();
    // Λ = F·X, column by column.
    for j in 0..n {
        let col: Vec<Complex<f64>> = x.iter().map(|r| r[j]).collect();
        for (i, z) in transform(col, false).into_iter().enumerate() {
            x[i][j] = z * scale;
        }
    }
    Ok(x)
}

/// Row norms `‖Λ_k‖₂` of the similarity transform, ℓ₂-normalized.
pub fn frequency_response<T: Scalar>(m: &Tensor<T>) -> Result<SpectralReport> {
    frequency_response_capped(m, RESPONSE_CAP)
}

pub fn frequency_response_capped<T: Scalar>(m: &Tensor<T>, cap: usize) -> Result<SpectralReport> {
    let lambda = spectral_similarity(m, cap)?;
    let mut norms: Vec<f64> = lambda
        .iter()
        .map(|row| row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    let total = norms.iter().map(|v| v * v).sum::<f64>().sqrt();
    let degenerate = total == 0.0;
    if !degenerate {
        norms.iter_mut().for_each(|v| *v /= total);
    }
    Ok(SpectralReport {
        bins: (0..norms.len()).collect(),
        magnitude: norms,
        normalization: Normalization::L2,
        degenerate,
    })
}

/// Filter matrix of one head assembled column by column from scans of unit
/// impulses, an independent route to the materialized matrix.
pub fn matrix_from_impulses<T: Scalar>(disc: &HeadDiscretized<T>) -> Result<Tensor<T>> {
    let n = disc.len();
    let mut m = Tensor::zeros(&[n, n]);
    for s in 0..n {
        let mut x = vec![T::zero(); n];
        x[s] = T::one();
        let y = scan_head(disc, &x, 1)?;
        for (t, v) in y.into_iter().enumerate() {
            m.set(t, s, v);
        }
    }
    Ok(m)
}

/// Roy–Vetterli effective rank `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = σᵢ / Σσ`.
pub fn effective_rank<T: Scalar>(m: &Tensor<T>) -> Result<f64> {
    let sv = singular_values(m)?;
    let total: f64 = sv.iter().map(|s| s.as_f64()).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("effective_rank of a zero matrix"));
    }
    let entropy: f64 = sv
        .iter()
        .map(|s| s.as_f64() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

fn centered<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| x.at(i, j).as_f64()).collect()).collect();
    for c in &mut cols {
        let mean = c.iter().sum::<f64>() / n as f64;
        c.iter_mut().for_each(|v| *v -= mean);
    }
    cols
}

/// `‖AᵀB‖²_F` for column lists of equal length.
fn cross_frobenius_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for ca in a {
        for cb in b {
            let d: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            total += d * d;
        }
    }
    total
}

/// Linear CKA `‖X̄ᵀȲ‖²_F / (‖X̄ᵀX̄‖_F·‖ȲᵀȲ‖_F)` on column-centered features.
pub fn linear_cka<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(Error::shape(
            "linear_cka",
            "X, Y with equal row counts",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if x.rows() < 2 {
        return Err(Error::Empty("linear_cka"));
    }
    let (xc, yc) = (centered(x), centered(y));
    let denom = (cross_frobenius_sq(&xc, &xc) * cross_frobenius_sq(&yc, &yc)).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Degenerate("linear_cka of a zero-variance input"));
    }
    Ok(cross_frobenius_sq(&xc, &yc) / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
}

/// Pairwise CKA among a set of feature matrices. Degenerate pairs score 0.
pub fn cka_matrix<T: Scalar>(features: &[Tensor<T>]) -> Result<RedundancyReport> {
    let n = features.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut off = 0.0;
    for i in 0..n {
        for j in i..n {
            let v = match linear_cka(&features[i], &features[j]) {
                Ok(v) => v,
                Err(Error::Degenerate(_)) => 0.0,
                Err(e) => return Err(e),
            };
            let v = if i == j && v > 0.0 { 1.0 } else { v };
            matrix[i][j] = v;
            matrix[j][i] = v;
            if i != j {
                off += 2.0 * v;
            }
        }
    }
    let pairs = n * n.saturating_sub(1);
    Ok(RedundancyReport {
        matrix,
        mean_off_diagonal: if pairs == 0 { 0.0 } else { off / pairs as f64 },
    })
}

/// Per-slot output features `T × P` of one layer, for redundancy analysis.
pub fn head_features<T: Scalar>(model: &Model<T>, ids: &[usize], layer: usize) -> Result<Vec<Tensor<T>>> {
    let (trace, _) = model.forward_traced(ids)?;
    let block = trace
        .blocks
        .get(layer)
        .ok_or(Error::Config(format!("no layer {layer}")))?;
    let (h, p) = (model.cfg.n_active, model.cfg.head_dim);
    let hp = h * p;
    (0..h)
        .map(|j| {
            let data = (0..block.len)
                .flat_map(|t| block.y[t * hp + j * p..t * hp + (j + 1) * p].iter().copied())
                .collect();
            Tensor::from_vec(&[block.len, p], data)
        })
        .collect()
}

/// Materialized filter matrix of every slot of `layer` on input `ids`.
pub fn head_matrices<T: Scalar>(model: &Model<T>, ids: &[usize], layer: usize) -> Result<Vec<Tensor<T>>> {
    let (trace, _) = model.forward_traced(ids)?;
    let block = trace
        .blocks
        .get(layer)
        .ok_or(Error::Config(format!("no layer {layer}")))?;
    Ok(block.heads.iter().map(crate::ssm::materialize_matrix).collect())
}

/// Stack of normalized one-sided response curves, one row per slot.
pub fn response_stack<T: Scalar>(matrices: &[Tensor<T>]) -> Result<Tensor<f64>> {
    let curves = matrices
        .iter()
        .map(|m| frequency_response(m).map(|r| r.one_sided().magnitude))
        .collect::<Result<Vec<_>>>()?;
    let width = curves.first().map_or(0, Vec::len);
    Tensor::from_vec(&[curves.len(), width], curves.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    /// Bin edges for `|x|`, one decade per bin.
    pub decades: Vec<f64>,
    /// Counts of negative shifts per decade, smallest magnitude first.
    pub negative: Vec<u64>,
    pub zero: u64,
    pub positive: Vec<u64>,
}

impl DeltaHistogram {
    /// Decade bins covering `[10^lo, 10^hi)`; magnitudes outside are clamped
    /// into the end bins.
    pub fn new(lo: i32, hi: i32) -> Self {
        let decades = (lo..=hi).map(|e| 10f64.powi(e)).collect::<Vec<_>>();
        let n = decades.len() - 1;
        Self {
            decades,
            negative: vec![0; n],
            zero: 0,
            positive: vec![0; n],
        }
    }

    pub fn add(&mut self, x: f64) {
        if x == 0.0 {
            self.zero += 1;
            return;
        }
        let n = self.positive.len();
        let e = x.abs().log10().floor() - self.decades[0].log10();
        let bin = (e.max(0.0) as usize).min(n - 1);
        if x > 0.0 {
            self.positive[bin] += 1;
        } else {
            self.negative[bin] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.zero + self.negative.iter().sum::<u64>() + self.positive.iter().sum::<u64>()
    }

    pub fn write_csv<W: Write>(&self, tag: &str, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# normalization=counts {tag}")?;
        writeln!(out, "lower,upper,count")?;
        let n = self.positive.len();
        for i in (0..n).rev() {
            writeln!(
                out,
                "{},{},{}",
                -self.decades[i + 1],
                -self.decades[i],
                self.negative[i]
            )?;
        }
        writeln!(out, "0,0,{}", self.zero)?;
        for i in 0..n {
            writeln!(out, "{},{},{}", self.decades[i], self.decades[i + 1], self.positive[i])?;
        }
        Ok(())
    }
}

impl Default for DeltaHistogram {
    fn default() -> Self {
        Self::new(-8, 2)
    }
}

/// Histogram of `Δ_HADES − Δ_base` over the selected-expert slots of every
/// token, one histogram per layer.
pub fn delta_shift_histogram<T: Scalar>(model: &Model<T>, ids: &[usize]) -> Result<Vec<DeltaHistogram>> {
    let (trace, _) = model.forward_traced(ids)?;
    let (h, q) = (model.cfg.n_active, model.cfg.n_active - model.cfg.n_shared);
    Ok(trace
        .blocks
        .iter()
        .map(|b| {
            let mut hist = DeltaHistogram::default();
            for t in 0..b.len {
                for j in 0..q {
                    let i = t * h + j;
                    hist.add(b.delta[i].as_f64() - b.delta_baseline[i].as_f64());
                }
            }
            hist
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    TaskDescription,
    Dummy,
    Passkey,
    Query,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::TaskDescription => "task_description",
            Region::Dummy => "dummy",
            Region::Passkey => "passkey",
            Region::Query => "query",
        }
    }
}

/// Token × expert activation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Barcode {
    pub rows: Vec<Vec<u8>>,
    pub labels: Vec<Option<Region>>,
}

pub fn selection_barcode(records: &[SelectionRecord], n_experts: usize, labels: Option<&[Region]>) -> Result<Barcode> {
    if let Some(l) = labels {
        if l.len() != records.len() {
            return Err(Error::shape("selection_barcode labels", records.len(), l.len()));
        }
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let mut row = vec![0u8; n_experts];
        for &e in &r.expert_ids {
            *row.get_mut(e)
                .ok_or(Error::Config(format!("expert {e} out of range")))? = 1;
        }
        rows.push(row);
    }
    let labels = match labels {
        Some(l) => l.iter().copied().map(Some).collect(),
        None => vec![None; records.len()],
    };
    Ok(Barcode { rows, labels })
}

impl Barcode {
    pub fn write_csv<W: Write>(&self, tag: &str, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# normalization=binary {tag}")?;
        let n = self.rows.first().map_or(0, Vec::len);
        let experts: Vec<String> = (0..n).map(|e| format!("e{e}")).collect();
        writeln!(out, "token,region,{}", experts.join(","))?;
        for (t, (row, label)) in self.rows.iter().zip(&self.labels).enumerate() {
            let cells: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(out, "{},{},{}", t + 1, label.map_or("", Region::name), cells.join(","))?;
        }
        Ok(())
    }
}
