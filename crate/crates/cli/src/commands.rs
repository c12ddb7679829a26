use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use hades::analysis::{
    cka_matrix, delta_shift_histogram, effective_rank, frequency_response, head_features, head_matrices,
    output_spectrum, response_stack, selection_barcode, SpectralReport,
};
use hades::harness::{
    byte_detokenize, byte_tokenize, copy_task, freq_mix_task, label_passkey_prompt, passkey_training_sample,
    score_passkey, PasskeySpec, BYTE_VOCAB,
};
use hades::model::{count_flops, count_params, ModelConfig};
use hades::numerics::Rng;
use hades::trainer::{gradcheck as run_gradcheck, train_loop, Example, GradcheckOptions};
use hades::{checkpoint, Model};

use crate::config::{hash_bytes, model_hash, resolve_seed, Precision, RunConfig, Task};
use crate::{AnalyzeArgs, AnalyzeKind, CliError};

type Out = Box<dyn Write>;

fn open_out(path: Option<&Path>) -> Result<Out, CliError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            let f = File::create(p).map_err(|e| CliError::io(p, e))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn io_err(path: Option<&Path>) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::io(path.unwrap_or(Path::new("<stdout>")), e)
}

fn write_json(path: &Path, hash: &str, value: &impl serde::Serialize) -> Result<(), CliError> {
    let doc = serde_json::json!({ "config_sha256": hash, "report": value });
    let mut out = open_out(Some(path))?;
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(io_err(Some(path)))
}

pub fn init_config(preset: &str, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::preset(preset)?;
    let mut w = open_out(out)?;
    write!(w, "{}", cfg.to_toml())
        .and_then(|_| w.flush())
        .map_err(io_err(out))
}

fn sampler(cfg: &RunConfig) -> Result<Box<dyn FnMut(&mut Rng) -> Example>, CliError> {
    let t = cfg.seq_len;
    Ok(match cfg.task {
        Task::Copy => {
            let symbols = cfg.copy_symbols.unwrap_or(cfg.vocab_size);
            Box::new(move |rng| copy_task(rng, t, symbols).expect("validated copy task"))
        }
        Task::FreqMix => Box::new(move |rng| freq_mix_task(rng, t).expect("validated freq_mix task")),
        Task::Passkey => {
            hades::harness::dummy_granules(t)?;
            Box::new(move |rng| passkey_training_sample(t, rng).expect("validated passkey length"))
        }
        Task::Text => {
            let path = cfg.corpus.as_deref().expect("validated corpus");
            let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
            if bytes.len() <= t {
                return Err(CliError::config(format!(
                    "corpus {} has {} bytes, fewer than seq_len + 1",
                    path.display(),
                    bytes.len()
                )));
            }
            let ids = byte_tokenize(&bytes);
            Box::new(move |rng| {
                let start = rng.below(ids.len() - t);
                Example::new(ids[start..start + t].to_vec(), ids[start + 1..start + t + 1].to_vec())
            })
        }
    })
}

pub fn train(config: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    cfg.validate_task()?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    let hash = hash_bytes(cfg.to_toml().as_bytes());
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut log = open_out(Some(&metrics_path))?;
    writeln!(log, "# config_sha256={hash}").map_err(io_err(Some(&metrics_path)))?;
    let sample = sampler(&cfg)?;
    let tc = cfg.train();
    let metrics = match cfg.precision {
        Precision::F32 => {
            let mut model = Model::<f32>::init(cfg.model(), cfg.seed)?;
            let m = train_loop(&mut model, sample, &tc, &mut log)?;
            checkpoint::save(&model, &cfg.out_dir.join("final.ckpt"))?;
            m
        }
        Precision::F64 => {
            let mut model = Model::<f64>::init(cfg.model(), cfg.seed)?;
            let m = train_loop(&mut model, sample, &tc, &mut log)?;
            checkpoint::save(&model, &cfg.out_dir.join("final.ckpt"))?;
            m
        }
    };
    if let Some(last) = metrics.last() {
        println!(
            "step {} task {:.6} balance {:.6} diversity {:.6} total {:.6}",
            last.step, last.loss.task, last.loss.balance, last.loss.diversity, last.loss.total
        );
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, io::Error::from(io::ErrorKind::NotFound)));
    }
    Ok(checkpoint::load::<f64>(path)?)
}

fn require_bytes(cfg: &ModelConfig) -> Result<(), CliError> {
    if cfg.vocab_size < BYTE_VOCAB {
        return Err(CliError::config(format!(
            "byte prompts need vocab_size >= {BYTE_VOCAB}, checkpoint has {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

pub fn generate(
    ckpt: &Path,
    prompt: &str,
    max_tokens: usize,
    temperature: f64,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    require_bytes(&model.cfg)?;
    let ids = byte_tokenize(prompt.as_bytes());
    if ids.is_empty() {
        return Err(CliError::config("prompt is empty"));
    }
    let mut rng = Rng::new(resolve_seed(seed, 0)?);
    let out = model.generate_sampled(&ids, max_tokens, temperature, &mut rng)?;
    let text = byte_detokenize(&out)?;
    let mut stdout = io::stdout().lock();
    stdout
        .write_all(&text)
        .and_then(|_| writeln!(stdout))
        .map_err(io_err(None))
}

pub fn passkey(
    ckpt: &Path,
    paper_grid: bool,
    trials: Option<usize>,
    lengths: Option<Vec<usize>>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(ckpt)?;
    require_bytes(&model.cfg)?;
    let mut spec = if paper_grid {
        PasskeySpec::paper()
    } else {
        PasskeySpec::desk()
    };
    if let Some(t) = trials {
        spec.trials = t;
    }
    if let Some(l) = lengths {
        spec.context_lengths = l;
    }
    spec.seed = resolve_seed(seed, spec.seed)?;
    let grid = score_passkey(&model, &spec)?;
    let tag = format!("config_sha256={}", model_hash(&model.cfg));
    let mut w = open_out(out)?;
    grid.write_csv(&tag, &mut w)
        .and_then(|_| w.flush())
        .map_err(io_err(out))
}

fn write_reports(w: &mut impl Write, tag: &str, reports: &[SpectralReport]) -> io::Result<()> {
    let norm = reports.first().map_or("max", |r| r.normalization.name());
    let degenerate: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].degenerate).collect();
    writeln!(w, "# normalization={norm} degenerate_slots={degenerate:?} {tag}")?;
    writeln!(w, "slot,bin,magnitude")?;
    for (slot, r) in reports.iter().enumerate() {
        let one = r.one_sided();
        for (b, m) in one.bins.iter().zip(&one.magnitude) {
            writeln!(w, "{slot},{b},{m}")?;
        }
    }
    Ok(())
}

pub fn analyze(kind: AnalyzeKind) -> Result<(), CliError> {
    let (name, args): (&str, &AnalyzeArgs) = match &kind {
        AnalyzeKind::Spectrum(a) => ("spectrum", a),
        AnalyzeKind::Response(a) => ("response", a),
        AnalyzeKind::Effrank(a) => ("effrank", a),
        AnalyzeKind::Cka(a) => ("cka", a),
        AnalyzeKind::Barcode(a) => ("barcode", a),
        AnalyzeKind::DeltaHist(a) => ("delta-hist", a),
    };
    let model = load_model(&args.ckpt)?;
    let bytes = fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let ids = byte_tokenize(&bytes);
    if ids.is_empty() {
        return Err(CliError::config(format!("{} is empty", args.input.display())));
    }
    if args.layer >= model.cfg.n_layer {
        return Err(CliError::config(format!(
            "layer {} out of range for {} layers",
            args.layer, model.cfg.n_layer
        )));
    }
    let tag = format!("config_sha256={}", model_hash(&model.cfg));
    let out = args.out.as_deref();
    // Rendered in memory so a failed analysis leaves no partial file behind.
    let mut w: Vec<u8> = Vec::new();
    let werr = io_err(out);
    match name {
        "spectrum" => {
            let reports = head_features(&model, &ids, args.layer)?
                .iter()
                .map(output_spectrum)
                .collect::<hades::Result<Vec<_>>>()?;
            write_reports(&mut w, &tag, &reports).map_err(&werr)?;
        }
        "response" => {
            let reports = head_matrices(&model, &ids, args.layer)?
                .iter()
                .map(frequency_response)
                .collect::<hades::Result<Vec<_>>>()?;
            write_reports(&mut w, &tag, &reports).map_err(&werr)?;
        }
        "effrank" => {
            let rank = effective_rank(&response_stack(&head_matrices(&model, &ids, args.layer)?)?)?;
            writeln!(w, "# normalization=none {tag}")
                .and_then(|_| writeln!(w, "layer,slots,effective_rank"))
                .and_then(|_| writeln!(w, "{},{},{rank}", args.layer, model.cfg.n_active))
                .map_err(&werr)?;
        }
        "cka" => {
            let report = cka_matrix(&head_features(&model, &ids, args.layer)?)?;
            writeln!(
                w,
                "# normalization=none mean_off_diagonal={} {tag}",
                report.mean_off_diagonal
            )
            .map_err(&werr)?;
            writeln!(w, "slot_a,slot_b,cka").map_err(&werr)?;
            for (i, row) in report.matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    writeln!(w, "{i},{j},{v}").map_err(&werr)?;
                }
            }
        }
        "barcode" => {
            let (trace, _) = model.forward_traced(&ids)?;
            let records = &trace.blocks[args.layer].records;
            let labels = label_passkey_prompt(&ids);
            let experts = model.cfg.n_filters - model.cfg.n_shared;
            selection_barcode(records, experts, labels.as_deref())?
                .write_csv(&tag, &mut w)
                .map_err(&werr)?;
        }
        _ => {
            let hists = delta_shift_histogram(&model, &ids)?;
            hists[args.layer].write_csv(&tag, &mut w).map_err(&werr)?;
        }
    }
    let mut dest = open_out(out)?;
    dest.write_all(&w).and_then(|_| dest.flush()).map_err(&werr)
}

fn fmt_int(n: impl Into<i128>) -> String {
    let n = n.into();
    let digits = n.unsigned_abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        format!("-{out}")
    } else {
        out
    }
}

pub fn params(config: &Path, json: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = hash_bytes(cfg.to_toml().as_bytes());
    let mut report = count_params(&cfg.model())?;
    if let Some(r) = cfg.baseline_params_reference {
        report = report.with_reference(r);
    }
    let f = &report.formula;
    println!("# config_sha256={hash}");
    println!("{:<16} {:>16} {:>16}", "component", "baseline", "routed");
    for row in &f.rows {
        println!(
            "{:<16} {:>16} {:>16}",
            row.component,
            fmt_int(row.baseline),
            fmt_int(row.hades)
        );
    }
    println!("{:<40} {:>16}", "per-filter parameters", fmt_int(f.per_filter));
    println!("{:<40} {:>16}", "reduction per layer", fmt_int(f.reduction));
    println!("{:<40} {:>16}", "reduction", fmt_int(f.reduction_total));
    println!(
        "{:<40} {:>16}",
        "reduction (+2 constant reading)",
        fmt_int(f.reduction_total_with_constant)
    );
    if let (Some(total), Some(after)) = (report.reference_total, report.reference_after_reduction) {
        println!("{:<40} {:>16}", "reference baseline", fmt_int(total));
        println!("{:<40} {:>16}", "result", fmt_int(after));
        println!(
            "{:<40} {:>16}",
            "result (+2 constant reading)",
            fmt_int(total as i128 - f.reduction_total_with_constant as i128)
        );
    }
    let c = &report.constructed;
    println!("{:<40} {:>16}", "constructed total", fmt_int(c.total));
    println!("{:<40} {:>16}", "constructed baseline total", fmt_int(c.baseline_total));
    println!("{:<40} {:>16}", "constructed reduction", fmt_int(c.reduction_total));
    if let Some(p) = json {
        write_json(p, &hash, &report)?;
    }
    Ok(())
}

pub fn flops(config: &Path, seqlen: usize, json: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = hash_bytes(cfg.to_toml().as_bytes());
    let report = count_flops(&cfg.model(), seqlen)?;
    println!("# config_sha256={hash}");
    println!("{:<20} {:>16} {:>16}", "operation", "baseline", "routed");
    for row in &report.mixer {
        println!("{:<20} {:>16.0} {:>16.0}", row.operation, row.baseline, row.hades);
    }
    for (name, v) in &report.routing {
        println!("{:<20} {:>16} {:>16.0}", name, "-", v);
    }
    println!(
        "{:<20} {:>16.0} {:>16.0}",
        "per token", report.baseline_per_token, report.hades_per_token
    );
    println!(
        "{:<20} {:>16.4e} {:>16.4e}",
        "per layer", report.baseline_total, report.hades_total
    );
    println!("ratio {:.6}", report.ratio);
    println!("routing share {:.6}", report.routing_share);
    if let Some(p) = json {
        write_json(p, &hash, &report)?;
    }
    Ok(())
}

pub fn gradcheck(seed: Option<u64>, count: usize, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?.model(),
        None => ModelConfig::desk_tiny(),
    };
    let first = resolve_seed(seed, 0)?;
    let opts = GradcheckOptions::default();
    let results = run_gradcheck(&cfg, first, count.max(1), &opts)?;
    println!("# config_sha256={}", model_hash(&cfg));
    println!("seed,checked,max_rel_error,worst_param,passed");
    for r in &results {
        println!(
            "{},{},{:.3e},{},{}",
            r.seed, r.checked, r.max_rel_error, r.worst_param, r.passed
        );
    }
    match results.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::Gradcheck(format!(
            "seed {}: relative error {:.3e} at {} exceeds {:.0e}",
            r.seed, r.max_rel_error, r.worst_param, opts.tolerance
        ))),
        None => Ok(()),
    }
}
