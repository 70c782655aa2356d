use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use bisparse::attention::Mechanism;
use bisparse::bench;
use bisparse::checkpoint;
use bisparse::config::{section_of, DataFormat, RunConfig, MODEL_SECTIONS};
use bisparse::data::{
    byte_vocabulary_files, lm_sequences, openwebtext_split, read_jsonl, read_raw, summarization_sequence,
    tokenize_pairs, Tokenizer, TrainSequence,
};
use bisparse::eval::evaluate_summaries;
use bisparse::gradcheck::{check_mechanism, check_model, GradcheckReport, TOLERANCE};
use bisparse::model::{generate, param_count, ModelConfig, ModelWeights, Sampling};
use bisparse::train::{train, LogRecord, TrainHooks};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Command, Resolved};

/// Multiplier applied to analytic gradients by `gradcheck --inject-fault`.
const FAULT_FACTOR: f64 = 1.01;

pub fn run_command(command: Command, mut r: Resolved) -> Result<i32> {
    match command {
        Command::Train { data, out } => {
            if let Some(d) = data {
                r.cfg.paths.train_data = Some(d);
            }
            if let Some(o) = out {
                r.cfg.paths.checkpoint_dir = Some(o);
            }
            ensure_seed(&mut r);
            cmd_train(&r)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            limit,
            show_summaries,
        } => cmd_eval(&r, &checkpoint, &data, out.as_deref(), limit, show_summaries),
        Command::Generate {
            checkpoint,
            prompt,
            max_new,
            sampling,
            temperature,
            top_k,
        } => {
            let sampling = match sampling.as_str() {
                "greedy" => Sampling::Greedy,
                "temperature" => Sampling::Temperature(temperature),
                "top-k" => Sampling::TopK { k: top_k, temperature },
                other => bail!("unknown sampling {other:?} (expected greedy, temperature or top-k)"),
            };
            if sampling != Sampling::Greedy {
                ensure_seed(&mut r);
            }
            cmd_generate(&r, &checkpoint, &prompt, max_new, sampling)
        }
        Command::Gradcheck {
            seeds,
            model,
            inject_fault,
        } => {
            ensure_seed(&mut r);
            cmd_gradcheck(&r, seeds, model, inject_fault)
        }
        Command::Bench {
            lengths,
            thresholds,
            repeats,
            out,
        } => {
            ensure_seed(&mut r);
            cmd_bench(&r, &lengths, thresholds.as_deref(), repeats, out.as_deref())
        }
        Command::Params => cmd_params(&r),
    }
}

/// Draws a seed from system entropy when none was configured and reports it.
fn ensure_seed(r: &mut Resolved) {
    if !r.is_explicit("seed") {
        let seed: u64 = rand::random();
        r.cfg.train.seed = seed;
        r.explicit.push("seed".into());
        eprintln!("seed = {seed}");
    }
}

fn require_file(key: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{key}: file {} does not exist", path.display());
    }
    Ok(())
}

/// Tokenizer from the configured vocabulary files, or the built-in byte
/// vocabulary when none are configured and the model expects 257 tokens.
fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let tok = match (&cfg.paths.vocab_encoder, &cfg.paths.vocab_merges) {
        (Some(enc), Some(merges)) => {
            require_file("vocab_encoder", enc)?;
            require_file("vocab_merges", merges)?;
            Tokenizer::from_files(enc, merges)?
        }
        (None, None) if cfg.model.vocab_size == 257 => {
            let (enc, merges) = byte_vocabulary_files();
            Tokenizer::from_strs(
                &enc,
                &merges,
                Path::new("<byte vocabulary>"),
                Path::new("<byte vocabulary>"),
            )?
        }
        (None, _) => bail!("vocab_encoder: not set"),
        (_, None) => bail!("vocab_merges: not set"),
    };
    if tok.vocab_size() != cfg.model.vocab_size {
        bail!(
            "vocab_size: config says {} but the vocabulary files hold {} tokens",
            cfg.model.vocab_size,
            tok.vocab_size()
        );
    }
    Ok(tok)
}

/// Article/summary pairs from an evaluation or training file.
fn read_pairs(format: DataFormat, path: &Path) -> Result<Vec<(String, String)>> {
    Ok(match format {
        DataFormat::Jsonl => read_jsonl(path)?,
        DataFormat::Raw | DataFormat::Halves => read_raw(path)?.iter().map(|d| openwebtext_split(d)).collect(),
    })
}

fn training_sequences(cfg: &RunConfig, tok: &Tokenizer, path: &Path) -> Result<Vec<TrainSequence>> {
    let sep = tok.separator()?;
    let ctx = cfg.model.context_window();
    Ok(match cfg.data_format {
        DataFormat::Raw => {
            let mut ids = Vec::new();
            for doc in read_raw(path)? {
                ids.extend(tok.encode(&doc));
                ids.push(sep);
            }
            lm_sequences(&ids, ctx)
        }
        format => tokenize_pairs(tok, &read_pairs(format, path)?)
            .iter()
            .map(|ex| summarization_sequence(ex, sep, ctx, cfg.train.score_article))
            .collect(),
    })
}

struct FileHooks {
    log: BufWriter<fs::File>,
    log_path: PathBuf,
    best: PathBuf,
    model: ModelConfig,
}

impl TrainHooks for FileHooks {
    fn on_log(&mut self, record: &LogRecord) -> bisparse::Result<()> {
        writeln!(self.log, "{record}")
            .and_then(|_| self.log.flush())
            .map_err(|e| bisparse::Error::Io {
                path: self.log_path.clone(),
                source: e,
            })
    }

    fn on_improvement(&mut self, _step: usize, weights: &ModelWeights, _val_loss: f64) -> bisparse::Result<()> {
        checkpoint::save(&self.best, &self.model, weights)
    }
}

fn cmd_train(r: &Resolved) -> Result<i32> {
    let cfg = &r.cfg;
    cfg.validate()?;
    let train_path = cfg
        .paths
        .train_data
        .as_deref()
        .ok_or_else(|| anyhow!("train_data: not set (use --data)"))?;
    require_file("train_data", train_path)?;
    if let Some(v) = &cfg.paths.val_data {
        require_file("val_data", v)?;
    }
    let out_dir = cfg
        .paths
        .checkpoint_dir
        .clone()
        .ok_or_else(|| anyhow!("checkpoint_dir: not set (use --out)"))?;
    let tok = tokenizer(cfg)?;
    let train_seqs = training_sequences(cfg, &tok, train_path)?;
    let val_seqs = match &cfg.paths.val_data {
        Some(v) => training_sequences(cfg, &tok, v)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("checkpoint_dir: cannot create {}", out_dir.display()))?;
    let log_path = cfg.paths.log_path.clone().unwrap_or_else(|| out_dir.join("train.log"));
    let file =
        fs::File::create(&log_path).with_context(|| format!("log_path: cannot create {}", log_path.display()))?;
    let mut hooks = FileHooks {
        log: BufWriter::new(file),
        log_path: log_path.clone(),
        best: out_dir.join("best.ckpt"),
        model: cfg.model.clone(),
    };
    writeln!(hooks.log, "{}", LogRecord::HEADER)?;
    fs::write(
        out_dir.join("config.conf"),
        cfg.to_text(&["model", "attention", "train", "eval", "data"]),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut weights = ModelWeights::init(&cfg.model, &mut rng)?;
    eprintln!(
        "training {} on {} sequences ({} validation), {} parameters",
        cfg.model.attention.mechanism,
        train_seqs.len(),
        val_seqs.len(),
        weights.num_scalars()
    );
    let outcome = train(&cfg.model, &mut weights, &train_seqs, &val_seqs, &cfg.train, &mut hooks)?;
    checkpoint::save(&out_dir.join("last.ckpt"), &cfg.model, &weights)?;
    println!(
        "steps {}{} final train loss {:.6}{}",
        outcome.steps,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.final_train_loss,
        outcome
            .best_val_loss
            .map(|v| format!(" best val loss {v:.6}"))
            .unwrap_or_default()
    );
    println!("log {}", log_path.display());
    println!("checkpoint {}", out_dir.join("last.ckpt").display());
    Ok(0)
}

/// Loads a checkpoint and rejects explicitly configured model keys that
/// disagree with it.
fn load_checkpoint(r: &Resolved, path: &Path) -> Result<RunConfig> {
    require_file("checkpoint", path)?;
    let (model, weights) = checkpoint::load(path)?;
    drop(weights);
    let mut stored = r.cfg.clone();
    stored.model = model;
    for key in &r.explicit {
        if section_of(key).is_some_and(|s| MODEL_SECTIONS.contains(&s)) && r.cfg.get(key) != stored.get(key) {
            bail!(
                "{key}: configured as {} but the checkpoint has {}",
                r.cfg.get(key).unwrap_or_default(),
                stored.get(key).unwrap_or_default()
            );
        }
    }
    Ok(stored)
}

fn cmd_eval(
    r: &Resolved,
    ckpt: &Path,
    data: &Path,
    out: Option<&Path>,
    limit: Option<usize>,
    show_summaries: bool,
) -> Result<i32> {
    let cfg = load_checkpoint(r, ckpt)?;
    require_file("data", data)?;
    let (_, weights) = checkpoint::load(ckpt)?;
    let tok = tokenizer(&cfg)?;
    let mut pairs = read_pairs(cfg.data_format, data)?;
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    if pairs.is_empty() {
        bail!("data: {} holds no examples", data.display());
    }
    let (report, generated) = evaluate_summaries(&cfg.model, &weights, &tok, &pairs, &cfg.eval)?;
    if show_summaries {
        for g in &generated {
            println!("candidate: {}\nreference: {}\n", g.candidate, g.reference);
        }
    }
    let json = report.to_json();
    print!("{}", report.table());
    println!("{json}");
    if let Some(p) = out {
        fs::write(p, format!("{json}\n")).with_context(|| format!("out: cannot write {}", p.display()))?;
    }
    Ok(0)
}

fn cmd_generate(r: &Resolved, ckpt: &Path, prompt: &str, max_new: usize, sampling: Sampling) -> Result<i32> {
    let cfg = load_checkpoint(r, ckpt)?;
    let (_, weights) = checkpoint::load(ckpt)?;
    let tok = tokenizer(&cfg)?;
    let ids = tok.encode(prompt);
    if ids.is_empty() {
        bail!("prompt: encodes to no tokens");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(r.cfg.train.seed);
    let out = generate(
        &cfg.model,
        &weights,
        &ids,
        max_new,
        sampling,
        &[tok.separator()?],
        &mut rng,
    )?;
    println!("{}", tok.decode(&out[ids.len()..])?);
    Ok(0)
}

fn print_report(report: &GradcheckReport) {
    for g in &report.groups {
        println!(
            "{:<24} seed {:<6} {:<28} max_rel_error {:.3e} checked {} skipped {}",
            report.label, report.seed, g.name, g.max_rel_error, g.checked, g.skipped
        );
    }
}

fn cmd_gradcheck(r: &Resolved, seeds: u64, model: bool, inject_fault: bool) -> Result<i32> {
    let mechanisms: Vec<Mechanism> = if r.is_explicit("mechanism") {
        vec![r.cfg.model.attention.mechanism]
    } else {
        Mechanism::ALL.to_vec()
    };
    let fault = inject_fault.then_some(FAULT_FACTOR);
    let base = r.cfg.train.seed;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for &m in &mechanisms {
        for seed in base..base.saturating_add(seeds.max(1)) {
            let report = if model {
                check_model(m, seed, fault)?
            } else {
                check_mechanism(m, seed, fault)?
            };
            print_report(&report);
            worst = worst.max(report.max_rel_error());
            if !report.passed() {
                failed += 1;
            }
        }
    }
    let verdict = if failed == 0 { "PASS" } else { "FAIL" };
    println!("{verdict}: max relative error {worst:.3e} (tolerance {TOLERANCE:e}), {failed} failing checks");
    Ok(if failed == 0 { 0 } else { 1 })
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| anyhow!("--{flag}: cannot parse {s:?}"))
        })
        .collect()
}

fn sweep_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}_sweep.csv"))
}

fn cmd_bench(r: &Resolved, lengths: &str, thresholds: Option<&str>, repeats: usize, out: Option<&Path>) -> Result<i32> {
    let attn = &r.cfg.model.attention;
    let lengths: Vec<usize> = parse_list("lengths", lengths)?;
    if let Some(&t) = lengths.iter().find(|&&t| t == 0 || t > attn.context_window) {
        bail!(
            "--lengths: {t} must lie in 1..={} (context_window)",
            attn.context_window
        );
    }
    let seed = r.cfg.train.seed;
    let rows = bench::bench_lengths(attn, &lengths, repeats, seed)?;
    let csv = bench::to_csv(&rows);
    match out {
        Some(p) => {
            fs::write(p, &csv).with_context(|| format!("out: cannot write {}", p.display()))?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    if let Some(th) = thresholds {
        let mut ths: Vec<f64> = parse_list("thresholds", th)?;
        ths.sort_by(f64::total_cmp);
        let mut sweep = String::from("threshold,T,retained_fraction\n");
        for &t in &lengths {
            for (threshold, f) in bench::threshold_sweep(attn, t, &ths, seed)? {
                sweep.push_str(&format!("{threshold},{t},{f}\n"));
            }
        }
        match out {
            Some(p) => {
                let sp = sweep_path(p);
                fs::write(&sp, &sweep).with_context(|| format!("out: cannot write {}", sp.display()))?;
                println!("wrote {}", sp.display());
            }
            None => print!("{sweep}"),
        }
    }
    Ok(0)
}

/// The reference layout for a config: standard attention behind Q/K/V projections.
pub fn baseline_of(cfg: &ModelConfig) -> ModelConfig {
    let mut b = cfg.clone();
    b.attention.mechanism = Mechanism::Standard;
    b.block_mechanisms.clear();
    b.qkv_projection = true;
    b
}

fn cmd_params(r: &Resolved) -> Result<i32> {
    let cfg = &r.cfg.model;
    let counts = param_count(cfg)?;
    let base = param_count(&baseline_of(cfg))?;
    println!(
        "{:<20} {:>14} {:>14} {:>14}",
        "component", "params", "standard", "delta"
    );
    let fmt_row = |name: &str, a: usize, b: usize| {
        println!("{name:<20} {a:>14} {b:>14} {:>+14}", a as i64 - b as i64);
    };
    for ((name, a), (_, b)) in counts.rows().iter().zip(base.rows()) {
        fmt_row(name, *a, b);
    }
    fmt_row("total", counts.total, base.total);
    println!(
        "{} total {:.2}M, standard baseline {:.2}M",
        cfg.attention.mechanism,
        counts.total as f64 / 1e6,
        base.total as f64 / 1e6
    );
    Ok(0)
}
