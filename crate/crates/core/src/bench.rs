//! Forward-pass throughput and mask density of one multi-head attention layer.
//!
//! Masks still evaluate every `T²` score, so the retained fraction measures
//! how much of the attention matrix survives, not work saved.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc_track;
use crate::attention::{multi_head, AttentionConfig, AttentionParams};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "T,retained_fraction,tokens_per_sec,peak_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub retained_fraction: f64,
    pub tokens_per_sec: f64,
    /// Allocation high-water mark of one forward pass above the live size
    /// before it; 0 when no tracking allocator is installed.
    pub peak_bytes: usize,
}

struct Layer {
    weights: AttentionParams<Tensor>,
    input: Tensor,
}

fn layer(cfg: &AttentionConfig, t: usize, seed: u64) -> Layer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = AttentionParams::init(cfg, false, 0.02, &mut rng);
    let input = Tensor::randn(&[t, cfg.d_model], 1.0, &mut rng);
    Layer { weights, input }
}

fn run(cfg: &AttentionConfig, layer: &Layer) -> Result<f64> {
    let graph = Graph::new();
    let x = graph.constant(layer.input.clone());
    let w = layer.weights.map(&mut |t| graph.constant(t.clone()));
    let (_, report) = multi_head(&x, cfg, &w)?;
    Ok(report.retained_fraction())
}

fn check_length(cfg: &AttentionConfig, t: usize) -> Result<()> {
    if t == 0 || t > cfg.context_window {
        return Err(Error::contract(format!(
            "bench length {t} must lie in 1..={}",
            cfg.context_window
        )));
    }
    Ok(())
}

/// Share of the `T²` (query, key) pairs kept by all masks, averaged over heads.
pub fn retained_fraction(cfg: &AttentionConfig, t: usize, seed: u64) -> Result<f64> {
    check_length(cfg, t)?;
    run(cfg, &layer(cfg, t, seed))
}

/// Retained fraction at each sparsity threshold, in the given order.
pub fn threshold_sweep(cfg: &AttentionConfig, t: usize, thresholds: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    check_length(cfg, t)?;
    thresholds
        .iter()
        .map(|&th| {
            let c = AttentionConfig {
                sparsity_threshold: th,
                ..cfg.clone()
            };
            Ok((th, retained_fraction(&c, t, seed)?))
        })
        .collect()
}

/// Times `repeats` forward passes per length (best of, after one warm-up).
pub fn bench_lengths(cfg: &AttentionConfig, lengths: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        check_length(cfg, t)?;
        let l = layer(cfg, t, seed);
        let baseline = alloc_track::reset_peak();
        let retained = run(cfg, &l)?;
        let peak = alloc_track::peak_bytes().saturating_sub(baseline);
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            run(cfg, &l)?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            t,
            retained_fraction: retained,
            tokens_per_sec: t as f64 / best.max(f64::MIN_POSITIVE),
            peak_bytes: peak,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.1},{}",
            r.t, r.retained_fraction, r.tokens_per_sec, r.peak_bytes
        );
    }
    out
}
