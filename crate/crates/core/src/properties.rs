//! Randomized structural checks shared by the test suites: the chain of
//! mechanisms that collapse into one another, mask invariants and causality.
//!
//! Every check is a pure function of its seed and returns the largest
//! deviation or the list of violations it found.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    adaptive_attention, adaptive_gate, bilinear_attention, hybrid_attention, sparse_attention, standard_attention,
    HeadOptions, HeadOutput, Mechanism, Slot,
};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::model::{forward, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// A threshold below every reachable score.
pub const NO_THRESHOLD: f64 = -1e300;
/// A gate logit whose sigmoid rounds to exactly 1.
pub const OPEN_GATE_LOGIT: f64 = 1e3;

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Shape of one randomized reduction case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionCase {
    pub t: usize,
    pub d_k: usize,
    pub causal: bool,
}

/// Largest deviation along
/// hybrid(open gates, no threshold) = sparse(no threshold) = bilinear,
/// adaptive(open gates) = bilinear and bilinear(identity form) = standard.
pub fn reduction_chain(seed: u64) -> Result<(ReductionCase, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = ReductionCase {
        t: rng.random_range(1..=64),
        d_k: rng.random_range(1..=16),
        causal: rng.random_bool(0.8),
    };
    let (t, d) = (case.t, case.d_k);
    let g = Graph::new();
    let q = g.constant(Tensor::randn(&[t, d], 1.0, &mut rng));
    let k = g.constant(Tensor::randn(&[t, d], 1.0, &mut rng));
    let v = g.constant(Tensor::randn(&[t, d], 1.0, &mut rng));
    let w = g.constant(Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng));
    let open = g.constant(Tensor::full(&[t], OPEN_GATE_LOGIT));
    let eye = g.constant(Tensor::eye(d));
    let opts = HeadOptions {
        causal: case.causal,
        sparsity_threshold: NO_THRESHOLD,
        span_drop: rng.random_range(0.0..0.99),
        ..HeadOptions::default()
    };
    let hybrid = hybrid_attention(&q, &k, &v, &w, &open, &opts)?.out.value();
    let sparse = sparse_attention(&q, &k, &v, &w, &opts)?.out.value();
    let adaptive = adaptive_attention(&q, &k, &v, &w, &open, &opts)?.out.value();
    let bilinear = bilinear_attention(&q, &k, &v, &w, case.causal, true)?.value();
    let bilinear_eye = bilinear_attention(&q, &k, &v, &eye, case.causal, true)?.value();
    let standard = standard_attention(&q, &k, &v, case.causal)?.value();
    let worst = [
        max_diff(&hybrid, &sparse),
        max_diff(&sparse, &bilinear),
        max_diff(&adaptive, &bilinear),
        max_diff(&bilinear_eye, &standard),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok((case, worst))
}

fn run(
    mechanism: Mechanism,
    q: &Var<'_>,
    v: &Var<'_>,
    w: &Var<'_>,
    gates: &Var<'_>,
    opts: &HeadOptions,
) -> Result<(Tensor, Vec<Slot>)> {
    let t = q.shape()[0];
    let full = |out: Var<'_>| -> (Tensor, Vec<Slot>) {
        let mask = crate::attention::SlotMask::full(t, opts.causal);
        (out.value(), mask.slots)
    };
    Ok(match mechanism {
        Mechanism::Standard => full(standard_attention(q, q, v, opts.causal)?),
        Mechanism::Bilinear => full(bilinear_attention(q, q, v, w, opts.causal, true)?),
        Mechanism::Sparse => unpack(sparse_attention(q, q, v, w, opts)?),
        Mechanism::Adaptive => unpack(adaptive_attention(q, q, v, w, gates, opts)?),
        Mechanism::Hybrid => unpack(hybrid_attention(q, q, v, w, gates, opts)?),
    })
}

fn unpack(h: HeadOutput<'_>) -> (Tensor, Vec<Slot>) {
    (h.out.value(), h.mask.slots)
}

/// Mask and attention-weight invariants of one random head. Returns the
/// violations found (empty when all hold).
///
/// With `V = I` the head output is its attention-weight matrix, so rows must
/// sum to 1, carry no weight outside the mask and keep their diagonal.
/// Raising the threshold or `span_drop` must never add kept entries, and
/// every gate lies in `{0} ∪ (span_drop, 1]`.
pub fn mask_invariants(mechanism: Mechanism, seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=32);
    let d = rng.random_range(1..=8);
    let g = Graph::new();
    let q = g.constant(Tensor::randn(&[t, d], 1.0, &mut rng));
    let w = g.constant(Tensor::randn(&[d, d], 1.0, &mut rng));
    let gates = g.constant(Tensor::randn(&[t], 2.0, &mut rng));
    let eye = g.constant(Tensor::eye(t));
    let opts = HeadOptions {
        causal: rng.random_bool(0.8),
        sparsity_threshold: rng.random_range(-1.0..1.0),
        span_drop: rng.random_range(0.0..0.9),
        ..HeadOptions::default()
    };
    let mut bad = Vec::new();

    let (weights, slots) = run(mechanism, &q, &eye, &w, &gates, &opts)?;
    for i in 0..t {
        let row = weights.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            bad.push(format!("row {i} sums to {sum}"));
        }
        if slots[i * t + i] != Slot::Kept || row[i] <= 0.0 {
            bad.push(format!("row {i} lost its diagonal"));
        }
        for j in 0..t {
            if slots[i * t + j] != Slot::Kept && row[j] != 0.0 {
                bad.push(format!("weight {} at masked ({i}, {j})", row[j]));
            }
        }
    }

    let kept = |s: &[Slot]| s.iter().filter(|&&x| x == Slot::Kept).count();
    let mut previous = usize::MAX;
    for threshold in [-1e9, -1.0, -0.3, 0.0, 0.1, 0.5, 1.0, 1e9] {
        let o = HeadOptions {
            sparsity_threshold: threshold,
            ..opts
        };
        let n = kept(&run(mechanism, &q, &eye, &w, &gates, &o)?.1);
        if n > previous {
            bad.push(format!("threshold {threshold} kept {n} > {previous}"));
        }
        previous = n;
    }

    let mut previous = usize::MAX;
    for span_drop in [0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 0.95] {
        let (gate, mask) = adaptive_gate(&gates, t, span_drop, opts.causal)?;
        let gate = gate.value();
        let nonzero = gate.data().iter().filter(|&&x| x != 0.0).count();
        if nonzero > previous {
            bad.push(format!("span_drop {span_drop} kept {nonzero} > {previous}"));
        }
        previous = nonzero;
        for (idx, &x) in gate.data().iter().enumerate() {
            let (i, j) = (idx / t, idx % t);
            if !(x == 0.0 || (x > span_drop && x <= 1.0)) {
                bad.push(format!("gate {x} at ({i}, {j}) outside {{0}} ∪ ({span_drop}, 1]"));
            }
            if (x != 0.0) != (mask.get(i, j) == Slot::Kept) {
                bad.push(format!("gate and mask disagree at ({i}, {j})"));
            }
            if i == j && x == 0.0 {
                bad.push(format!("gate diagonal {i} is zero"));
            }
        }
    }
    Ok(bad)
}

/// Small model used by the end-to-end checks.
pub fn tiny_model(mechanism: Mechanism) -> ModelConfig {
    let mut cfg = ModelConfig {
        n_layer: 2,
        vocab_size: 32,
        ..ModelConfig::default()
    };
    cfg.attention.mechanism = mechanism;
    cfg.attention.n_head = 2;
    cfg.attention.d_model = 16;
    cfg.attention.context_window = 16;
    cfg.attention.sparsity_threshold = 0.0;
    cfg
}

/// Changes every token after a random cut and returns the largest change of
/// the logits at or before the cut.
pub fn causality_deviation(mechanism: Mechanism, seed: u64) -> Result<f64> {
    let cfg = tiny_model(mechanism);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::init(&cfg, &mut rng)?;
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    for (name, w) in names.iter().zip(weights.values_mut()) {
        if name.contains("span") {
            *w = Tensor::randn(w.shape(), 2.0, &mut rng);
        }
    }
    let t = rng.random_range(2..=cfg.context_window());
    let cut = rng.random_range(0..t - 1);
    let a: Vec<usize> = (0..t).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let mut b = a.clone();
    for x in &mut b[cut + 1..] {
        *x = (*x + rng.random_range(1..cfg.vocab_size)) % cfg.vocab_size;
    }
    let la = forward(&cfg, &weights, &[a])?;
    let lb = forward(&cfg, &weights, &[b])?;
    let v = cfg.vocab_size;
    let prefix = (cut + 1) * v;
    Ok(max_diff(
        &Tensor::new(&[prefix], la.data()[..prefix].to_vec())?,
        &Tensor::new(&[prefix], lb.data()[..prefix].to_vec())?,
    ))
}
