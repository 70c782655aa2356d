//! Per-head attention mechanisms and their multi-head assembly.
//!
//! All five mechanisms share one pipeline: compute pre-softmax scores, decide
//! which (query, key) pairs are kept, optionally scale kept scores by a soft
//! span gate, exclude the rest, then softmax and weight the values.
//!
//! * standard: `softmax(QKᵀ/√d_k)·V`
//! * bilinear: `softmax(Q·W_a·Kᵀ/√d_k)·V`
//! * sparse: bilinear scores restricted to pairs whose scaled dot product
//!   reaches the sparsity threshold
//! * adaptive: bilinear scores scaled by `sigmoid(A[i−j])`, pairs whose gate
//!   is at or below `span_drop` excluded
//! * hybrid: the sparse mask first, then the adaptive gate on the survivors
//!
//! The diagonal is kept by every mask so no softmax row is ever empty.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Score written into hard-excluded positions before the softmax.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Standard,
    Bilinear,
    Sparse,
    Adaptive,
    Hybrid,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Standard,
        Mechanism::Bilinear,
        Mechanism::Sparse,
        Mechanism::Adaptive,
        Mechanism::Hybrid,
    ];

    pub fn uses_bilinear(self) -> bool {
        !matches!(self, Mechanism::Standard)
    }

    pub fn uses_span_gates(self) -> bool {
        matches!(self, Mechanism::Adaptive | Mechanism::Hybrid)
    }

    pub fn uses_sparse_mask(self) -> bool {
        matches!(self, Mechanism::Sparse | Mechanism::Hybrid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Standard => "standard",
            Mechanism::Bilinear => "bilinear",
            Mechanism::Sparse => "sparse",
            Mechanism::Adaptive => "adaptive",
            Mechanism::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown mechanism {s:?}")))
    }
}

/// How pruned positions enter the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSemantics {
    /// Pruned scores are replaced by [`MASK_FILL`], i.e. excluded.
    AdditiveNegInf,
    /// Pruned scores are multiplied by 0 and still take part in the softmax.
    /// Future positions are excluded regardless.
    LiteralMultiply,
}

impl FromStr for MaskSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive_neg_inf" => Ok(Self::AdditiveNegInf),
            "literal_multiply" => Ok(Self::LiteralMultiply),
            _ => Err(Error::contract(format!("unknown mask semantics {s:?}"))),
        }
    }
}

impl fmt::Display for MaskSemantics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdditiveNegInf => "additive_neg_inf",
            Self::LiteralMultiply => "literal_multiply",
        })
    }
}

/// Which scores the sparsity threshold is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScoreSource {
    /// `Q_i·K_jᵀ/√d_k`
    DotProduct,
    /// `Q_i·W_a·K_jᵀ/√d_k`
    Bilinear,
}

impl FromStr for MaskScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot_product" => Ok(Self::DotProduct),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::contract(format!("unknown mask score source {s:?}"))),
        }
    }
}

impl fmt::Display for MaskScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DotProduct => "dot_product",
            Self::Bilinear => "bilinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub n_head: usize,
    pub d_model: usize,
    pub sparsity_threshold: f64,
    pub span_drop: f64,
    pub causal: bool,
    pub mask_semantics: MaskSemantics,
    pub mask_score_source: MaskScoreSource,
    pub context_window: usize,
    /// `false` selects the un-normalized `B(Q,K)·V` form for bilinear attention.
    pub normalized: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Hybrid,
            n_head: 12,
            d_model: 768,
            sparsity_threshold: 0.1,
            span_drop: 0.2,
            causal: true,
            mask_semantics: MaskSemantics::AdditiveNegInf,
            mask_score_source: MaskScoreSource::DotProduct,
            context_window: 1024,
            normalized: true,
        }
    }
}

impl AttentionConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            )));
        }
        if !(0.0..1.0).contains(&self.span_drop) {
            return Err(Error::contract(format!(
                "span_drop {} must lie in [0, 1)",
                self.span_drop
            )));
        }
        if !self.sparsity_threshold.is_finite() {
            return Err(Error::contract("sparsity_threshold must be finite"));
        }
        if self.context_window == 0 {
            return Err(Error::contract("context_window must be positive"));
        }
        Ok(())
    }

    pub fn head_options(&self) -> HeadOptions {
        HeadOptions {
            causal: self.causal,
            sparsity_threshold: self.sparsity_threshold,
            span_drop: self.span_drop,
            mask_semantics: self.mask_semantics,
            mask_score_source: self.mask_score_source,
        }
    }
}

/// The per-head knobs shared by every mechanism.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOptions {
    pub causal: bool,
    pub sparsity_threshold: f64,
    pub span_drop: f64,
    pub mask_semantics: MaskSemantics,
    pub mask_score_source: MaskScoreSource,
}

impl Default for HeadOptions {
    fn default() -> Self {
        AttentionConfig::default().head_options()
    }
}

/// State of one (query, key) pair after masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Kept,
    /// Removed by the sparsity threshold or the span gate.
    Pruned,
    /// Removed by causality.
    Future,
}

/// Row-major `T×T` mask layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotMask {
    pub len: usize,
    pub slots: Vec<Slot>,
}

impl SlotMask {
    pub fn full(len: usize, causal: bool) -> Self {
        let slots = (0..len * len)
            .map(|idx| {
                if causal && idx % len > idx / len {
                    Slot::Future
                } else {
                    Slot::Kept
                }
            })
            .collect();
        Self { len, slots }
    }

    pub fn get(&self, i: usize, j: usize) -> Slot {
        self.slots[i * self.len + j]
    }

    pub fn kept(&self) -> usize {
        self.slots.iter().filter(|&&s| s == Slot::Kept).count()
    }

    /// Share of all `T²` pairs that survive.
    pub fn retained_fraction(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        self.kept() as f64 / (self.len * self.len) as f64
    }

    /// 0/1 view of the mask.
    pub fn binary(&self) -> Tensor {
        let data = self
            .slots
            .iter()
            .map(|&s| if s == Slot::Kept { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.len, self.len], data).expect("square mask")
    }

    /// Largest kept look-back per query row (the row's effective span).
    pub fn span_lengths(&self) -> Vec<usize> {
        (0..self.len)
            .map(|i| {
                (0..=i)
                    .filter(|&j| self.get(i, j) == Slot::Kept)
                    .map(|j| i - j)
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Output of one head together with the mask it used.
pub struct HeadOutput<'g> {
    pub out: Var<'g>,
    pub mask: SlotMask,
}

fn check_qkv(q: &Var<'_>, k: &Var<'_>, v: &Var<'_>) -> Result<(usize, usize)> {
    let (tq, d) = q.value_ref().dims2("attention")?;
    let (tk, dk) = k.value_ref().dims2("attention")?;
    let (tv, _) = v.value_ref().dims2("attention")?;
    if tq != tk || tk != tv || d != dk || d == 0 {
        return Err(Error::shape("attention", &q.shape(), &k.shape()));
    }
    Ok((tq, d))
}

/// Softmax over kept positions of `scores`, applied to `v`.
fn attend<'g>(scores: Var<'g>, mask: &SlotMask, semantics: MaskSemantics, v: &Var<'g>) -> Result<Var<'g>> {
    let exclude: Vec<bool> = mask
        .slots
        .iter()
        .map(|&s| match s {
            Slot::Kept => false,
            Slot::Future => true,
            Slot::Pruned => semantics == MaskSemantics::AdditiveNegInf,
        })
        .collect();
    let scores = if semantics == MaskSemantics::LiteralMultiply && mask.slots.contains(&Slot::Pruned) {
        let zero_out: Vec<bool> = mask.slots.iter().map(|&s| s == Slot::Pruned).collect();
        scores.masked_fill(zero_out, 0.0)?
    } else {
        scores
    };
    let scores = if exclude.iter().any(|&e| e) {
        scores.masked_fill(exclude, MASK_FILL)?
    } else {
        scores
    };
    scores.softmax_rows()?.matmul(v)
}

/// `softmax(QKᵀ/√d_k)·V`.
pub fn standard_attention<'g>(q: &Var<'g>, k: &Var<'g>, v: &Var<'g>, causal: bool) -> Result<Var<'g>> {
    let (t, d) = check_qkv(q, k, v)?;
    let scores = q.matmul_t(k)?.scale(1.0 / (d as f64).sqrt());
    attend(scores, &SlotMask::full(t, causal), MaskSemantics::AdditiveNegInf, v)
}

/// `(Q·W_a·Kᵀ)/√d_k`, pre-softmax.
pub fn bilinear_scores<'g>(q: &Var<'g>, k: &Var<'g>, w_a: &Var<'g>) -> Result<Var<'g>> {
    let (_, d) = q.value_ref().dims2("bilinear_scores")?;
    let (_, dk) = k.value_ref().dims2("bilinear_scores")?;
    if w_a.shape() != [d, d] || dk != d {
        return Err(Error::shape("bilinear_scores", &q.shape(), &w_a.shape()));
    }
    Ok(q.matmul(w_a)?.matmul_t(k)?.scale(1.0 / (d as f64).sqrt()))
}

/// Bilinear attention. With `normalized == false` the output is `(Q·W_a·Kᵀ)·V`
/// with no softmax or scaling; future positions contribute nothing.
pub fn bilinear_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    w_a: &Var<'g>,
    causal: bool,
    normalized: bool,
) -> Result<Var<'g>> {
    let (t, _) = check_qkv(q, k, v)?;
    let mask = SlotMask::full(t, causal);
    if normalized {
        let scores = bilinear_scores(q, k, w_a)?;
        return attend(scores, &mask, MaskSemantics::AdditiveNegInf, v);
    }
    let raw = q.matmul(w_a)?.matmul_t(k)?;
    let raw = if causal { raw.mul_const(mask.binary())? } else { raw };
    raw.matmul(v)
}

/// Threshold mask on `scores` (already scaled), intersected with causality;
/// the diagonal is always kept.
fn threshold_mask(scores: &Tensor, threshold: f64, causal: bool) -> SlotMask {
    let t = scores.shape()[0];
    let mut mask = SlotMask::full(t, causal);
    for i in 0..t {
        for j in 0..t {
            if i != j && mask.get(i, j) == Slot::Kept && scores.at(i, j) < threshold {
                mask.slots[i * t + j] = Slot::Pruned;
            }
        }
    }
    mask
}

/// Binary sparse mask: pair (i, j) is kept iff `Q_i·K_jᵀ/√d_k ≥ threshold`,
/// j is not in the future (when causal), or j == i.
pub fn sparse_mask(q: &Tensor, k: &Tensor, threshold: f64, causal: bool) -> Result<SlotMask> {
    let (_, d) = q.dims2("sparse_mask")?;
    let mut scores = tensor::matmul_nt(q, k)?;
    scores.scale_in_place(1.0 / (d as f64).sqrt());
    Ok(threshold_mask(&scores, threshold, causal))
}

fn sparse_mask_for<'g>(q: &Var<'g>, k: &Var<'g>, bilinear: &Var<'g>, opts: &HeadOptions) -> Result<SlotMask> {
    match opts.mask_score_source {
        MaskScoreSource::DotProduct => {
            sparse_mask(&q.value_ref(), &k.value_ref(), opts.sparsity_threshold, opts.causal)
        }
        MaskScoreSource::Bilinear => Ok(threshold_mask(
            &bilinear.value_ref(),
            opts.sparsity_threshold,
            opts.causal,
        )),
    }
}

/// Threshold-sparse bilinear attention.
pub fn sparse_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    w_a: &Var<'g>,
    opts: &HeadOptions,
) -> Result<HeadOutput<'g>> {
    check_qkv(q, k, v)?;
    let scores = bilinear_scores(q, k, w_a)?;
    let mask = sparse_mask_for(q, k, &scores, opts)?;
    let out = attend(scores, &mask, opts.mask_semantics, v)?;
    Ok(HeadOutput { out, mask })
}

/// Soft span mask for a `len`-token sequence from per-offset gate logits.
///
/// Entry (i, j) is `sigmoid(A[|i−j|])` when that value exceeds `span_drop`
/// (and j ≤ i when causal), otherwise 0. The diagonal is always kept: when
/// the offset-0 gate falls to `span_drop` or below it is held at 1.
pub fn adaptive_gate<'g>(gates: &Var<'g>, len: usize, span_drop: f64, causal: bool) -> Result<(Var<'g>, SlotMask)> {
    let width = gates.value_ref().numel();
    if len > width {
        return Err(Error::contract(format!(
            "sequence length {len} exceeds span gate width {width}"
        )));
    }
    let soft = gates.sigmoid();
    let expanded = soft.offset_expand(len, causal)?;
    let mut mask = SlotMask::full(len, causal);
    let mut keep = Tensor::zeros(&[len, len]);
    let mut floor = Tensor::zeros(&[len, len]);
    {
        let values = expanded.value_ref();
        for i in 0..len {
            for j in 0..len {
                let idx = i * len + j;
                if mask.slots[idx] == Slot::Future {
                    continue;
                }
                if values.at(i, j) > span_drop {
                    keep.data_mut()[idx] = 1.0;
                } else if i == j {
                    floor.data_mut()[idx] = 1.0;
                } else {
                    mask.slots[idx] = Slot::Pruned;
                }
            }
        }
    }
    let graph = gates.graph();
    let gated = expanded.mul_const(keep)?;
    let gated = if floor.data().iter().any(|&x| x != 0.0) {
        gated.add(&graph.constant(floor))?
    } else {
        gated
    };
    Ok((gated, mask))
}

fn gated_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    w_a: &Var<'g>,
    gates: &Var<'g>,
    opts: &HeadOptions,
    with_sparse: bool,
) -> Result<HeadOutput<'g>> {
    let (t, _) = check_qkv(q, k, v)?;
    let scores = bilinear_scores(q, k, w_a)?;
    let (gate, mut mask) = adaptive_gate(gates, t, opts.span_drop, opts.causal)?;
    if with_sparse {
        let sparse = sparse_mask_for(q, k, &scores, opts)?;
        for (slot, s) in mask.slots.iter_mut().zip(&sparse.slots) {
            if *slot == Slot::Kept && *s != Slot::Kept {
                *slot = *s;
            }
        }
    }
    let scores = scores.mul(&gate)?;
    let out = attend(scores, &mask, opts.mask_semantics, v)?;
    Ok(HeadOutput { out, mask })
}

/// Bilinear attention restricted and scaled by learned span gates.
pub fn adaptive_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    w_a: &Var<'g>,
    gates: &Var<'g>,
    opts: &HeadOptions,
) -> Result<HeadOutput<'g>> {
    gated_attention(q, k, v, w_a, gates, opts, false)
}

/// Sparse mask first, then span gates on the surviving pairs.
pub fn hybrid_attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    w_a: &Var<'g>,
    gates: &Var<'g>,
    opts: &HeadOptions,
) -> Result<HeadOutput<'g>> {
    gated_attention(q, k, v, w_a, gates, opts, true)
}

/// Learnable attention weights of one layer, generic over storage so the same
/// layout holds values, graph handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    /// One `d_k×d_k` bilinear form per head (empty for standard attention).
    pub bilinear: Vec<P>,
    /// One length-`context_window` gate-logit vector per head (adaptive/hybrid only).
    pub span_logits: Vec<P>,
    /// Optional fused Q/K/V projection `(d_model×3·d_model, 3·d_model)`.
    pub qkv: Option<(P, P)>,
    pub proj_w: P,
    pub proj_b: P,
}

impl<P> AttentionParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (h, w) in self.bilinear.iter().enumerate() {
            out.push((format!("{prefix}.bilinear.{h}"), w));
        }
        for (h, a) in self.span_logits.iter().enumerate() {
            out.push((format!("{prefix}.span.{h}"), a));
        }
        if let Some((w, b)) = &self.qkv {
            out.push((format!("{prefix}.qkv.w"), w));
            out.push((format!("{prefix}.qkv.b"), b));
        }
        out.push((format!("{prefix}.proj.w"), &self.proj_w));
        out.push((format!("{prefix}.proj.b"), &self.proj_b));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.extend(self.bilinear.iter_mut());
        out.extend(self.span_logits.iter_mut());
        if let Some((w, b)) = &mut self.qkv {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.proj_w);
        out.push(&mut self.proj_b);
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            bilinear: self.bilinear.iter().map(&mut *f).collect(),
            span_logits: self.span_logits.iter().map(&mut *f).collect(),
            qkv: self.qkv.as_ref().map(|(w, b)| (f(w), f(b))),
            proj_w: f(&self.proj_w),
            proj_b: f(&self.proj_b),
        }
    }
}

/// Initial values for the span-gate logits (sigmoid(2) ≈ 0.88).
pub const SPAN_LOGIT_INIT: f64 = 2.0;

/// Standard deviation of the noise added to the identity `W_a` at init.
pub const BILINEAR_INIT_STD: f64 = 0.02;

impl AttentionParams<Tensor> {
    /// Fresh weights: `W_a = I + N(0, 0.02²)`, span logits at
    /// [`SPAN_LOGIT_INIT`], output projection `N(0, proj_std²)`.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, qkv_projection: bool, proj_std: f64, rng: &mut R) -> Self {
        Self::build(cfg, qkv_projection, proj_std, &mut |shape, std| {
            Tensor::randn(shape, std, rng)
        })
    }

    /// Same layout as [`AttentionParams::init`], with every random draw
    /// delegated to `noise(shape, std)`.
    pub fn build(
        cfg: &AttentionConfig,
        qkv_projection: bool,
        proj_std: f64,
        noise: &mut dyn FnMut(&[usize], f64) -> Tensor,
    ) -> Self {
        let dk = cfg.d_k();
        let d = cfg.d_model;
        let bilinear = if cfg.mechanism.uses_bilinear() {
            (0..cfg.n_head)
                .map(|_| {
                    let mut w = noise(&[dk, dk], BILINEAR_INIT_STD);
                    w.add_assign(&Tensor::eye(dk)).expect("square");
                    w
                })
                .collect()
        } else {
            Vec::new()
        };
        let span_logits = if cfg.mechanism.uses_span_gates() {
            (0..cfg.n_head)
                .map(|_| Tensor::full(&[cfg.context_window], SPAN_LOGIT_INIT))
                .collect()
        } else {
            Vec::new()
        };
        let qkv = qkv_projection.then(|| (noise(&[d, 3 * d], 0.02), Tensor::zeros(&[3 * d])));
        Self {
            bilinear,
            span_logits,
            qkv,
            proj_w: noise(&[d, d], proj_std),
            proj_b: Tensor::zeros(&[d]),
        }
    }
}

/// Per-head masks from a multi-head forward pass.
#[derive(Clone, Debug, Default)]
pub struct MaskReport {
    pub heads: Vec<SlotMask>,
}

impl MaskReport {
    pub fn retained_fraction(&self) -> f64 {
        let (kept, total) = self
            .heads
            .iter()
            .fold((0usize, 0usize), |(k, t), m| (k + m.kept(), t + m.len * m.len));
        if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        }
    }
}

/// Runs one head with the configured mechanism.
pub fn run_head<'g>(
    mechanism: Mechanism,
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    bilinear: Option<&Var<'g>>,
    gates: Option<&Var<'g>>,
    cfg: &AttentionConfig,
) -> Result<HeadOutput<'g>> {
    let opts = cfg.head_options();
    let need = |p: Option<&Var<'g>>, what: &str| {
        p.copied()
            .ok_or_else(|| Error::contract(format!("{mechanism} attention needs {what} weights")))
    };
    let (t, _) = check_qkv(q, k, v)?;
    match mechanism {
        Mechanism::Standard => Ok(HeadOutput {
            out: standard_attention(q, k, v, cfg.causal)?,
            mask: SlotMask::full(t, cfg.causal),
        }),
        Mechanism::Bilinear => Ok(HeadOutput {
            out: bilinear_attention(q, k, v, &need(bilinear, "bilinear")?, cfg.causal, cfg.normalized)?,
            mask: SlotMask::full(t, cfg.causal),
        }),
        Mechanism::Sparse => sparse_attention(q, k, v, &need(bilinear, "bilinear")?, &opts),
        Mechanism::Adaptive => adaptive_attention(q, k, v, &need(bilinear, "bilinear")?, &need(gates, "span")?, &opts),
        Mechanism::Hybrid => hybrid_attention(q, k, v, &need(bilinear, "bilinear")?, &need(gates, "span")?, &opts),
    }
}

/// Multi-head attention over `x: T×d_model`.
///
/// Without a Q/K/V projection every head attends with `Q = K = V` set to its
/// own `d_k`-wide feature slice of `x`. Head outputs are concatenated and sent
/// through the `d_model×d_model` output projection.
pub fn multi_head<'g>(
    x: &Var<'g>,
    cfg: &AttentionConfig,
    weights: &AttentionParams<Var<'g>>,
) -> Result<(Var<'g>, MaskReport)> {
    let (t, d) = x.value_ref().dims2("multi_head")?;
    if t > cfg.context_window {
        return Err(Error::contract(format!(
            "sequence length {t} exceeds context window {}",
            cfg.context_window
        )));
    }
    if d != cfg.d_model {
        return Err(Error::shape("multi_head", &x.shape(), &[t, cfg.d_model]));
    }
    let dk = cfg.d_k();
    let (qs, ks, vs) = match &weights.qkv {
        Some((w, b)) => {
            let fused = x.matmul(w)?.add_row(b)?;
            (
                fused.slice_cols(0, d)?,
                fused.slice_cols(d, 2 * d)?,
                fused.slice_cols(2 * d, 3 * d)?,
            )
        }
        None => (*x, *x, *x),
    };
    let mut outs = Vec::with_capacity(cfg.n_head);
    let mut report = MaskReport::default();
    for h in 0..cfg.n_head {
        let (a, b) = (h * dk, (h + 1) * dk);
        let q = qs.slice_cols(a, b)?;
        let (k, v) = if weights.qkv.is_some() {
            (ks.slice_cols(a, b)?, vs.slice_cols(a, b)?)
        } else {
            (q, q)
        };
        let head = run_head(
            cfg.mechanism,
            &q,
            &k,
            &v,
            weights.bilinear.get(h),
            weights.span_logits.get(h),
            cfg,
        )?;
        outs.push(head.out);
        report.heads.push(head.mask);
    }
    let merged = Var::concat_cols(&outs)?;
    Ok((merged.matmul(&weights.proj_w)?.add_row(&weights.proj_b)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_token_returns_value_row() {
        let g = Graph::new();
        let x = g.constant(rand_t(&[1, 3], 1));
        let out = standard_attention(&x, &x, &x, true).unwrap();
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn identical_keys_average_values() {
        let g = Graph::new();
        let q = g.constant(rand_t(&[4, 3], 2));
        let k = g.constant(Tensor::full(&[4, 3], 0.7));
        let v = g.constant(rand_t(&[4, 3], 3));
        let out = standard_attention(&q, &k, &v, false).unwrap().value();
        let vv = v.value();
        for i in 0..4 {
            for c in 0..3 {
                let mean = (0..4).map(|r| vv.at(r, c)).sum::<f64>() / 4.0;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_bilinear_form_gives_causal_running_mean() {
        let g = Graph::new();
        let x = g.constant(rand_t(&[5, 2], 4));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let scores = bilinear_scores(&x, &x, &w).unwrap().value();
        assert!(scores.data().iter().all(|&s| s == 0.0));
        let out = bilinear_attention(&x, &x, &x, &w, true, true).unwrap().value();
        let xv = x.value();
        for i in 0..5 {
            for c in 0..2 {
                let mean = (0..=i).map(|r| xv.at(r, c)).sum::<f64>() / (i + 1) as f64;
                assert!((out.at(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unnormalized_bilinear_hand_case() {
        // Q = K = [[1,0],[0,1]], W = [[1,2],[3,4]], V = [[1,1],[2,3]]
        // B = Q W Kᵀ = W; causal keeps B[0][1] out → [[1,0],[3,4]]
        // B·V = [[1,1],[3+8, 3+12]] = [[1,1],[11,15]]
        let g = Graph::new();
        let q = g.constant(Tensor::eye(2));
        let w = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let v = g.constant(Tensor::from_rows(&[&[1.0, 1.0], &[2.0, 3.0]]));
        let out = bilinear_attention(&q, &q, &v, &w, true, false).unwrap().value();
        assert_eq!(out.data(), &[1.0, 1.0, 11.0, 15.0]);
        let full = bilinear_attention(&q, &q, &v, &w, false, false).unwrap().value();
        assert_eq!(full.data(), &[5.0, 7.0, 11.0, 15.0]);
    }

    #[test]
    fn sparse_mask_extremes_and_oracle() {
        let q = rand_t(&[3, 4], 5);
        let k = rand_t(&[3, 4], 6);
        let all = sparse_mask(&q, &k, -1e9, true).unwrap();
        assert_eq!(all.kept(), 6);
        let none = sparse_mask(&q, &k, 1e9, true).unwrap();
        assert_eq!(none.kept(), 3);
        assert!((0..3).all(|i| none.get(i, i) == Slot::Kept));

        let m = sparse_mask(&q, &k, 0.1, true).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..4).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / 2.0;
                let expect = j <= i && (i == j || s >= 0.1);
                assert_eq!(m.get(i, j) == Slot::Kept, expect, "({i},{j}) score {s}");
            }
        }
    }

    #[test]
    fn diagonal_only_mask_returns_values() {
        let g = Graph::new();
        let x = g.constant(rand_t(&[5, 3], 7));
        let w = g.constant(Tensor::eye(3));
        let opts = HeadOptions {
            sparsity_threshold: 1e9,
            ..HeadOptions::default()
        };
        let out = sparse_attention(&x, &x, &x, &w, &opts).unwrap().out.value();
        assert!(close(&out, &x.value(), 1e-12));
    }

    #[test]
    fn adaptive_gate_threshold_cases() {
        let g = Graph::new();
        let saturated = g.leaf(Tensor::full(&[6], 40.0));
        let (m, mask) = adaptive_gate(&saturated, 4, 0.2, true).unwrap();
        assert_eq!(mask.kept(), 10);
        let mv = m.value();
        for i in 0..4 {
            for j in 0..=i {
                assert!((mv.at(i, j) - 1.0).abs() < 1e-12);
            }
        }

        // offset 1 at sigmoid 0.5, offset 2 at sigmoid 0.1
        let logit_01 = (0.1f64 / 0.9).ln();
        let a = g.leaf(Tensor::new(&[3], vec![2.0, 0.0, logit_01]).unwrap());
        let (m, mask) = adaptive_gate(&a, 3, 0.2, true).unwrap();
        let mv = m.value();
        assert_eq!(mv.at(1, 0), 0.5);
        assert_eq!(mv.at(2, 0), 0.0);
        assert_eq!(mask.get(2, 0), Slot::Pruned);
        assert_eq!(mask.span_lengths(), vec![0, 1, 1]);
    }

    #[test]
    fn diagonal_gate_floor() {
        let g = Graph::new();
        let a = g.leaf(Tensor::full(&[4], -10.0));
        let (m, mask) = adaptive_gate(&a, 4, 0.2, true).unwrap();
        assert_eq!(mask.kept(), 4);
        let mv = m.value();
        for i in 0..4 {
            assert_eq!(mv.at(i, i), 1.0);
        }
    }

    #[test]
    fn multi_head_identity_projection_reduces_to_standard() {
        let g = Graph::new();
        let cfg = AttentionConfig {
            mechanism: Mechanism::Standard,
            n_head: 1,
            d_model: 4,
            context_window: 8,
            ..AttentionConfig::default()
        };
        let x = g.constant(rand_t(&[6, 4], 8));
        let weights = AttentionParams {
            bilinear: vec![],
            span_logits: vec![],
            qkv: None,
            proj_w: g.constant(Tensor::eye(4)),
            proj_b: g.constant(Tensor::zeros(&[4])),
        };
        let (out, _) = multi_head(&x, &cfg, &weights).unwrap();
        let reference = standard_attention(&x, &x, &x, true).unwrap();
        assert!(close(&out.value(), &reference.value(), 1e-12));
    }

    #[test]
    fn multi_head_rejects_long_sequences() {
        let g = Graph::new();
        let cfg = AttentionConfig {
            mechanism: Mechanism::Standard,
            n_head: 1,
            d_model: 2,
            context_window: 4,
            ..AttentionConfig::default()
        };
        let x = g.constant(Tensor::zeros(&[5, 2]));
        let weights = AttentionParams {
            bilinear: vec![],
            span_logits: vec![],
            qkv: None,
            proj_w: g.constant(Tensor::eye(2)),
            proj_b: g.constant(Tensor::zeros(&[2])),
        };
        assert!(matches!(multi_head(&x, &cfg, &weights), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        let bad = AttentionConfig {
            d_model: 10,
            n_head: 3,
            ..AttentionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_drop = AttentionConfig {
            span_drop: 1.0,
            ..AttentionConfig::default()
        };
        assert!(bad_drop.validate().is_err());
        assert!(AttentionConfig::default().validate().is_ok());
        assert_eq!(AttentionConfig::default().d_k(), 64);
    }
}
