//! GPT-2-style decoder-only transformer.
//!
//! token + learned position embeddings → layer norm → pre-norm blocks
//! (attention and feed-forward sub-layers, each wrapped in a residual) →
//! final layer norm → projection onto the vocabulary, tied to the token
//! embedding unless configured otherwise.

use rand::distr::Distribution;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionConfig, AttentionParams, MaskReport, Mechanism};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub vocab_size: usize,
    pub ffn_multiplier: usize,
    /// Adds the classic fused Q/K/V projection in front of every head.
    pub qkv_projection: bool,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Per-block mechanism override; empty means every block uses `attention.mechanism`.
    pub block_mechanisms: Vec<Mechanism>,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 12,
            vocab_size: 50_257,
            ffn_multiplier: 4,
            qkv_projection: false,
            tie_embeddings: true,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            block_mechanisms: Vec::new(),
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The reference GPT-2 small layout: standard attention behind Q/K/V projections.
    pub fn gpt2_small() -> Self {
        let mut cfg = Self::default();
        cfg.attention.mechanism = Mechanism::Standard;
        cfg.qkv_projection = true;
        cfg
    }

    pub fn with_mechanism(mut self, mechanism: Mechanism) -> Self {
        self.attention.mechanism = mechanism;
        self
    }

    pub fn n_head(&self) -> usize {
        self.attention.n_head
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn context_window(&self) -> usize {
        self.attention.context_window
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_multiplier * self.d_model()
    }

    pub fn mechanism_for(&self, layer: usize) -> Mechanism {
        self.block_mechanisms
            .get(layer)
            .copied()
            .unwrap_or(self.attention.mechanism)
    }

    pub fn block_attention(&self, layer: usize) -> AttentionConfig {
        AttentionConfig {
            mechanism: self.mechanism_for(layer),
            ..self.attention.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.vocab_size == 0 || self.n_layer == 0 || self.ffn_multiplier == 0 {
            return Err(Error::contract(
                "vocab_size, n_layer and ffn_multiplier must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !self.block_mechanisms.is_empty() && self.block_mechanisms.len() != self.n_layer {
            return Err(Error::contract(format!(
                "block_mechanisms lists {} entries for {} layers",
                self.block_mechanisms.len(),
                self.n_layer
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gain: P,
    pub bias: P,
}

impl<P> LayerNormParams<P> {
    fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> LayerNormParams<Q> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut P>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl LayerNormParams<Tensor> {
    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<P> {
    pub fc_w: P,
    pub fc_b: P,
    pub out_w: P,
    pub out_b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1: LayerNormParams<P>,
    pub attn: AttentionParams<P>,
    pub ln2: LayerNormParams<P>,
    pub ffn: FfnParams<P>,
}

/// Every trainable tensor of the model, generic over storage: values
/// (`ModelParams<Tensor>`), graph handles (`ModelParams<Var>`) and gradients
/// share one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub token_embedding: P,
    pub position_embedding: P,
    pub input_ln: LayerNormParams<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub final_ln: LayerNormParams<P>,
    /// Separate output projection `d_model×vocab`; `None` when tied.
    pub lm_head: Option<P>,
}

pub type ModelWeights = ModelParams<Tensor>;

impl<P> ModelParams<P> {
    /// `(name, value)` pairs in a fixed order shared with [`Self::values_mut`] and [`Self::map`].
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        out.push(("wte".to_string(), &self.token_embedding));
        out.push(("wpe".to_string(), &self.position_embedding));
        self.input_ln.visit("ln_in", &mut out);
        for (l, b) in self.blocks.iter().enumerate() {
            b.ln1.visit(&format!("h.{l}.ln1"), &mut out);
            b.attn.visit(&format!("h.{l}.attn"), &mut out);
            b.ln2.visit(&format!("h.{l}.ln2"), &mut out);
            out.push((format!("h.{l}.ffn.fc.w"), &b.ffn.fc_w));
            out.push((format!("h.{l}.ffn.fc.b"), &b.ffn.fc_b));
            out.push((format!("h.{l}.ffn.out.w"), &b.ffn.out_w));
            out.push((format!("h.{l}.ffn.out.b"), &b.ffn.out_b));
        }
        self.final_ln.visit("ln_f", &mut out);
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        self.input_ln.visit_mut(&mut out);
        for b in &mut self.blocks {
            b.ln1.visit_mut(&mut out);
            b.attn.visit_mut(&mut out);
            b.ln2.visit_mut(&mut out);
            out.push(&mut b.ffn.fc_w);
            out.push(&mut b.ffn.fc_b);
            out.push(&mut b.ffn.out_w);
            out.push(&mut b.ffn.out_b);
        }
        self.final_ln.visit_mut(&mut out);
        if let Some(head) = &mut self.lm_head {
            out.push(head);
        }
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        let f = &mut f;
        ModelParams {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            input_ln: self.input_ln.map(f),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: b.ln1.map(f),
                    attn: b.attn.map(f),
                    ln2: b.ln2.map(f),
                    ffn: FfnParams {
                        fc_w: f(&b.ffn.fc_w),
                        fc_b: f(&b.ffn.fc_b),
                        out_w: f(&b.ffn.out_w),
                        out_b: f(&b.ffn.out_b),
                    },
                })
                .collect(),
            final_ln: self.final_ln.map(f),
            lm_head: self.lm_head.as_ref().map(f),
        }
    }
}

impl ModelParams<Tensor> {
    /// Fresh weights drawn from `rng`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, &mut |shape, std| Tensor::randn(shape, std, rng))
    }

    /// The [`ModelParams::init`] layout with zero noise: identity bilinear
    /// forms, unit layer-norm gains, everything else zero or constant.
    pub fn deterministic(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, &mut |shape, _| Tensor::zeros(shape))
    }

    fn build(cfg: &ModelConfig, noise: &mut dyn FnMut(&[usize], f64) -> Tensor) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model();
        let d_ff = cfg.d_ff();
        let residual_std = 0.02 / (2.0 * cfg.n_layer as f64).sqrt();
        let token_embedding = noise(&[cfg.vocab_size, d], 0.02);
        let position_embedding = noise(&[cfg.context_window(), d], 0.01);
        let blocks = (0..cfg.n_layer)
            .map(|l| BlockParams {
                ln1: LayerNormParams::init(d),
                attn: AttentionParams::build(&cfg.block_attention(l), cfg.qkv_projection, residual_std, noise),
                ln2: LayerNormParams::init(d),
                ffn: FfnParams {
                    fc_w: noise(&[d, d_ff], 0.02),
                    fc_b: Tensor::zeros(&[d_ff]),
                    out_w: noise(&[d_ff, d], residual_std),
                    out_b: Tensor::zeros(&[d]),
                },
            })
            .collect();
        let lm_head = (!cfg.tie_embeddings).then(|| noise(&[d, cfg.vocab_size], 0.02));
        Ok(Self {
            token_embedding,
            position_embedding,
            input_ln: LayerNormParams::init(d),
            blocks,
            final_ln: LayerNormParams::init(d),
            lm_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        let src: Vec<&Tensor> = other.named().into_iter().map(|(_, t)| t).collect();
        let dst = self.values_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("accumulate", &[dst.len()], &[src.len()]));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.add_assign(s)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.values_mut() {
            t.scale_in_place(k);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg)?;
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&actual) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Names and shapes of every parameter a config implies, in [`ModelParams::named`] order.
pub fn expected_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let d = cfg.d_model();
    let dk = cfg.attention.d_k();
    let ln = |t: &mut Vec<(String, Vec<usize>)>, p: &str| {
        t.push((format!("{p}.gain"), vec![d]));
        t.push((format!("{p}.bias"), vec![d]));
    };
    let mut out = vec![
        ("wte".to_string(), vec![cfg.vocab_size, d]),
        ("wpe".to_string(), vec![cfg.context_window(), d]),
    ];
    ln(&mut out, "ln_in");
    for l in 0..cfg.n_layer {
        let m = cfg.mechanism_for(l);
        ln(&mut out, &format!("h.{l}.ln1"));
        if m.uses_bilinear() {
            for h in 0..cfg.n_head() {
                out.push((format!("h.{l}.attn.bilinear.{h}"), vec![dk, dk]));
            }
        }
        if m.uses_span_gates() {
            for h in 0..cfg.n_head() {
                out.push((format!("h.{l}.attn.span.{h}"), vec![cfg.context_window()]));
            }
        }
        if cfg.qkv_projection {
            out.push((format!("h.{l}.attn.qkv.w"), vec![d, 3 * d]));
            out.push((format!("h.{l}.attn.qkv.b"), vec![3 * d]));
        }
        out.push((format!("h.{l}.attn.proj.w"), vec![d, d]));
        out.push((format!("h.{l}.attn.proj.b"), vec![d]));
        ln(&mut out, &format!("h.{l}.ln2"));
        out.push((format!("h.{l}.ffn.fc.w"), vec![d, cfg.d_ff()]));
        out.push((format!("h.{l}.ffn.fc.b"), vec![cfg.d_ff()]));
        out.push((format!("h.{l}.ffn.out.w"), vec![cfg.d_ff(), d]));
        out.push((format!("h.{l}.ffn.out.b"), vec![d]));
    }
    ln(&mut out, "ln_f");
    if !cfg.tie_embeddings {
        out.push(("lm_head".to_string(), vec![d, cfg.vocab_size]));
    }
    Ok(out)
}

/// Trainable-scalar counts per component.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub layer_norm: usize,
    pub attention_bilinear: usize,
    pub attention_span: usize,
    pub attention_qkv: usize,
    pub attention_output: usize,
    pub ffn: usize,
    pub lm_head: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn rows(&self) -> [(&'static str, usize); 9] {
        [
            ("token_embedding", self.token_embedding),
            ("position_embedding", self.position_embedding),
            ("layer_norm", self.layer_norm),
            ("attention_bilinear", self.attention_bilinear),
            ("attention_span", self.attention_span),
            ("attention_qkv", self.attention_qkv),
            ("attention_output", self.attention_output),
            ("ffn", self.ffn),
            ("lm_head", self.lm_head),
        ]
    }
}

/// Exact number of trainable scalars implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let d = cfg.d_model();
    let dk = cfg.attention.d_k();
    let heads = cfg.n_head();
    let mut c = ParamCount {
        token_embedding: cfg.vocab_size * d,
        position_embedding: cfg.context_window() * d,
        layer_norm: 2 * d * (2 + 2 * cfg.n_layer),
        lm_head: if cfg.tie_embeddings { 0 } else { d * cfg.vocab_size },
        ..ParamCount::default()
    };
    for l in 0..cfg.n_layer {
        let m = cfg.mechanism_for(l);
        if m.uses_bilinear() {
            c.attention_bilinear += heads * dk * dk;
        }
        if m.uses_span_gates() {
            c.attention_span += heads * cfg.context_window();
        }
        if cfg.qkv_projection {
            c.attention_qkv += 3 * d * d + 3 * d;
        }
        c.attention_output += d * d + d;
        c.ffn += 2 * d * cfg.d_ff() + cfg.d_ff() + d;
    }
    c.total = c.rows().iter().map(|(_, n)| n).sum();
    Ok(c)
}

/// Graph handles for every parameter, as trainable leaves.
pub fn leaves<'g>(graph: &'g Graph, weights: &ModelWeights) -> ModelParams<Var<'g>> {
    weights.map(|t| graph.leaf(t.clone()))
}

/// Graph handles for every parameter, as constants (inference only).
pub fn constants<'g>(graph: &'g Graph, weights: &ModelWeights) -> ModelParams<Var<'g>> {
    weights.map(|t| graph.constant(t.clone()))
}

/// Position-wise feed-forward sub-layer: `GELU(x·W1 + b1)·W2 + b2`.
pub fn ffn<'g>(x: &Var<'g>, p: &FfnParams<Var<'g>>) -> Result<Var<'g>> {
    x.matmul(&p.fc_w)?
        .add_row(&p.fc_b)?
        .gelu()
        .matmul(&p.out_w)?
        .add_row(&p.out_b)
}

fn dropout<'g>(x: Var<'g>, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var<'g>> {
    let Some(rng) = rng.as_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = rand::distr::Bernoulli::new(1.0 - p).map_err(|e| Error::contract(e.to_string()))?;
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if keep.sample(&mut **rng) { scale } else { 0.0 })
        .collect();
    x.mul_const(Tensor::new(&shape, mask)?)
}

/// Logits `T×vocab` for one sequence, plus the per-block attention masks.
/// Passing `dropout_rng` enables dropout (training mode).
pub fn forward_sequence<'g>(
    cfg: &ModelConfig,
    params: &ModelParams<Var<'g>>,
    ids: &[usize],
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(Var<'g>, Vec<MaskReport>)> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::contract("cannot run the model on an empty sequence"));
    }
    if t > cfg.context_window() {
        return Err(Error::contract(format!(
            "sequence length {t} exceeds context window {}",
            cfg.context_window()
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let tok = params.token_embedding.gather_rows(ids)?;
    let pos = params.position_embedding.gather_rows(&positions)?;
    let eps = cfg.layer_norm_eps;
    let mut x = tok
        .add(&pos)?
        .layer_norm(&params.input_ln.gain, &params.input_ln.bias, eps)?;
    let mut reports = Vec::with_capacity(cfg.n_layer);
    for (l, block) in params.blocks.iter().enumerate() {
        let h = x.layer_norm(&block.ln1.gain, &block.ln1.bias, eps)?;
        let (a, report) = multi_head(&h, &cfg.block_attention(l), &block.attn)?;
        let a = dropout(a, cfg.dropout, &mut dropout_rng)?;
        x = x.add(&a)?;
        let h = x.layer_norm(&block.ln2.gain, &block.ln2.bias, eps)?;
        let f = dropout(ffn(&h, &block.ffn)?, cfg.dropout, &mut dropout_rng)?;
        x = x.add(&f)?;
        reports.push(report);
    }
    let x = x.layer_norm(&params.final_ln.gain, &params.final_ln.bias, eps)?;
    let logits = match &params.lm_head {
        Some(head) => x.matmul(head)?,
        None => x.matmul_t(&params.token_embedding)?,
    };
    Ok((logits, reports))
}

/// Logits `B×T×vocab` for a rectangular batch of token ids (inference).
pub fn forward(cfg: &ModelConfig, weights: &ModelWeights, tokens: &[Vec<usize>]) -> Result<Tensor> {
    let t = tokens.first().map_or(0, Vec::len);
    if tokens.iter().any(|row| row.len() != t) {
        return Err(Error::contract("forward expects equal-length rows"));
    }
    let mut data = Vec::with_capacity(tokens.len() * t * cfg.vocab_size);
    for row in tokens {
        let graph = Graph::new();
        let params = constants(&graph, weights);
        let (logits, _) = forward_sequence(cfg, &params, row, None)?;
        data.extend_from_slice(logits.value_ref().data());
    }
    Tensor::new(&[tokens.len(), t, cfg.vocab_size], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

/// Autoregressive decoding. The model sees at most the last
/// `context_window` tokens. Decoding stops after `max_new` tokens or right
/// after emitting any id in `stop`.
pub fn generate(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    prompt: &[usize],
    max_new: usize,
    sampling: Sampling,
    stop: &[usize],
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::contract("generate needs a non-empty prompt"));
    }
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        let start = out.len().saturating_sub(cfg.context_window());
        let graph = Graph::new();
        let params = constants(&graph, weights);
        let (logits, _) = forward_sequence(cfg, &params, &out[start..], None)?;
        let logits = logits.value_ref();
        let last = logits.row(logits.shape()[0] - 1);
        let next = pick(last, sampling, rng)?;
        out.push(next);
        if stop.contains(&next) {
            break;
        }
    }
    Ok(out)
}

fn pick(logits: &[f64], sampling: Sampling, rng: &mut dyn RngCore) -> Result<usize> {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &x)| if x > best.1 { (i, x) } else { best },
            )
            .0
    };
    let (temperature, k) = match sampling {
        Sampling::Greedy => return Ok(argmax()),
        Sampling::Temperature(t) => (t, logits.len()),
        Sampling::TopK { k, temperature } => (temperature, k.max(1)),
    };
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::contract("sampling temperature must be positive"));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights).map_err(|e| Error::contract(e.to_string()))?;
    Ok(order[dist.sample(rng)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            vocab_size: 32,
            attention: AttentionConfig {
                mechanism,
                n_head: 2,
                d_model: 16,
                context_window: 8,
                ..AttentionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gpt2_scale_counts() {
        let sparse = param_count(&ModelConfig::default().with_mechanism(Mechanism::Sparse)).unwrap();
        let adaptive = param_count(&ModelConfig::default().with_mechanism(Mechanism::Adaptive)).unwrap();
        let hybrid = param_count(&ModelConfig::default()).unwrap();
        let gpt2 = param_count(&ModelConfig::gpt2_small()).unwrap();
        assert_eq!(adaptive.total - sparse.total, 12 * 12 * 1024);
        assert_eq!(adaptive.total, hybrid.total);
        assert!((sparse.total as f64 / 102.91e6 - 1.0).abs() < 0.02);
        assert!((adaptive.total as f64 / 103.06e6 - 1.0).abs() < 0.02);
        assert!((gpt2.total as f64 / 124e6 - 1.0).abs() < 0.01);
    }

    #[test]
    fn count_matches_allocated_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in Mechanism::ALL {
            for (qkv, tie) in [(false, true), (true, false)] {
                let cfg = ModelConfig {
                    qkv_projection: qkv,
                    tie_embeddings: tie,
                    ..tiny(m)
                };
                let w = ModelWeights::init(&cfg, &mut rng).unwrap();
                assert_eq!(w.num_scalars(), param_count(&cfg).unwrap().total, "{m} qkv={qkv}");
                w.check_shapes(&cfg).unwrap();
            }
        }
    }

    #[test]
    fn block_override_changes_counts() {
        let mut cfg = tiny(Mechanism::Sparse);
        cfg.block_mechanisms = vec![Mechanism::Sparse, Mechanism::Hybrid];
        let base = param_count(&tiny(Mechanism::Sparse)).unwrap().total;
        assert_eq!(param_count(&cfg).unwrap().total, base + 2 * 8);
        cfg.block_mechanisms = vec![Mechanism::Sparse];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let cfg = tiny(Mechanism::Hybrid);
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            forward(&cfg, &w, &[vec![1, 40]]),
            Err(Error::Index { index: 40, .. })
        ));
        assert!(matches!(forward(&cfg, &w, &[vec![1; 9]]), Err(Error::Contract(_))));
    }

    #[test]
    fn ffn_zero_weights_leave_bias() {
        let g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let p = FfnParams {
            fc_w: g.constant(Tensor::zeros(&[4, 8])),
            fc_b: g.constant(Tensor::zeros(&[8])),
            out_w: g.constant(Tensor::zeros(&[8, 4])),
            out_b: g.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        };
        let y = ffn(&x, &p).unwrap().value();
        for i in 0..3 {
            assert_eq!(y.row(i), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn generate_contracts() {
        let cfg = tiny(Mechanism::Adaptive);
        let w = ModelWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate(&cfg, &w, &[], 3, Sampling::Greedy, &[], &mut rng).is_err());
        assert_eq!(
            generate(&cfg, &w, &[4, 5], 0, Sampling::Greedy, &[], &mut rng).unwrap(),
            vec![4, 5]
        );
        let a = generate(&cfg, &w, &[4, 5], 12, Sampling::Greedy, &[], &mut rng).unwrap();
        let b = generate(&cfg, &w, &[4, 5], 12, Sampling::Greedy, &[], &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 14);
        let s = generate(
            &cfg,
            &w,
            &[4, 5],
            5,
            Sampling::TopK { k: 3, temperature: 1.0 },
            &[],
            &mut rng,
        )
        .unwrap();
        assert!(s.iter().all(|&t| t < 32));
    }
}
