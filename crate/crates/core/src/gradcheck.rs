//! Central finite-difference checks of the analytic gradients.
//!
//! Masks make the attention functions piecewise smooth: a perturbation that
//! moves a score across the sparsity threshold or a gate across `span_drop`
//! changes which positions are kept. Each evaluation therefore reports a
//! fingerprint of its masks, and coordinates whose `±h` evaluations land in a
//! different mask region are skipped and counted rather than compared.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head, AttentionConfig, AttentionParams, MaskReport, Mechanism, Slot};
use crate::autograd::Graph;
use crate::error::Result;
use crate::model::{forward_sequence, leaves, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is zero compare on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

/// Loss at a parameter point, the mask fingerprint, and (on request) the
/// analytic gradients.
pub struct Evaluation {
    pub loss: f64,
    pub region: u64,
    pub grads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub label: String,
    pub seed: u64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE && self.groups.iter().all(|g| g.checked > 0)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn mask_fingerprint(reports: &[MaskReport]) -> u64 {
    let mut h = DefaultHasher::new();
    for r in reports {
        for m in &r.heads {
            m.len.hash(&mut h);
            for s in &m.slots {
                (*s == Slot::Kept).hash(&mut h);
            }
        }
    }
    h.finish()
}

/// Compares analytic gradients with central differences for every
/// coordinate of every parameter. `fault` multiplies the analytic gradients
/// (a corrupted-rule stand-in for negative controls).
pub fn compare(
    names: &[String],
    params: &[Tensor],
    eval: &mut dyn FnMut(&[Tensor], bool) -> Result<Evaluation>,
    fault: Option<f64>,
) -> Result<Vec<GroupError>> {
    let base = eval(params, true)?;
    let mut point = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate() {
        let mut g = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in 0..params[p].numel() {
            let x0 = params[p].data()[i];
            point[p].data_mut()[i] = x0 + FD_STEP;
            let plus = eval(&point, false)?;
            point[p].data_mut()[i] = x0 - FD_STEP;
            let minus = eval(&point, false)?;
            point[p].data_mut()[i] = x0;
            if plus.region != base.region || minus.region != base.region {
                g.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let analytic = base.grads[p].data()[i] * fault.unwrap_or(1.0);
            g.max_rel_error = g.max_rel_error.max(rel_error(analytic, numeric));
            g.max_abs_grad = g.max_abs_grad.max(analytic.abs());
            g.checked += 1;
        }
        groups.push(g);
    }
    Ok(groups)
}

/// A small multi-head attention problem: two sequences of 8 tokens, width 8,
/// two heads of width 4, span logits drawn around the sigmoid midpoint.
pub struct AttentionCase {
    pub cfg: AttentionConfig,
    pub inputs: Vec<Tensor>,
    pub weights: AttentionParams<Tensor>,
    /// Random projection turning the outputs into a scalar loss.
    pub readout: Vec<Tensor>,
}

impl AttentionCase {
    pub fn new(mechanism: Mechanism, seed: u64) -> Self {
        let (t, d) = (8, 8);
        let cfg = AttentionConfig {
            mechanism,
            n_head: 2,
            d_model: d,
            context_window: t,
            ..AttentionConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = AttentionParams::init(&cfg, false, 0.5, &mut rng);
        for a in &mut weights.span_logits {
            *a = Tensor::randn(a.shape(), 1.0, &mut rng);
        }
        for w in &mut weights.bilinear {
            w.add_assign(&Tensor::randn(w.shape(), 0.3, &mut rng))
                .expect("same shape");
        }
        let inputs = (0..2).map(|_| Tensor::randn(&[t, d], 1.0, &mut rng)).collect();
        let readout = (0..2).map(|_| Tensor::randn(&[t, d], 1.0, &mut rng)).collect();
        Self {
            cfg,
            inputs,
            weights,
            readout,
        }
    }

    fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.inputs.len()).map(|b| format!("input.{b}")).collect();
        let mut named = Vec::new();
        self.weights.visit("attn", &mut named);
        out.extend(named.into_iter().map(|(n, _)| n));
        out
    }

    fn flat(&self) -> Vec<Tensor> {
        let mut out = self.inputs.clone();
        let mut named = Vec::new();
        self.weights.visit("attn", &mut named);
        out.extend(named.into_iter().map(|(_, t)| t.clone()));
        out
    }

    fn evaluate(&self, point: &[Tensor], want_grads: bool) -> Result<Evaluation> {
        let nb = self.inputs.len();
        let mut weights = self.weights.clone();
        {
            let mut slots = Vec::new();
            weights.visit_mut(&mut slots);
            for (slot, t) in slots.into_iter().zip(&point[nb..]) {
                *slot = t.clone();
            }
        }
        let graph = Graph::new();
        let xs: Vec<_> = point[..nb].iter().map(|t| graph.leaf(t.clone())).collect();
        let w = weights.map(&mut |t| graph.leaf(t.clone()));
        let mut loss = None;
        let mut reports = Vec::new();
        for (x, r) in xs.iter().zip(&self.readout) {
            let (out, report) = multi_head(x, &self.cfg, &w)?;
            let term = out.mul(&graph.constant(r.clone()))?.sum();
            loss = Some(match loss {
                None => term,
                Some(acc) => term.add(&acc)?,
            });
            reports.push(report);
        }
        let loss = loss.expect("at least one input");
        let mut grads = Vec::new();
        if want_grads {
            graph.backward(loss)?;
            grads.extend(xs.iter().map(|x| x.grad().unwrap_or_else(|| Tensor::zeros(&x.shape()))));
            let mut named = Vec::new();
            w.visit("attn", &mut named);
            grads.extend(
                named
                    .into_iter()
                    .map(|(_, v)| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))),
            );
        }
        let value = loss.value_ref().item();
        Ok(Evaluation {
            loss: value,
            region: mask_fingerprint(&reports),
            grads,
        })
    }

    pub fn check(&self, seed: u64, fault: Option<f64>) -> Result<GradcheckReport> {
        let groups = compare(&self.names(), &self.flat(), &mut |p, g| self.evaluate(p, g), fault)?;
        Ok(GradcheckReport {
            label: format!("{} attention", self.cfg.mechanism),
            seed,
            groups,
        })
    }
}

pub fn check_mechanism(mechanism: Mechanism, seed: u64, fault: Option<f64>) -> Result<GradcheckReport> {
    AttentionCase::new(mechanism, seed).check(seed, fault)
}

/// The tiny full-model configuration used for end-to-end checks.
pub fn tiny_model(mechanism: Mechanism) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        vocab_size: 16,
        attention: AttentionConfig {
            mechanism,
            n_head: 2,
            d_model: 8,
            context_window: 8,
            ..AttentionConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Cross-entropy of a random 8-token sequence through the whole tiny model,
/// checked for every parameter tensor.
pub fn check_model(mechanism: Mechanism, seed: u64, fault: Option<f64>) -> Result<GradcheckReport> {
    let cfg = tiny_model(mechanism);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = ModelWeights::init(&cfg, &mut rng)?;
    // Larger weights than the default init keep the gradients well above
    // the finite-difference noise floor.
    let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
    for (slot, name) in weights.values_mut().into_iter().zip(&names) {
        let shape = slot.shape().to_vec();
        if name.contains(".span.") {
            *slot = Tensor::randn(&shape, 1.0, &mut rng);
        } else if !name.contains("ln") {
            slot.add_assign(&Tensor::randn(&shape, 0.3, &mut rng))?;
        }
    }
    let ids: Vec<usize> = (0..cfg.context_window() + 1)
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect();
    let (inputs, targets) = (&ids[..ids.len() - 1], &ids[1..]);
    let flat: Vec<Tensor> = weights.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut eval = |point: &[Tensor], want_grads: bool| -> Result<Evaluation> {
        let mut w = weights.clone();
        for (slot, t) in w.values_mut().into_iter().zip(point) {
            *slot = t.clone();
        }
        let graph = Graph::new();
        let params = leaves(&graph, &w);
        let (logits, reports) = forward_sequence(&cfg, &params, inputs, None)?;
        let loss = logits.cross_entropy(targets, usize::MAX)?;
        let mut grads = Vec::new();
        if want_grads {
            graph.backward(loss)?;
            grads = params
                .named()
                .into_iter()
                .map(|(_, v)| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
                .collect();
        }
        let value = loss.value_ref().item();
        Ok(Evaluation {
            loss: value,
            region: mask_fingerprint(&reports),
            grads,
        })
    };
    let groups = compare(&names, &flat, &mut eval, fault)?;
    Ok(GradcheckReport {
        label: format!("{mechanism} model"),
        seed,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_attention_passes_and_fault_fails() {
        let ok = check_mechanism(Mechanism::Hybrid, 1, None).unwrap();
        assert!(ok.passed(), "{ok:?}");
        let span = ok.groups.iter().find(|g| g.name.contains("span")).unwrap();
        assert!(span.max_abs_grad > 0.0);
        let bad = check_mechanism(Mechanism::Hybrid, 1, Some(1.01)).unwrap();
        assert!(!bad.passed());
    }
}
