//! Adam with linear learning-rate decay, gradient accumulation over
//! micro-batches, global-norm clipping and patience-based early stopping.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{length_bucket_batches, Batch, TrainSequence, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{constants, forward_sequence, leaves, ModelConfig, ModelWeights};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{cross_entropy_sum, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub patience: usize,
    /// Updates between validation passes.
    pub eval_interval: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Score article tokens as well as summary tokens.
    pub score_article: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 6e-4,
            lr_min: 0.0,
            max_iters: 2000,
            batch_size: 12,
            grad_accum_steps: 48,
            patience: 5,
            eval_interval: 100,
            seed: 0,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            score_article: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::contract(msg.to_string()));
        if self.grad_accum_steps < 1 {
            return fail("grad_accum_steps must be at least 1");
        }
        if self.patience < 1 {
            return fail("patience must be at least 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if self.eval_interval < 1 {
            return fail("eval_interval must be at least 1");
        }
        if !self.lr_min.is_finite() || !self.lr_max.is_finite() || self.lr_min > self.lr_max {
            return fail("learning rates must be finite with lr_min <= lr_max");
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return fail("clip_norm must be non-negative");
        }
        Ok(())
    }
}

/// Linear interpolation from `lr_max` at step 0 to `lr_min` at `max_iters`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.max_iters {
        return Err(Error::contract(format!(
            "step {step} is past max_iters {}",
            cfg.max_iters
        )));
    }
    if cfg.max_iters == 0 {
        return Ok(cfg.lr_max);
    }
    let frac = step as f64 / cfg.max_iters as f64;
    Ok(cfg.lr_max + (cfg.lr_min - cfg.lr_max) * frac)
}

/// Tokens consumed by one optimizer update.
pub fn tokens_per_iteration(batch_size: usize, seq_len: usize, grad_accum_steps: usize) -> usize {
    batch_size * seq_len * grad_accum_steps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub best_val_loss: f64,
    pub evals_since_improvement: usize,
    pub patience: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            evals_since_improvement: 0,
            patience,
        }
    }

    /// Records a validation loss. The counter resets on strict improvement;
    /// training stops once it exceeds `patience`.
    pub fn check(&mut self, val_loss: f64) -> StopDecision {
        if val_loss < self.best_val_loss {
            self.best_val_loss = val_loss;
            self.evals_since_improvement = 0;
        } else {
            self.evals_since_improvement += 1;
        }
        if self.evals_since_improvement > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub early: EarlyStopping,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(weights: &ModelWeights, cfg: &TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = weights.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self {
            step: 0,
            early: EarlyStopping::new(cfg.patience),
            adam: AdamState::new(shapes.iter().map(Vec::as_slice)),
        }
    }
}

/// Sum of scored-token cross-entropy over a batch and the number of scored tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSum {
    pub total: f64,
    pub tokens: usize,
}

impl LossSum {
    pub fn mean(&self) -> Option<f64> {
        (self.tokens > 0).then(|| self.total / self.tokens as f64)
    }

    pub fn add(&mut self, other: LossSum) {
        self.total += other.total;
        self.tokens += other.tokens;
    }
}

/// Gradient of `scale · Σ CE` over every scored token of `batch`; returns the
/// unscaled loss sum alongside.
pub fn batch_gradients(
    model_cfg: &ModelConfig,
    weights: &ModelWeights,
    batch: &Batch,
    scale: f64,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<(LossSum, ModelWeights)> {
    let mut grads = weights.zeros_like();
    let mut loss = LossSum::default();
    for b in 0..batch.len() {
        let (inputs, targets) = batch.row(b);
        if inputs.is_empty() {
            continue;
        }
        let graph = Graph::new();
        let params = leaves(&graph, weights);
        let rng = dropout_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        let (logits, _) = forward_sequence(model_cfg, &params, inputs, rng)?;
        let ce = logits.cross_entropy_scaled(targets, IGNORE_INDEX, scale)?;
        let (sum, count, _) = cross_entropy_sum(&logits.value_ref(), targets, IGNORE_INDEX)?;
        loss.add(LossSum {
            total: sum,
            tokens: count,
        });
        graph.backward(ce)?;
        let row_grads = params.map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())));
        grads.accumulate(&row_grads)?;
    }
    Ok((loss, grads))
}

/// One optimizer update from `micro_batches.len()` accumulated micro-batches.
/// Each micro-batch contributes its token-mean loss gradient scaled by
/// `1/k`; the returned loss is the mean of the micro-batch losses.
pub fn train_step(
    model_cfg: &ModelConfig,
    weights: &mut ModelWeights,
    micro_batches: &[Batch],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    if micro_batches.is_empty() {
        return Err(Error::contract("train_step needs at least one micro-batch"));
    }
    let k = micro_batches.len() as f64;
    let mut grads = weights.zeros_like();
    let mut loss = 0.0;
    for batch in micro_batches {
        let tokens = batch.scored_tokens();
        if tokens == 0 {
            continue;
        }
        let rng = dropout_rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
        let (sum, g) = batch_gradients(model_cfg, weights, batch, 1.0 / (tokens as f64 * k), rng)?;
        grads.accumulate(&g)?;
        loss += sum.total / tokens as f64 / k;
    }
    if cfg.clip_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
    }
    let lr = lr_schedule(state.step.min(cfg.max_iters), cfg)?;
    let grad_refs: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
    adam_step(&mut weights.values_mut(), &grad_refs, &mut state.adam, lr, cfg.adam)?;
    state.step += 1;
    Ok(loss)
}

/// Token-weighted cross-entropy over `batches` without building gradients.
pub fn evaluate_loss(model_cfg: &ModelConfig, weights: &ModelWeights, batches: &[Batch]) -> Result<LossSum> {
    let mut loss = LossSum::default();
    for batch in batches {
        for b in 0..batch.len() {
            let (inputs, targets) = batch.row(b);
            if inputs.is_empty() {
                continue;
            }
            let graph = Graph::new();
            let params = constants(&graph, weights);
            let (logits, _) = forward_sequence(model_cfg, &params, inputs, None)?;
            let (sum, count, _) = cross_entropy_sum(&logits.value_ref(), targets, IGNORE_INDEX)?;
            loss.add(LossSum {
                total: sum,
                tokens: count,
            });
        }
    }
    Ok(loss)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl LogRecord {
    pub const HEADER: &'static str = "step,lr,train_loss,val_loss";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6e},{:.8}", self.step, self.lr, self.train_loss)?;
        match self.val_loss {
            Some(v) => write!(f, ",{v:.8}"),
            None => write!(f, ","),
        }
    }
}

/// Callbacks the training loop reports through.
pub trait TrainHooks {
    fn on_log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    /// Called after a validation pass that improved the best loss.
    fn on_improvement(&mut self, _step: usize, _weights: &ModelWeights, _val_loss: f64) -> Result<()> {
        Ok(())
    }
}

impl TrainHooks for () {}

/// Collects log records in memory.
#[derive(Default)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
}

impl TrainHooks for MemoryLog {
    fn on_log(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub stopped_early: bool,
    pub best_val_loss: Option<f64>,
    pub final_train_loss: f64,
}

/// Endless stream of length-bucketed micro-batches, reshuffled every epoch.
struct BatchStream<'a> {
    seqs: &'a [TrainSequence],
    batch_size: usize,
    rng: ChaCha8Rng,
    pending: Vec<Batch>,
}

impl BatchStream<'_> {
    fn next_batch(&mut self) -> Batch {
        if self.pending.is_empty() {
            let seed = self.rng.random();
            self.pending = length_bucket_batches(self.seqs, self.batch_size, seed);
            self.pending.reverse();
        }
        self.pending.pop().expect("non-empty epoch")
    }
}

/// Runs training until `max_iters` updates or early stopping. Validation runs
/// every `eval_interval` updates and after the last one, over `val` in a fixed
/// batch order; with no validation data early stopping is disabled.
pub fn train(
    model_cfg: &ModelConfig,
    weights: &mut ModelWeights,
    train_seqs: &[TrainSequence],
    val_seqs: &[TrainSequence],
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_seqs.iter().all(|s| s.input_len() == 0) {
        return Err(Error::contract("training data has no usable sequences"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut stream = BatchStream {
        seqs: train_seqs,
        batch_size: cfg.batch_size,
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        pending: Vec::new(),
    };
    let val_batches = length_bucket_batches(val_seqs, cfg.batch_size, 0);
    let mut state = TrainState::new(weights, cfg);
    let mut stopped_early = false;
    let mut train_loss = f64::NAN;
    while state.step < cfg.max_iters {
        let micro: Vec<Batch> = (0..cfg.grad_accum_steps).map(|_| stream.next_batch()).collect();
        let lr = lr_schedule(state.step, cfg)?;
        let use_dropout = model_cfg.dropout > 0.0;
        let rng = use_dropout.then_some(&mut dropout_rng as &mut dyn RngCore);
        train_loss = train_step(model_cfg, weights, &micro, cfg, &mut state, rng)?;
        if !train_loss.is_finite() {
            return Err(Error::contract(format!("training diverged at step {}", state.step)));
        }
        let evaluate = state.step.is_multiple_of(cfg.eval_interval) || state.step == cfg.max_iters;
        let val_loss = if evaluate && !val_batches.is_empty() {
            evaluate_loss(model_cfg, weights, &val_batches)?.mean()
        } else {
            None
        };
        hooks.on_log(&LogRecord {
            step: state.step,
            lr,
            train_loss,
            val_loss,
        })?;
        if let Some(v) = val_loss {
            let before = state.early.best_val_loss;
            let decision = state.early.check(v);
            if state.early.best_val_loss < before {
                hooks.on_improvement(state.step, weights, v)?;
            }
            if decision == StopDecision::Stop {
                stopped_early = true;
                break;
            }
        }
    }
    let best = state.early.best_val_loss;
    Ok(TrainOutcome {
        steps: state.step,
        stopped_early,
        best_val_loss: best.is_finite().then_some(best),
        final_train_loss: train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionConfig, Mechanism};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layer: 1,
            vocab_size: 11,
            attention: AttentionConfig {
                mechanism: Mechanism::Hybrid,
                n_head: 2,
                d_model: 8,
                context_window: 8,
                ..AttentionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn seq(ids: &[usize]) -> TrainSequence {
        TrainSequence {
            ids: ids.to_vec(),
            scored: vec![true; ids.len() - 1],
        }
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 6e-4);
        assert_eq!(lr_schedule(cfg.max_iters, &cfg).unwrap(), 0.0);
        assert!((lr_schedule(cfg.max_iters / 2, &cfg).unwrap() - 3e-4).abs() < 1e-18);
        assert!(lr_schedule(cfg.max_iters + 1, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for s in 0..=cfg.max_iters {
            let lr = lr_schedule(s, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn tokens_per_update() {
        assert_eq!(tokens_per_iteration(12, 512, 48), 294_912);
        assert_eq!(tokens_per_iteration(12, 1024, 48), 589_824);
    }

    #[test]
    fn early_stopping_counts() {
        let mut es = EarlyStopping::new(5);
        for v in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.1] {
            assert_eq!(es.check(v), StopDecision::Continue);
        }
        let mut es = EarlyStopping::new(5);
        es.check(1.0);
        for _ in 0..5 {
            assert_eq!(es.check(1.0), StopDecision::Continue);
        }
        assert_eq!(es.check(1.0), StopDecision::Stop);

        let mut es = EarlyStopping::new(5);
        es.check(1.0);
        for _ in 0..4 {
            es.check(2.0);
        }
        assert_eq!(es.check(0.9), StopDecision::Continue);
        assert_eq!(es.evals_since_improvement, 0);
    }

    #[test]
    fn accumulating_identical_batches_matches_one_step() {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = ModelWeights::init(&model, &mut rng).unwrap();
        let a = seq(&[1, 2, 3, 4, 5]);
        let b = seq(&[6, 7, 8]);
        let batch = Batch::from_sequences(&[&a, &b]);
        let cfg = TrainConfig {
            clip_norm: 0.0,
            lr_max: 1e-2,
            ..TrainConfig::default()
        };

        let mut single = w0.clone();
        let mut s1 = TrainState::new(&single, &cfg);
        let l1 = train_step(&model, &mut single, std::slice::from_ref(&batch), &cfg, &mut s1, None).unwrap();

        let mut accum = w0.clone();
        let mut s4 = TrainState::new(&accum, &cfg);
        let four = vec![batch.clone(); 4];
        let l4 = train_step(&model, &mut accum, &four, &cfg, &mut s4, None).unwrap();

        assert!((l1 - l4).abs() < 1e-10);
        for ((_, x), (_, y)) in single.named().iter().zip(accum.named()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-10);
            }
        }
        assert!(train_step(&model, &mut accum, &[], &cfg, &mut s4, None).is_err());
    }

    #[test]
    fn small_step_lowers_sample_loss() {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = ModelWeights::init(&model, &mut rng).unwrap();
        let s = seq(&[1, 4, 2, 9, 3, 3]);
        let batch = Batch::from_sequences(&[&s]);
        let before = evaluate_loss(&model, &w, std::slice::from_ref(&batch))
            .unwrap()
            .mean()
            .unwrap();
        let cfg = TrainConfig {
            lr_max: 1e-4,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(&w, &cfg);
        train_step(&model, &mut w, std::slice::from_ref(&batch), &cfg, &mut st, None).unwrap();
        let after = evaluate_loss(&model, &w, std::slice::from_ref(&batch))
            .unwrap()
            .mean()
            .unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_is_reproducible_and_logs_every_step() {
        let model = tiny();
        let data: Vec<_> = (0..6).map(|i| seq(&[i, (i + 1) % 11, (i + 2) % 11, 10])).collect();
        let cfg = TrainConfig {
            max_iters: 6,
            batch_size: 2,
            grad_accum_steps: 2,
            eval_interval: 2,
            lr_max: 1e-2,
            seed: 17,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut w = ModelWeights::init(&model, &mut rng).unwrap();
            let mut log = MemoryLog::default();
            let out = train(&model, &mut w, &data, &data[..2], &cfg, &mut log).unwrap();
            (out, log.records)
        };
        let (o1, r1) = run();
        let (_, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(o1.steps, 6);
        assert_eq!(r1.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
        assert!(r1[1].val_loss.is_some() && r1[0].val_loss.is_none());
        assert!(r1.last().unwrap().train_loss < r1[0].train_loss);
    }
}
