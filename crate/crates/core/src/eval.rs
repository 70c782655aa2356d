//! End-to-end evaluation of a model on article/summary pairs: perplexity of
//! the reference summaries, then greedy summaries scored with ROUGE and
//! token-level overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::{
    summarization_sequence, truncate, Batch, SummarizationExample, TokenSequence, Tokenizer, IGNORE_INDEX,
};
use crate::error::Result;
use crate::metrics::{normalize, perplexity, MetricsReport, OverlapCounts, OverlapTotals};
use crate::model::{constants, forward_sequence, generate, ModelConfig, ModelWeights, Sampling};
use crate::train::evaluate_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Upper bound on generated summary tokens.
    pub max_summary_tokens: usize,
    /// Token-level scores from teacher-forced predictions instead of
    /// generated summaries.
    pub teacher_forced: bool,
    pub score_article: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_summary_tokens: 64,
            teacher_forced: false,
            score_article: false,
        }
    }
}

/// One greedy summary with its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSummary {
    pub candidate: String,
    pub reference: String,
}

/// Greedy summary of `article`: the model continues `article ++ sep` until it
/// emits the separator or reaches the token budget.
pub fn summarize(
    model_cfg: &ModelConfig,
    weights: &ModelWeights,
    tok: &Tokenizer,
    article: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let sep = tok.separator()?;
    let budget = model_cfg.context_window().saturating_sub(1).max(1);
    let start = article.len().saturating_sub(budget - 1);
    let mut prompt = article[start..].to_vec();
    prompt.push(sep);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = generate(model_cfg, weights, &prompt, max_new, Sampling::Greedy, &[sep], &mut rng)?;
    let mut summary = out[prompt.len()..].to_vec();
    if summary.last() == Some(&sep) {
        summary.pop();
    }
    Ok(summary)
}

/// Argmax prediction at every scored position of `batch` row `b`, paired with
/// the scored targets.
fn teacher_forced_pairs(
    model_cfg: &ModelConfig,
    weights: &ModelWeights,
    batch: &Batch,
    b: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (inputs, targets) = batch.row(b);
    let graph = Graph::new();
    let params = constants(&graph, weights);
    let (logits, _) = forward_sequence(model_cfg, &params, inputs, None)?;
    let logits = logits.value_ref();
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for (t, &target) in targets.iter().enumerate() {
        if target == IGNORE_INDEX {
            continue;
        }
        let row = logits.row(t);
        let arg = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
        pred.push(arg);
        gold.push(target);
    }
    Ok((pred, gold))
}

pub fn evaluate_summaries(
    model_cfg: &ModelConfig,
    weights: &ModelWeights,
    tok: &Tokenizer,
    pairs: &[(String, String)],
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<GeneratedSummary>)> {
    let sep = tok.separator()?;
    let ctx = model_cfg.context_window();
    let examples: Vec<SummarizationExample> = pairs
        .iter()
        .map(|(a, s)| SummarizationExample {
            article: TokenSequence::from_text(tok, a),
            summary: TokenSequence::from_text(tok, s),
        })
        .collect();
    let seqs: Vec<_> = examples
        .iter()
        .map(|ex| summarization_sequence(ex, sep, ctx, cfg.score_article))
        .collect();
    let batches: Vec<Batch> = seqs.iter().map(|s| Batch::from_sequences(&[s])).collect();
    let loss = evaluate_loss(model_cfg, weights, &batches)?;
    let ppl = perplexity(loss.total, loss.tokens)?;

    let mut words = OverlapTotals::default();
    let mut forced = OverlapCounts::default();
    let mut generated = Vec::with_capacity(pairs.len());
    for ((ex, (_, reference)), batch) in examples.iter().zip(pairs).zip(&batches) {
        let article = truncate(ex, ctx).article.ids;
        let ids = summarize(model_cfg, weights, tok, &article, cfg.max_summary_tokens)?;
        let candidate = tok.decode(&ids)?;
        words.add_words(&normalize(&candidate), &normalize(reference));
        if cfg.teacher_forced {
            let (pred, gold) = teacher_forced_pairs(model_cfg, weights, batch, 0)?;
            forced.add(crate::metrics::token_prf_counts(&pred, &gold));
        }
        generated.push(GeneratedSummary {
            candidate,
            reference: reference.clone(),
        });
    }
    let token_scores = if cfg.teacher_forced {
        forced.prf()
    } else {
        words.tokens.prf()
    };
    let report = MetricsReport::new(ppl, &words, token_scores, cfg.teacher_forced, pairs.len(), loss.tokens);
    Ok((report, generated))
}
