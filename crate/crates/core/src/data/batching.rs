//! Next-token training sequences and length-bucketed, padded batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{truncate, SummarizationExample};

/// Target id marking positions that contribute no loss (padding, and article
/// tokens of summarization examples unless configured otherwise).
pub const IGNORE_INDEX: usize = usize::MAX;

/// A token sequence plus, for each next-token target `ids[t + 1]`, whether
/// that target is scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub ids: Vec<usize>,
    pub scored: Vec<bool>,
}

impl TrainSequence {
    /// Number of model inputs (one less than the token count).
    pub fn input_len(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    pub fn inputs(&self) -> &[usize] {
        &self.ids[..self.input_len()]
    }

    pub fn targets(&self) -> Vec<usize> {
        self.ids[1..]
            .iter()
            .zip(&self.scored)
            .map(|(&t, &s)| if s { t } else { IGNORE_INDEX })
            .collect()
    }
}

/// Builds the training form of a summarization example:
/// `article ++ sep ++ summary ++ sep`, where the trailing separator teaches the
/// model to stop. The joined part is truncated to `context_window` so the model
/// never sees more than `context_window` inputs.
pub fn summarization_sequence(
    example: &SummarizationExample,
    separator: usize,
    context_window: usize,
    score_article: bool,
) -> TrainSequence {
    let ex = truncate(example, context_window);
    let mut ids = ex.joined(separator);
    ids.push(separator);
    let article_targets = ex.article.len();
    let scored = (0..ids.len() - 1)
        .map(|t| score_article || t >= article_targets)
        .collect();
    TrainSequence { ids, scored }
}

/// Cuts a token stream into windows of `context_window + 1` tokens (the last
/// window may be shorter); every target is scored.
pub fn lm_sequences(ids: &[usize], context_window: usize) -> Vec<TrainSequence> {
    ids.chunks(context_window)
        .filter_map(|chunk| {
            let start = chunk.as_ptr() as usize - ids.as_ptr() as usize;
            let start = start / std::mem::size_of::<usize>();
            let end = (start + context_window + 1).min(ids.len());
            (end - start >= 2).then(|| TrainSequence {
                ids: ids[start..end].to_vec(),
                scored: vec![true; end - start - 1],
            })
        })
        .collect()
}

/// Padded batch: `inputs` and `targets` are `B×max_len`; padding is
/// [`IGNORE_INDEX`] in both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&TrainSequence]) -> Self {
        let max_len = seqs.iter().map(|s| s.input_len()).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(seqs.len());
        let mut targets = Vec::with_capacity(seqs.len());
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let n = s.input_len();
            let mut inp = s.inputs().to_vec();
            let mut tgt = s.targets();
            inp.resize(max_len, IGNORE_INDEX);
            tgt.resize(max_len, IGNORE_INDEX);
            inputs.push(inp);
            targets.push(tgt);
            lengths.push(n);
        }
        Self {
            inputs,
            targets,
            lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn padding_tokens(&self) -> usize {
        self.lengths.iter().map(|&n| self.width() - n).sum()
    }

    /// Unpadded (inputs, targets) of row `b`.
    pub fn row(&self, b: usize) -> (&[usize], &[usize]) {
        let n = self.lengths[b];
        (&self.inputs[b][..n], &self.targets[b][..n])
    }

    pub fn scored_tokens(&self) -> usize {
        (0..self.len())
            .map(|b| self.row(b).1.iter().filter(|&&t| t != IGNORE_INDEX).count())
            .sum()
    }
}

/// Sorts sequences by length, cuts the sorted order into batches of
/// `batch_size`, and shuffles the batch order with `seed`. Each sequence
/// appears in exactly one batch.
pub fn length_bucket_batches(seqs: &[TrainSequence], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| (seqs[i].input_len(), i));
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|idx| Batch::from_sequences(&idx.iter().map(|&i| &seqs[i]).collect::<Vec<_>>()))
        .collect();
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches
}

/// Batches drawn from a uniform shuffle, for comparison with bucketing.
pub fn random_batches(seqs: &[TrainSequence], batch_size: usize, seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|idx| Batch::from_sequences(&idx.iter().map(|&i| &seqs[i]).collect::<Vec<_>>()))
        .collect()
}

pub fn padding_fraction(batches: &[Batch]) -> f64 {
    let (pad, total) = batches
        .iter()
        .fold((0, 0), |(p, t), b| (p + b.padding_tokens(), t + b.len() * b.width()));
    if total == 0 {
        0.0
    } else {
        pad as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::TokenSequence;

    fn seq_of_len(n: usize, tag: usize) -> TrainSequence {
        TrainSequence {
            ids: vec![tag; n + 1],
            scored: vec![true; n],
        }
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let seqs: Vec<_> = (0..10).map(|i| seq_of_len(7, i)).collect();
        let batches = length_bucket_batches(&seqs, 3, 1);
        assert_eq!(padding_fraction(&batches), 0.0);
    }

    #[test]
    fn every_sequence_once() {
        let seqs: Vec<_> = (0..23).map(|i| seq_of_len(1 + (i * 7) % 11, i)).collect();
        let batches = length_bucket_batches(&seqs, 4, 9);
        let mut tags: Vec<usize> = batches.iter().flat_map(|b| b.inputs.iter().map(|r| r[0])).collect();
        tags.sort();
        assert_eq!(tags, (0..23).collect::<Vec<_>>());
        assert_eq!(length_bucket_batches(&seqs, 4, 9), batches);
    }

    #[test]
    fn summary_targets_only_by_default() {
        let ex = SummarizationExample {
            article: TokenSequence {
                ids: vec![1, 2, 3],
                source_len_chars: 3,
            },
            summary: TokenSequence {
                ids: vec![4, 5],
                source_len_chars: 2,
            },
        };
        let s = summarization_sequence(&ex, 0, 16, false);
        assert_eq!(s.ids, vec![1, 2, 3, 0, 4, 5, 0]);
        // targets: 2 3 0 | 4 5 0
        assert_eq!(s.targets(), vec![IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX, 4, 5, 0]);
        let all = summarization_sequence(&ex, 0, 16, true);
        assert!(all.targets().iter().all(|&t| t != IGNORE_INDEX));
        let short = summarization_sequence(&ex, 0, 4, false);
        assert!(short.input_len() <= 4);
    }

    #[test]
    fn lm_windows_overlap_by_one() {
        let ids: Vec<usize> = (0..10).collect();
        let seqs = lm_sequences(&ids, 4);
        assert_eq!(seqs[0].ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(seqs[1].ids, vec![4, 5, 6, 7, 8]);
        assert_eq!(seqs[2].ids, vec![8, 9]);
        assert_eq!(seqs.len(), 3);
    }

    #[test]
    fn batch_padding() {
        let a = seq_of_len(2, 1);
        let b = seq_of_len(4, 2);
        let batch = Batch::from_sequences(&[&a, &b]);
        assert_eq!(batch.width(), 4);
        assert_eq!(batch.padding_tokens(), 2);
        assert_eq!(batch.row(0).0, &[1, 1]);
        assert_eq!(batch.inputs[0][2], IGNORE_INDEX);
        assert_eq!(batch.scored_tokens(), 6);
    }
}
