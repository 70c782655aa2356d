use std::path::Path;

use bisparse::data::{
    length_bucket_batches, openwebtext_split, padding_fraction, random_batches, truncate, SummarizationExample,
    TokenSequence, Tokenizer, TrainSequence,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gpt2() -> Tokenizer {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/gpt2");
    Tokenizer::from_files(&dir.join("encoder.json"), &dir.join("vocab.bpe")).unwrap()
}

fn random_printable(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const EXTRA: &[char] = &['é', 'ß', 'λ', '中', '🙂', '\n', '\t', ' ', '’'];
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.15) {
                EXTRA[rng.random_range(0..EXTRA.len())]
            } else {
                rng.random_range(0x20u8..0x7f) as char
            }
        })
        .collect()
}

#[test]
fn tokenizer_round_trips_random_strings() {
    let tok = gpt2();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let s = random_printable(&mut rng, 40);
        let ids = tok.encode(&s);
        assert_eq!(tok.decode(&ids).unwrap(), s);
        assert!(!ids.contains(&tok.separator().unwrap()));
    }
    for _ in 0..200 {
        let bytes: Vec<u8> = (0..rng.random_range(0..32)).map(|_| rng.random()).collect();
        assert_eq!(tok.decode_bytes(&tok.encode_bytes(&bytes)).unwrap(), bytes);
    }
}

#[test]
fn openwebtext_split_is_balanced_and_lossless() {
    assert_eq!(openwebtext_split("a b c d"), ("a b".to_string(), "c d".to_string()));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let n_words = rng.random_range(1..20);
        let doc: Vec<String> = (0..n_words)
            .map(|_| {
                let len = rng.random_range(1..12);
                (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
            })
            .collect();
        let doc = doc.join(" ");
        let (a, s) = openwebtext_split(&doc);
        let rejoined = if doc.contains(' ') {
            format!("{a} {s}")
        } else {
            format!("{a}{s}")
        };
        assert_eq!(rejoined, doc);
        let longest = doc.split(' ').map(str::len).max().unwrap();
        assert!(a.len().abs_diff(s.len()) <= longest + 1, "{doc:?}");
    }
    let (a, s) = openwebtext_split("abcdef");
    assert_eq!((a.as_str(), s.as_str()), ("abc", "def"));
}

fn example(article: usize, summary: usize) -> SummarizationExample {
    let seq = |n: usize| TokenSequence {
        ids: (0..n).collect(),
        source_len_chars: n,
    };
    SummarizationExample {
        article: seq(article),
        summary: seq(summary),
    }
}

#[test]
fn truncation_respects_the_limit() {
    let ex = example(2000, 50);
    let t = truncate(&ex, 1024);
    assert_eq!(t.joined_len(), 1024);
    assert_eq!(t.summary, ex.summary);
    let short = example(10, 5);
    assert_eq!(truncate(&short, 1024), short);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let ex = example(rng.random_range(0..300), rng.random_range(0..300));
        let limit = rng.random_range(1..400);
        let t = truncate(&ex, limit);
        assert!(t.joined_len() <= limit);
        if ex.summary.len() < limit {
            assert_eq!(t.summary, ex.summary);
        }
        assert!(ex.article.ids.starts_with(&t.article.ids));
    }
}

#[test]
fn bucketing_pads_no_more_than_random_batching() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs: Vec<TrainSequence> = (0..500)
        .map(|_| {
            // skewed: mostly short, a long tail
            let len = if rng.random_bool(0.8) {
                rng.random_range(2..20)
            } else {
                rng.random_range(20..200)
            };
            TrainSequence {
                ids: vec![1; len],
                scored: vec![true; len - 1],
            }
        })
        .collect();
    let bucketed = length_bucket_batches(&seqs, 8, 1);
    let random = random_batches(&seqs, 8, 1);
    assert!(padding_fraction(&bucketed) <= padding_fraction(&random));
    let rows: usize = bucketed.iter().map(|b| b.len()).sum();
    assert_eq!(rows, seqs.len());
    assert_eq!(length_bucket_batches(&seqs, 8, 1), bucketed);

    let equal: Vec<TrainSequence> = (0..20)
        .map(|_| TrainSequence {
            ids: vec![2; 9],
            scored: vec![true; 8],
        })
        .collect();
    assert_eq!(padding_fraction(&length_bucket_batches(&equal, 3, 0)), 0.0);
}
