mod support;

use bisparse::metrics::{lcs_len, rouge_l, rouge_n, rouge_n_counts, token_prf, Prf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles::{lcs, multiset_overlap, prf, rouge_n_counts as brute_counts};

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn as_tuple(p: Prf) -> (f64, f64, f64) {
    (p.precision, p.recall, p.f1)
}

fn round2(p: Prf) -> (f64, f64, f64) {
    let r = |x: f64| (x * 100.0).round() / 100.0;
    (r(p.precision), r(p.recall), r(p.f1))
}

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let vocab = rng.random_range(1..=8);
    let side = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let len = rng.random_range(0..=12);
        (0..len).map(|_| rng.random_range(0..vocab)).collect()
    };
    (side(rng), side(rng))
}

#[test]
fn hand_examples_reproduce_to_two_decimals() {
    assert_eq!(
        round2(rouge_n(&words("the cat"), &words("the cat sat"), 1)),
        (100.0, 66.67, 80.0)
    );
    assert_eq!(lcs_len(&words("a c e"), &words("a b c d e")), 3);
    assert_eq!(
        round2(rouge_l(&words("a c e"), &words("a b c d e"))),
        (100.0, 60.0, 75.0)
    );
    assert_eq!(lcs_len(&words("c b a"), &words("a b c")), 1);
    assert_eq!(
        round2(token_prf(&words("a a b"), &words("a b b"))),
        (66.67, 66.67, 66.67)
    );
    let clipped = token_prf(&words("x x x x x"), &words("x y z"));
    assert_eq!(round2(clipped), (20.0, 33.33, 25.0));
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (c, r) = random_pair(&mut rng);
        for n in 1..=3 {
            let (o, nc, nr) = brute_counts(&c, &r, n);
            let got = rouge_n_counts(&c, &r, n);
            assert_eq!(
                (got.overlap, got.candidate, got.reference),
                (o, nc, nr),
                "case {case} n={n}"
            );
            assert_eq!(as_tuple(rouge_n(&c, &r, n)), prf(o, nc, nr), "case {case} n={n}");
        }
        assert_eq!(lcs_len(&c, &r), lcs(&c, &r), "case {case}");
        assert_eq!(
            as_tuple(rouge_l(&c, &r)),
            prf(lcs(&c, &r), c.len(), r.len()),
            "case {case}"
        );
        let o = multiset_overlap(&c, &r);
        assert_eq!(as_tuple(token_prf(&c, &r)), prf(o, c.len(), r.len()), "case {case}");
    }
}

#[test]
fn swapping_sides_swaps_precision_and_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (c, r) = random_pair(&mut rng);
        let scores = |a: &[u32], b: &[u32]| [rouge_n(a, b, 1), rouge_n(a, b, 2), rouge_l(a, b), token_prf(a, b)];
        for (x, y) in scores(&c, &r).into_iter().zip(scores(&r, &c)) {
            assert_eq!((x.precision, x.recall), (y.recall, y.precision));
            assert_eq!(x.f1, y.f1);
            for v in [x.precision, x.recall, x.f1] {
                assert!((0.0..=100.0).contains(&v));
            }
        }
    }
}

#[test]
fn identical_sequences_score_full_marks() {
    let x = [3u32, 1, 4, 1, 5, 9, 2, 6];
    for n in 1..=x.len() {
        assert_eq!(as_tuple(rouge_n(&x, &x, n)), (100.0, 100.0, 100.0));
    }
    assert_eq!(as_tuple(token_prf(&x, &x)), (100.0, 100.0, 100.0));
    assert_eq!(as_tuple(rouge_l(&x, &x)), (100.0, 100.0, 100.0));
}
