//! Metrics checked against independent brute-force implementations.

mod common;

use common::{oracle_bleu, oracle_lcs, oracle_rouge, random_seq, words};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tablesum::metrics::{bleu4, lcs_len, rouge_l, token_f1};

#[test]
fn bleu_fixed_pair_matches_oracle() {
    let (c, r) = (words("the cat sat on the mat"), words("the cat sat on a mat"));
    let v = bleu4(&c, &r);
    assert_eq!(v, oracle_bleu(&c, &r));
    // 5/6, 3/5, 2/4, 1/3 by hand
    let hand = ((5.0f64 / 6.0).ln() + 0.6f64.ln() + 0.5f64.ln() + (1.0f64 / 3.0).ln()) / 4.0;
    assert!((v - hand.exp()).abs() < 1e-12);
}

#[test]
fn bleu_and_rouge_match_oracles_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let c = random_seq(&mut rng, 10);
        let r = random_seq(&mut rng, 10);
        assert_eq!(bleu4(&c, &r), oracle_bleu(&c, &r), "{c:?} {r:?}");
        assert_eq!(rouge_l(&c, &r), oracle_rouge(&c, &r), "{c:?} {r:?}");
    }
}

#[test]
fn lcs_dp_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let a = random_seq(&mut rng, 8);
        let b = random_seq(&mut rng, 8);
        assert_eq!(lcs_len(&a, &b), oracle_lcs(&a, &b));
    }
}

proptest! {
    #[test]
    fn metrics_bounded_and_reflexive(
        a in proptest::collection::vec("[a-e]", 1..12),
        b in proptest::collection::vec("[a-e]", 1..12),
    ) {
        for f in [bleu4::<String>, rouge_l::<String>, token_f1::<String>] {
            let v = f(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
        prop_assert_eq!(token_f1(&a, &a), 1.0);
        if a.len() >= 4 {
            prop_assert!((bleu4(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
