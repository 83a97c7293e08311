//! Brute-force oracles shared by integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Counts n-grams by scanning every start position of both sequences.
pub fn oracle_bleu(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=4usize {
        if c.len() < n {
            return 0.0;
        }
        let cand: Vec<&[String]> = (0..=c.len() - n).map(|i| &c[i..i + n]).collect();
        let refs: Vec<&[String]> = if r.len() >= n { (0..=r.len() - n).map(|i| &r[i..i + n]).collect() } else { vec![] };
        let mut seen: Vec<&[String]> = Vec::new();
        let mut clipped = 0;
        for g in &cand {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_cand = cand.iter().filter(|x| *x == g).count();
            let in_ref = refs.iter().filter(|x| *x == g).count();
            clipped += in_cand.min(in_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        precisions.push(clipped as f64 / cand.len() as f64);
    }
    let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    let bp = if c.len() < r.len() { (1.0 - r.len() as f64 / c.len() as f64).exp() } else { 1.0 };
    bp * geo.exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let is_subseq = |s: &[&String]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = oracle_lcs(c, r);
    if l == 0 {
        return 0.0;
    }
    let (p, rc) = (l as f64 / c.len() as f64, l as f64 / r.len() as f64);
    2.0 * p * rc / (p + rc)
}

pub fn random_seq(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| ["a", "b", "c", "d"][rng.gen_range(0..4)].to_string()).collect()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}
