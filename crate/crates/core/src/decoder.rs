//! Incremental inference with cached keys and values.
//!
//! Mirrors [`ModelWeights::hidden`] token by token without recording a tape.
//! Used for greedy decoding at evaluation time and for sampling during the
//! policy-gradient phase.

use rand::Rng;

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::model::{self, ModelWeights};
use crate::tokenizer::EOS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Sampling from `softmax(logits / t)`; `t = 0` is greedy.
    Temperature(f64),
}

#[derive(Debug, Clone)]
pub struct KvDecoder<'a> {
    w: &'a ModelWeights,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn param(w: &ModelWeights, i: usize) -> &[f64] {
    w.params[i].data()
}

impl<'a> KvDecoder<'a> {
    pub fn new(w: &'a ModelWeights) -> Self {
        let layers = w.config.layers;
        KvDecoder { w, keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` at the next position; returns the final hidden state.
    pub fn feed(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = &self.w.config;
        let (d, f, heads, dh) = (cfg.d_model, cfg.ffn, cfg.heads, cfg.head_dim());
        if self.len >= cfg.max_len {
            return Err(Error::TooLong { len: self.len + 1, max: cfg.max_len });
        }
        if token >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, size: cfg.vocab_size });
        }
        let w = self.w;
        let tok = &param(w, model::TOK_EMB)[token * d..(token + 1) * d];
        let pos = &param(w, model::POS_EMB)[self.len * d..(self.len + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let inv = 1.0 / (dh as f64).sqrt();
        let n = self.len + 1;
        for l in 0..cfg.layers {
            let p = |o: usize| param(w, model::layer_param(l, o));
            let (h, _, _) = kernels::layer_norm(&x, p(model::LN1_G), p(model::LN1_B), d);
            let proj = |wm: usize, bm: usize| -> Vec<f64> {
                let mut y = kernels::matmul(&h, p(wm), 1, d, d);
                for (v, b) in y.iter_mut().zip(p(bm)) {
                    *v += b;
                }
                y
            };
            let q = proj(model::WQ, model::BQ);
            self.keys[l].extend(proj(model::WK, model::BK));
            self.values[l].extend(proj(model::WV, model::BV));
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = kernels::matmul(qh, kh, 1, dh, 1)[0] * inv;
                }
                kernels::softmax_in_place(&mut scores, n);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &a) in scores.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, v) in out.iter_mut().zip(&values[j * d + hd * dh..j * d + (hd + 1) * dh]) {
                        *o += a * v;
                    }
                }
            }
            let mut o = kernels::matmul(&att, p(model::WO), 1, d, d);
            for ((xv, ov), b) in x.iter_mut().zip(&mut o).zip(p(model::BO)) {
                *xv += *ov + b;
            }
            let (h2, _, _) = kernels::layer_norm(&x, p(model::LN2_G), p(model::LN2_B), d);
            let mut hid = kernels::matmul(&h2, p(model::W1), 1, d, f);
            for (v, b) in hid.iter_mut().zip(p(model::B1)) {
                *v = kernels::gelu(*v + b);
            }
            let out = kernels::matmul(&hid, p(model::W2), 1, f, d);
            for ((xv, ov), b) in x.iter_mut().zip(&out).zip(p(model::B2)) {
                *xv += ov + b;
            }
        }
        self.len += 1;
        let (y, _, _) = kernels::layer_norm(&x, param(w, model::lnf_g(cfg)), param(w, model::lnf_b(cfg)), d);
        Ok(y)
    }

    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let cfg = &self.w.config;
        kernels::matmul_bt(hidden, param(self.w, model::TOK_EMB), 1, cfg.d_model, cfg.vocab_size)
    }

    /// Feeds every token of `ids` and returns the logits after the last one.
    pub fn prime(&mut self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut h = Vec::new();
        for &t in ids {
            h = self.feed(t)?;
        }
        if h.is_empty() {
            return Err(Error::Precondition("cannot prime on an empty prompt".into()));
        }
        Ok(self.logits(&h))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn pick<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> usize {
    match mode {
        DecodeMode::Temperature(t) if t > 0.0 => {
            let mut p: Vec<f64> = logits.iter().map(|l| l / t).collect();
            let n = p.len();
            kernels::softmax_in_place(&mut p, n);
            let u: f64 = rng.gen();
            let mut c = 0.0;
            for (i, pi) in p.iter().enumerate() {
                c += pi;
                if u < c {
                    return i;
                }
            }
            // Rounding left `u` above the cumulative sum.
            n - 1
        }
        _ => argmax(logits),
    }
}

/// Continues from a primed decoder until `[EOS]` or `cap` tokens.
fn continue_from<R: Rng + ?Sized>(
    mut dec: KvDecoder<'_>,
    mut logits: Vec<f64>,
    mode: DecodeMode,
    cap: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < cap {
        let t = pick(&logits, mode, rng);
        out.push(t);
        if t == EOS || out.len() == cap {
            break;
        }
        let h = dec.feed(t)?;
        logits = dec.logits(&h);
    }
    Ok(out)
}

fn token_cap(w: &ModelWeights, prompt: &[usize], max_new: usize) -> Result<usize> {
    let max = w.config.max_len;
    if prompt.len() > max {
        return Err(Error::TooLong { len: prompt.len(), max });
    }
    // The last generated token is never fed back, hence the +1.
    Ok(max_new.min(max - prompt.len() + 1))
}

/// Generates a continuation of `prompt`. The output ends with `[EOS]`
/// unless the cap was reached first.
pub fn generate<R: Rng + ?Sized>(
    w: &ModelWeights,
    prompt: &[usize],
    mode: DecodeMode,
    max_new: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let cap = token_cap(w, prompt, max_new)?;
    let mut dec = KvDecoder::new(w);
    let logits = dec.prime(prompt)?;
    continue_from(dec, logits, mode, cap, rng)
}

/// `k` independent samples sharing one pass over the prompt.
pub fn sample_many<R: Rng + ?Sized>(
    w: &ModelWeights,
    prompt: &[usize],
    k: usize,
    mode: DecodeMode,
    max_new: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let cap = token_cap(w, prompt, max_new)?;
    let mut dec = KvDecoder::new(w);
    let logits = dec.prime(prompt)?;
    (0..k).map(|_| continue_from(dec.clone(), logits.clone(), mode, cap, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::SUM;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelWeights {
        ModelWeights::init(ModelConfig { vocab_size: 16, d_model: 8, layers: 2, heads: 2, ffn: 12, max_len: 24, seed: 5 })
            .unwrap()
    }

    #[test]
    fn cached_logits_match_full_pass() {
        let w = small();
        let ids = [3, 11, 12, 4, 13, 14, 15, 5];
        let full = w.forward_logits(&ids).unwrap();
        let mut dec = KvDecoder::new(&w);
        for (i, &t) in ids.iter().enumerate() {
            let h = dec.feed(t).unwrap();
            let l = dec.logits(&h);
            for (a, b) in l.iter().zip(&full.data()[i * 16..(i + 1) * 16]) {
                assert!((a - b).abs() < 1e-10, "position {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let w = small();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let g = generate(&w, &[3, 11, SUM], DecodeMode::Greedy, 6, &mut r1).unwrap();
        let t0 = generate(&w, &[3, 11, SUM], DecodeMode::Temperature(0.0), 6, &mut r2).unwrap();
        assert_eq!(g, t0);
    }

    #[test]
    fn sampling_is_seeded() {
        let w = small();
        let run = |s| generate(&w, &[3, 11, SUM], DecodeMode::Temperature(1.0), 10, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn output_respects_cap_and_stops_at_eos() {
        let w = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cap in [1, 3, 7] {
            for s in sample_many(&w, &[3, 11, SUM], 5, DecodeMode::Temperature(2.0), cap, &mut rng).unwrap() {
                assert!(s.len() <= cap);
                if let Some(i) = s.iter().position(|&t| t == EOS) {
                    assert_eq!(i + 1, s.len());
                }
            }
        }
        let long = vec![11; 24];
        assert_eq!(generate(&w, &long, DecodeMode::Greedy, 5, &mut rng).unwrap().len(), 1);
        assert!(generate(&w, &[11; 25], DecodeMode::Greedy, 5, &mut rng).is_err());
    }
}
