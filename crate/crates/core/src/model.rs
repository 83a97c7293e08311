//! Causal transformer with a tied output projection, mean pooling, a
//! cosine similarity score and a pairwise relation head.
//!
//! Parameters live in a flat, name-ordered list of tensors. Training code
//! binds them onto a [`Tape`] once per batch with [`ModelWeights::bind`] and
//! reads gradients back in the same order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AttentionMask, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::table::{Table, TableSet};
use crate::tokenizer::{Vocab, EOS, QRY, SEP, SUM};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig { vocab_size, d_model: 64, layers: 2, heads: 4, ffn: 128, max_len: 512, seed: 7 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab_size < crate::tokenizer::RESERVED.len() {
            return bad("vocab_size is smaller than the reserved block");
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn == 0 || self.max_len == 0 {
            return bad("layers, ffn and max_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

const LAYER_PARAMS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

// Offsets within a layer block.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const BQ: usize = 3;
pub(crate) const WK: usize = 4;
pub(crate) const BK: usize = 5;
pub(crate) const WV: usize = 6;
pub(crate) const BV: usize = 7;
pub(crate) const WO: usize = 8;
pub(crate) const BO: usize = 9;
pub(crate) const LN2_G: usize = 10;
pub(crate) const LN2_B: usize = 11;
pub(crate) const W1: usize = 12;
pub(crate) const B1: usize = 13;
pub(crate) const W2: usize = 14;
pub(crate) const B2: usize = 15;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;

/// Index of parameter `offset` of layer `l`.
pub(crate) fn layer_param(l: usize, offset: usize) -> usize {
    2 + l * LAYER_PARAMS.len() + offset
}

fn tail_param(cfg: &ModelConfig, k: usize) -> usize {
    2 + cfg.layers * LAYER_PARAMS.len() + k
}

pub(crate) fn lnf_g(cfg: &ModelConfig) -> usize {
    tail_param(cfg, 0)
}
pub(crate) fn lnf_b(cfg: &ModelConfig) -> usize {
    tail_param(cfg, 1)
}
pub(crate) fn rel_w(cfg: &ModelConfig) -> usize {
    tail_param(cfg, 2)
}
pub(crate) fn rel_b(cfg: &ModelConfig) -> usize {
    tail_param(cfg, 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_len, d], Init::Normal),
    ];
    for l in 0..cfg.layers {
        for name in LAYER_PARAMS {
            let (shape, init) = match name {
                "ln1.g" | "ln2.g" => (vec![d], Init::Ones),
                "ln1.b" | "ln2.b" | "attn.bq" | "attn.bk" | "attn.bv" | "attn.bo" | "ffn.b2" => (vec![d], Init::Zeros),
                "ffn.b1" => (vec![f], Init::Zeros),
                "ffn.w1" => (vec![d, f], Init::Normal),
                "ffn.w2" => (vec![f, d], Init::Normal),
                _ => (vec![d, d], Init::Normal),
            };
            out.push((format!("layer{l}.{name}"), shape, init));
        }
    }
    out.push(("ln_f.g".into(), vec![d], Init::Ones));
    out.push(("ln_f.b".into(), vec![d], Init::Zeros));
    out.push(("rel.w".into(), vec![2 * d, 1], Init::Normal));
    out.push(("rel.b".into(), vec![1], Init::Zeros));
    out
}

/// Names and shapes of every parameter, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    param_layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    tok_t: Option<Var>,
}

/// Hidden states of a forward pass, after the final layer norm.
#[derive(Debug, Clone, Copy)]
pub struct Hidden(pub Var);

impl ModelWeights {
    /// Normal(0, 0.02) weights, unit norm gains, zero biases.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let params = param_layout(&config)
            .into_iter()
            .map(|(_, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(shape, data).expect("layout shapes are consistent")
            })
            .collect();
        Ok(ModelWeights { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {}", specs.len(), params.len())));
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} != {shape:?}", p.shape())));
            }
            if !p.all_finite() {
                return Err(Error::Checkpoint(format!("{name}: non-finite value")));
            }
        }
        Ok(ModelWeights { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p)).collect(), tok_t: None }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::TooLong { len, max: self.config.max_len });
        }
        Ok(())
    }

    /// Forward pass over `ids` at explicit `positions` under `mask`.
    pub fn hidden(&self, tape: &mut Tape, b: &Bound, ids: &[usize], positions: &[usize], mask: &AttentionMask) -> Result<Hidden> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Precondition("empty input".into()));
        }
        if positions.len() != n || mask.size() != n {
            return Err(Error::Precondition(format!(
                "{n} ids, {} positions, mask of size {}",
                positions.len(),
                mask.size()
            )));
        }
        if let Some(&p) = positions.iter().max() {
            self.check_len(p + 1)?;
        }
        let cfg = &self.config;
        let p = |i: usize| b.vars[i];
        let tok = tape.embedding(p(TOK_EMB), ids)?;
        let pos = tape.embedding(p(POS_EMB), positions)?;
        let mut x = tape.add(tok, pos)?;
        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.layers {
            let w = |o: usize| b.vars[layer_param(l, o)];
            let h = tape.layer_norm(x, w(LN1_G), w(LN1_B))?;
            let q = tape.matmul(h, w(WQ))?;
            let q = tape.add_bias(q, w(BQ))?;
            let k = tape.matmul(h, w(WK))?;
            let k = tape.add_bias(k, w(BK))?;
            let v = tape.matmul(h, w(WV))?;
            let v = tape.add_bias(v, w(BV))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv)?;
                let att = tape.masked_softmax(scores, mask)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
            let att = tape.matmul(att, w(WO))?;
            let att = tape.add_bias(att, w(BO))?;
            x = tape.add(x, att)?;
            let h = tape.layer_norm(x, w(LN2_G), w(LN2_B))?;
            let f = tape.matmul(h, w(W1))?;
            let f = tape.add_bias(f, w(B1))?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w(W2))?;
            let f = tape.add_bias(f, w(B2))?;
            x = tape.add(x, f)?;
        }
        let out = tape.layer_norm(x, p(lnf_g(cfg)), p(lnf_b(cfg)))?;
        Ok(Hidden(out))
    }

    /// Causal forward pass with positions `0..len`.
    pub fn hidden_causal(&self, tape: &mut Tape, b: &Bound, ids: &[usize]) -> Result<Hidden> {
        self.check_len(ids.len())?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.hidden(tape, b, ids, &positions, &AttentionMask::causal(ids.len()))
    }

    /// Output logits `[rows, V]` at the selected hidden rows.
    pub fn logits_at(&self, tape: &mut Tape, b: &mut Bound, h: Hidden, rows: &[usize]) -> Result<Var> {
        let tok_t = match b.tok_t {
            Some(v) => v,
            None => {
                let v = tape.transpose(b.vars[TOK_EMB])?;
                b.tok_t = Some(v);
                v
            }
        };
        let sel = tape.gather_rows(h.0, rows)?;
        Ok(tape.matmul(sel, tok_t)?)
    }

    /// Mean of the final hidden states of a causal pass over `ids`.
    pub fn pool(&self, tape: &mut Tape, b: &Bound, ids: &[usize]) -> Result<Var> {
        let h = self.hidden_causal(tape, b, ids)?;
        Ok(tape.mean_rows(h.0)?)
    }

    /// `sigmoid(w . [pool_i ; pool_j] + b)`, shape `[1]`.
    pub fn relation_prob(&self, tape: &mut Tape, b: &Bound, pool_i: Var, pool_j: Var) -> Result<Var> {
        let d = self.config.d_model;
        let cat = tape.concat(&[pool_i, pool_j])?;
        let row = tape.reshape(cat, vec![1, 2 * d])?;
        let z = tape.matmul(row, b.vars[rel_w(&self.config)])?;
        let z = tape.reshape(z, vec![1])?;
        let z = tape.add_bias(z, b.vars[rel_b(&self.config)])?;
        Ok(tape.sigmoid(z)?)
    }

    /// Log-probabilities of each summary given a shared prompt, computed in
    /// one packed pass. Returns the per-token log-probability vector (all
    /// summaries concatenated) and each summary's range within it.
    ///
    /// The prompt must end with the `[SUM]` anchor and every summary must
    /// end with `[EOS]`.
    pub fn packed_token_log_probs(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        prompt: &[usize],
        summaries: &[&[usize]],
    ) -> Result<(Var, Vec<std::ops::Range<usize>>)> {
        self.packed_inner(tape, b, prompt, summaries, true)
    }

    /// As [`Self::packed_token_log_probs`], but a sampled sequence may stop
    /// at the length cap without `[EOS]`.
    pub fn packed_sample_log_probs(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        prompt: &[usize],
        samples: &[&[usize]],
    ) -> Result<(Var, Vec<std::ops::Range<usize>>)> {
        self.packed_inner(tape, b, prompt, samples, false)
    }

    fn packed_inner(
        &self,
        tape: &mut Tape,
        b: &mut Bound,
        prompt: &[usize],
        summaries: &[&[usize]],
        require_eos: bool,
    ) -> Result<(Var, Vec<std::ops::Range<usize>>)> {
        if prompt.last() != Some(&SUM) {
            return Err(Error::Precondition("prompt must end with [SUM]".into()));
        }
        if summaries.is_empty() {
            return Err(Error::Precondition("no summaries to score".into()));
        }
        for s in summaries {
            check_summary(s, require_eos)?;
            self.check_len(prompt.len() + s.len() - 1)?;
        }
        let p = prompt.len();
        let mut ids = prompt.to_vec();
        let mut positions: Vec<usize> = (0..p).collect();
        let mut seg_lens = Vec::with_capacity(summaries.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut ranges = Vec::with_capacity(summaries.len());
        for s in summaries {
            let inputs = &s[..s.len() - 1];
            let start = ids.len();
            ranges.push(targets.len()..targets.len() + s.len());
            rows.push(p - 1);
            rows.extend(start..start + inputs.len());
            targets.extend_from_slice(s);
            ids.extend_from_slice(inputs);
            positions.extend(p..p + inputs.len());
            seg_lens.push(inputs.len());
        }
        let mask = AttentionMask::prefix_segments(p, &seg_lens);
        let h = self.hidden(tape, b, &ids, &positions, &mask)?;
        let logits = self.logits_at(tape, b, h, &rows)?;
        let lp = tape.target_log_prob(logits, &targets)?;
        Ok((lp, ranges))
    }

    // ---- tape-free conveniences ------------------------------------------

    /// Logits `[L, V]` at every position of a causal pass.
    pub fn forward_logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape);
        let h = self.hidden_causal(&mut tape, &b, ids)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let l = self.logits_at(&mut tape, &mut b, h, &rows)?;
        Ok(tape.to_tensor(l))
    }

    pub fn pooled_repr(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let v = self.pool(&mut tape, &b, ids)?;
        Ok(tape.value(v).to_vec())
    }

    /// Cosine similarity of the pooled representations.
    pub fn score_similarity(&self, a: &[usize], bids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let pa = self.pool(&mut tape, &b, a)?;
        let pb = self.pool(&mut tape, &b, bids)?;
        let c = tape.cosine(pa, pb)?;
        Ok(tape.scalar(c))
    }

    pub fn predict_relation(&self, ti: &[usize], tj: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let pi = self.pool(&mut tape, &b, ti)?;
        let pj = self.pool(&mut tape, &b, tj)?;
        let p = self.relation_prob(&mut tape, &b, pi, pj)?;
        Ok(tape.scalar(p))
    }

    /// `log P(summary | prompt)`, summed over summary tokens including `[EOS]`.
    pub fn sequence_log_prob(&self, prompt: &[usize], summary: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut b = self.bind(&mut tape);
        let (lp, _) = self.packed_token_log_probs(&mut tape, &mut b, prompt, &[summary])?;
        Ok(tape.value(lp).iter().sum())
    }
}

fn check_summary(s: &[usize], require_eos: bool) -> Result<()> {
    match s.iter().position(|&t| t == EOS) {
        Some(i) if i + 1 == s.len() => Ok(()),
        Some(_) => Err(Error::Precondition("[EOS] may only appear as the final summary token".into())),
        None if !require_eos && !s.is_empty() => Ok(()),
        None => Err(Error::Precondition("summary must end with [EOS]".into())),
    }
}

// ---- input encoding ------------------------------------------------------------

/// `[QRY] q [SEP] lin(T1) [SEP] ... [SEP] lin(Tn) [SUM]`
pub fn encode_prompt(vocab: &Vocab, query: &str, tables: &TableSet) -> Result<Vec<usize>> {
    let mut ids = vec![QRY];
    ids.extend(vocab.encode(query));
    for t in &tables.tables {
        ids.push(SEP);
        ids.extend(vocab.encode(&t.linearize()?));
    }
    ids.push(SUM);
    Ok(ids)
}

/// Summary tokens followed by `[EOS]`.
pub fn encode_summary(vocab: &Vocab, summary: &str) -> Vec<usize> {
    let mut ids = vocab.encode(summary);
    ids.push(EOS);
    ids
}

/// `[QRY] q`, the query side of the similarity score.
pub fn encode_query(vocab: &Vocab, query: &str) -> Vec<usize> {
    let mut ids = vec![QRY];
    ids.extend(vocab.encode(query));
    ids
}

pub fn encode_table(vocab: &Vocab, table: &Table) -> Result<Vec<usize>> {
    Ok(vocab.encode(&table.linearize()?))
}

/// All tables joined by `[SEP]`, the table side of the similarity score.
pub fn encode_table_set(vocab: &Vocab, tables: &TableSet) -> Result<Vec<usize>> {
    Ok(vocab.encode(&tables.linearize(crate::tokenizer::RESERVED[SEP])?))
}
