//! Training objectives and the summary reward.
//!
//! Every loss is built on a [`Tape`] so the combined objective can be
//! differentiated in one backward pass:
//!
//! * `L_gen`  mean token cross-entropy of the gold summary (teacher forcing)
//! * `L_mask` cross-entropy of masked table cells, read at each `[MASK]`
//! * `L_rel`  binary cross-entropy of pairwise table relations
//! * `L_cont` two-way softmax contrast of query/table similarity
//! * `L_RL`   REINFORCE surrogate whose gradient is the policy gradient
//!
//! and [`total_loss`] weights them with `lambda1..lambda4`.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::corpus::QueryRecord;
use crate::error::{Error, Result};
use crate::model::{Bound, ModelWeights};
use crate::table::{Table, MASK};
use crate::tokenizer::{Vocab, MASK as MASK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub mask_rate: f64,
    pub rl_samples: usize,
    pub rl_baseline: bool,
    pub baseline_decay: f64,
    pub rl_temperature: f64,
    /// Keep the generation loss active during the policy-gradient phase.
    pub rl_keep_gen: bool,
    pub max_new_tokens: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub rl_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
            lambda4: 0.5,
            mask_rate: 0.15,
            rl_samples: 4,
            rl_baseline: true,
            baseline_decay: 0.9,
            rl_temperature: 1.0,
            rl_keep_gen: true,
            max_new_tokens: 24,
            lr: 2e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            pretrain_epochs: 40,
            finetune_epochs: 15,
            rl_epochs: 10,
            seed: 7,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("alpha, beta, gamma must be nonnegative and sum to 1, got {w:?}"));
        }
        if self.lambdas().iter().any(|l| !(*l >= 0.0)) {
            return bad("lambda weights must be nonnegative".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad(format!("mask_rate must lie in (0, 1], got {}", self.mask_rate));
        }
        if self.rl_samples == 0 || self.batch_size == 0 || self.max_new_tokens == 0 {
            return bad("rl_samples, batch_size and max_new_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must lie in [0, 1)".into());
        }
        if !(self.lr > 0.0) || !(self.rl_temperature >= 0.0) {
            return bad("lr must be positive and rl_temperature nonnegative".into());
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn adam(&self) -> crate::autodiff::AdamConfig {
        crate::autodiff::AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

// ---- L_gen -----------------------------------------------------------------

/// Mean over summary tokens (including `[EOS]`) of `-log P(s_t | s_<t, Q, T)`.
pub fn loss_gen(model: &ModelWeights, tape: &mut Tape, b: &mut Bound, prompt: &[usize], summary: &[usize]) -> Result<Var> {
    let (lp, _) = model.packed_token_log_probs(tape, b, prompt, &[summary])?;
    mean_negative(tape, lp, summary.len())
}

fn mean_negative(tape: &mut Tape, lp: Var, n: usize) -> Result<Var> {
    let s = tape.sum(lp)?;
    Ok(tape.scale(s, -1.0 / n as f64)?)
}

// ---- L_mask ----------------------------------------------------------------

/// A linearized table with masked cells, ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub ids: Vec<usize>,
    /// Indices of the `[MASK]` atoms in `ids`.
    pub positions: Vec<usize>,
    /// Original token at each masked position.
    pub targets: Vec<usize>,
}

/// Masks cells of `table` and encodes it. A cell of `k` words becomes `k`
/// consecutive `[MASK]` atoms.
pub fn masked_example<R: Rng + ?Sized>(vocab: &Vocab, table: &Table, rate: f64, rng: &mut R) -> Result<MaskedExample> {
    let masked = table.mask_cells(rate, rng)?;
    let mut shown = masked.table.clone();
    let mut targets = Vec::new();
    for t in &masked.targets {
        let words = vocab.encode(&t.original);
        shown.rows[t.row][t.column] = vec![MASK; words.len()].join(" ");
        targets.extend(words);
    }
    let ids = vocab.encode(&shown.linearize_unchecked());
    let positions: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == MASK_ID).map(|(i, _)| i).collect();
    debug_assert_eq!(positions.len(), targets.len());
    Ok(MaskedExample { ids, positions, targets })
}

/// Forward pass over one masked table: summed target log-probabilities and
/// the pooled representation of the (masked) table.
pub struct MaskForward {
    pub log_prob_sum: Var,
    pub count: usize,
    pub pool: Var,
}

pub fn mask_forward(model: &ModelWeights, tape: &mut Tape, b: &mut Bound, ex: &MaskedExample) -> Result<MaskForward> {
    if ex.positions.is_empty() {
        return Err(Error::Precondition("masked example has no targets".into()));
    }
    let h = model.hidden_causal(tape, b, &ex.ids)?;
    let logits = model.logits_at(tape, b, h, &ex.positions)?;
    let lp = tape.target_log_prob(logits, &ex.targets)?;
    let log_prob_sum = tape.sum(lp)?;
    let pool = tape.mean_rows(h.0)?;
    Ok(MaskForward { log_prob_sum, count: ex.targets.len(), pool })
}

/// Mean cross-entropy over every masked target of the batch.
pub fn loss_mask_from(tape: &mut Tape, parts: &[MaskForward]) -> Result<Var> {
    let count: usize = parts.iter().map(|p| p.count).sum();
    if count == 0 {
        return Err(Error::Precondition("L_mask needs at least one masked target".into()));
    }
    let sum = sum_vars(tape, parts.iter().map(|p| p.log_prob_sum))?;
    Ok(tape.scale(sum, -1.0 / count as f64)?)
}

pub fn loss_mask(model: &ModelWeights, tape: &mut Tape, b: &mut Bound, examples: &[MaskedExample]) -> Result<Var> {
    if examples.iter().all(|e| e.positions.is_empty()) {
        return Err(Error::Precondition("L_mask needs at least one masked target".into()));
    }
    let parts = examples.iter().map(|e| mask_forward(model, tape, b, e)).collect::<Result<Vec<_>>>()?;
    loss_mask_from(tape, &parts)
}

// ---- L_rel -----------------------------------------------------------------

/// Mean binary cross-entropy of relation probabilities (each of shape `[1]`).
pub fn loss_rel(tape: &mut Tape, probs: &[Var], labels: &[bool]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Precondition(format!("L_rel needs matching pairs, got {} probs and {} labels", probs.len(), labels.len())));
    }
    let p = if probs.len() == 1 { probs[0] } else { tape.concat(probs)? };
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    Ok(tape.bce(p, &y)?)
}

// ---- L_cont ----------------------------------------------------------------

/// `-log( e^{f+/tau} / (e^{f+/tau} + e^{f-/tau}) )` for scalar similarities.
pub fn loss_cont(tape: &mut Tape, f_pos: Var, f_neg: Var, tau: f64) -> Result<Var> {
    let a = tape.reshape(f_pos, vec![1])?;
    let b = tape.reshape(f_neg, vec![1])?;
    let pair = tape.concat(&[a, b])?;
    let pair = tape.reshape(pair, vec![1, 2])?;
    let logits = tape.scale(pair, 1.0 / tau)?;
    Ok(tape.cross_entropy(logits, &[0])?)
}

// ---- reward ----------------------------------------------------------------

/// Function words ignored by the relevance score.
pub const STOPWORDS: [&str; 14] = ["the", "The", "of", "is", "for", "a", "an", "has", "than", "vs", ".", ",", "(", ")"];

fn content<'a>(words: impl IntoIterator<Item = &'a str>) -> Vec<&'a str> {
    words.into_iter().filter(|w| !STOPWORDS.contains(w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub relevance: f64,
    pub coherence: f64,
    pub brevity: f64,
    pub total: f64,
}

/// Relevance: F1 whose precision counts content words of `S` found in the
/// evidence cells or the gold summary, and whose recall counts gold content
/// words covered by `S` (multiset).
pub fn relevance(summary: &[&str], record: &QueryRecord) -> f64 {
    let gold = content(record.summary.split_whitespace());
    let cand = content(summary.iter().copied());
    if cand.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut reference: std::collections::HashSet<&str> = gold.iter().copied().collect();
    for &(t, r, c) in &record.evidence {
        reference.extend(record.tables.tables[t].rows[r][c].split_whitespace());
    }
    let precise = cand.iter().filter(|w| reference.contains(*w)).count();
    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for w in &gold {
        *remaining.entry(w).or_insert(0) += 1;
    }
    let mut covered = 0;
    for w in &cand {
        if let Some(n) = remaining.get_mut(w) {
            if *n > 0 {
                *n -= 1;
                covered += 1;
            }
        }
    }
    if precise == 0 || covered == 0 {
        return 0.0;
    }
    let p = precise as f64 / cand.len() as f64;
    let r = covered as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `1 - repeated / total` over bigrams; 1 with fewer than two bigrams.
pub fn coherence(summary: &[&str]) -> f64 {
    if summary.len() < 3 {
        return 1.0;
    }
    let bigrams: Vec<(&str, &str)> = summary.windows(2).map(|w| (w[0], w[1])).collect();
    let distinct: std::collections::HashSet<_> = bigrams.iter().collect();
    1.0 - (bigrams.len() - distinct.len()) as f64 / bigrams.len() as f64
}

/// `exp(-| |S| / |S_gold| - 1 |)`
pub fn brevity(len: usize, gold_len: usize) -> f64 {
    if gold_len == 0 {
        return 0.0;
    }
    (-(len as f64 / gold_len as f64 - 1.0).abs()).exp()
}

/// `R(S) = alpha * relevance + beta * coherence + gamma * brevity`. An empty
/// summary scores 0 on every component.
pub fn reward_components(summary: &[&str], record: &QueryRecord, cfg: &TrainConfig) -> RewardBreakdown {
    if summary.is_empty() {
        return RewardBreakdown::default();
    }
    let relevance = relevance(summary, record);
    let coherence = coherence(summary);
    let brevity = brevity(summary.len(), record.summary.split_whitespace().count());
    let total = cfg.alpha * relevance + cfg.beta * coherence + cfg.gamma * brevity;
    RewardBreakdown { relevance, coherence, brevity, total }
}

/// Words of a generated token sequence, without the trailing `[EOS]`.
pub fn summary_words<'v>(vocab: &'v Vocab, ids: &[usize]) -> Vec<&'v str> {
    let body = match ids.last() {
        Some(&crate::tokenizer::EOS) => &ids[..ids.len() - 1],
        _ => ids,
    };
    body.iter().map(|&i| vocab.atom(i).unwrap_or("[UNK]")).collect()
}

// ---- policy gradient -------------------------------------------------------

/// Exponential moving average of past batch-mean rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub enabled: bool,
    pub decay: f64,
    pub value: Option<f64>,
}

impl RewardBaseline {
    pub fn new(enabled: bool, decay: f64) -> Self {
        RewardBaseline { enabled, decay, value: None }
    }

    /// Baseline to subtract from the current batch; computed before the
    /// batch is seen, so it does not depend on the samples.
    pub fn current(&self) -> f64 {
        if self.enabled {
            self.value.unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn update(&mut self, batch_mean: f64) {
        self.value = Some(match self.value {
            None => batch_mean,
            Some(v) => self.decay * v + (1.0 - self.decay) * batch_mean,
        });
    }
}

/// Per-sample weights `-(R_i - b) / k` of the log-probabilities in the
/// surrogate loss.
pub fn reinforce_coefficients(rewards: &[f64], baseline: f64) -> Vec<f64> {
    let k = rewards.len() as f64;
    rewards.iter().map(|r| -(r - baseline) / k).collect()
}

/// `-(1/k) sum_i (R_i - b) log P(S_i)` given the sequence log-probabilities
/// `[k]`. Its gradient is the REINFORCE estimate of `-grad E[R]`.
pub fn reinforce_surrogate(tape: &mut Tape, seq_log_probs: Var, rewards: &[f64], baseline: f64) -> Result<Var> {
    if tape.shape(seq_log_probs) != [rewards.len()] || rewards.is_empty() {
        return Err(Error::Precondition(format!("{} rewards for log-probs of shape {:?}", rewards.len(), tape.shape(seq_log_probs))));
    }
    let c = tape.leaf_from(vec![rewards.len()], reinforce_coefficients(rewards, baseline))?;
    let weighted = tape.mul(seq_log_probs, c)?;
    Ok(tape.sum(weighted)?)
}

/// Sums a token log-probability vector into one entry per range.
pub fn segment_sums(tape: &mut Tape, token_lp: Var, ranges: &[std::ops::Range<usize>]) -> Result<Var> {
    let n = tape.shape(token_lp)[0];
    let k = ranges.len();
    let mut ind = vec![0.0; n * k];
    for (j, r) in ranges.iter().enumerate() {
        for i in r.clone() {
            ind[i * k + j] = 1.0;
        }
    }
    let ind = tape.leaf_from(vec![n, k], ind)?;
    let row = tape.reshape(token_lp, vec![1, n])?;
    let s = tape.matmul(row, ind)?;
    Ok(tape.reshape(s, vec![k])?)
}

/// A one-step policy over two outcomes with `P = softmax(logits)`, used to
/// check the estimator against exact enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoOutcomePolicy {
    pub logits: [f64; 2],
}

impl TwoOutcomePolicy {
    pub fn probs(&self) -> [f64; 2] {
        let mut p = self.logits;
        kernels::softmax_in_place(&mut p, 2);
        p
    }

    /// One REINFORCE estimate of `grad E[R]` from `k` samples, computed by
    /// differentiating the same surrogate used for the model.
    pub fn estimate<R: Rng + ?Sized>(&self, rewards: [f64; 2], k: usize, baseline: f64, rng: &mut R) -> Result<[f64; 2]> {
        let p = self.probs();
        let samples: Vec<usize> = (0..k).map(|_| usize::from(rng.gen::<f64>() >= p[0])).collect();
        let r: Vec<f64> = samples.iter().map(|&s| rewards[s]).collect();
        let mut tape = Tape::new();
        let theta = tape.leaf_from(vec![1, 2], self.logits.to_vec())?;
        let rows = tape.gather_rows(theta, &vec![0; k])?;
        let lp = tape.target_log_prob(rows, &samples)?;
        let loss = reinforce_surrogate(&mut tape, lp, &r, baseline)?;
        tape.backward(loss)?;
        let g = tape.grad(theta);
        Ok([-g[0], -g[1]])
    }
}

// ---- combined objective ----------------------------------------------------

/// Per-record loss terms on a tape; `None` marks a term that was not built.
#[derive(Debug, Clone, Copy, Default)]
pub struct Terms {
    pub gen: Option<Var>,
    pub mask: Option<Var>,
    pub rel: Option<Var>,
    pub cont: Option<Var>,
    pub rl: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen: Option<f64>,
    pub mask: Option<f64>,
    pub rel: Option<f64>,
    pub cont: Option<f64>,
    pub rl: Option<f64>,
    /// `lambda1 * L_gen`
    pub weighted_gen: f64,
    /// `lambda2 * (L_mask + L_rel)`
    pub weighted_pretrain: f64,
    /// `lambda3 * L_cont`
    pub weighted_cont: f64,
    /// `lambda4 * L_RL`
    pub weighted_rl: f64,
    pub total: f64,
}

fn need(term: Option<Var>, name: &'static str) -> Result<Var> {
    term.ok_or(Error::MissingTerm(name))
}

fn sum_vars(tape: &mut Tape, vars: impl IntoIterator<Item = Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Precondition("nothing to sum".into()))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `lambda1 L_gen + lambda2 (L_mask + L_rel) + lambda3 L_cont + lambda4 L_RL`.
/// Terms whose weight is zero are skipped; an enabled term without inputs
/// is an error.
pub fn total_loss(tape: &mut Tape, terms: &Terms, lambdas: [f64; 4]) -> Result<(Var, LossBreakdown)> {
    let [l1, l2, l3, l4] = lambdas;
    let mut parts = Vec::new();
    let mut bd = LossBreakdown::default();
    let val = |tape: &Tape, v: Var| tape.scalar(v);
    if l1 > 0.0 {
        let g = need(terms.gen, "L_gen")?;
        bd.gen = Some(val(tape, g));
        bd.weighted_gen = l1 * val(tape, g);
        parts.push(tape.scale(g, l1)?);
    }
    if l2 > 0.0 {
        let m = need(terms.mask, "L_mask")?;
        let r = need(terms.rel, "L_rel")?;
        bd.mask = Some(val(tape, m));
        bd.rel = Some(val(tape, r));
        let s = tape.add(m, r)?;
        bd.weighted_pretrain = l2 * val(tape, s);
        parts.push(tape.scale(s, l2)?);
    }
    if l3 > 0.0 {
        let c = need(terms.cont, "L_cont")?;
        bd.cont = Some(val(tape, c));
        bd.weighted_cont = l3 * val(tape, c);
        parts.push(tape.scale(c, l3)?);
    }
    if l4 > 0.0 {
        let r = need(terms.rl, "L_RL")?;
        bd.rl = Some(val(tape, r));
        bd.weighted_rl = l4 * val(tape, r);
        parts.push(tape.scale(r, l4)?);
    }
    if parts.is_empty() {
        return Err(Error::Config("every objective weight is zero".into()));
    }
    let total = sum_vars(tape, parts)?;
    bd.total = tape.scalar(total);
    Ok((total, bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_record, CorpusSpec};
    use crate::model::ModelConfig;
    use crate::tokenizer::{EOS, SUM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn uniform_model(v: usize) -> ModelWeights {
        let mut m = ModelWeights::init(ModelConfig { vocab_size: v, d_model: 8, layers: 1, heads: 2, ffn: 8, max_len: 40, seed: 1 })
            .unwrap();
        m.params[crate::model::TOK_EMB].data_mut().fill(0.0);
        m
    }

    #[test]
    fn uniform_gen_loss_is_ln_v() {
        let m = uniform_model(16);
        let mut tape = Tape::new();
        let mut b = m.bind(&mut tape);
        let l = loss_gen(&m, &mut tape, &mut b, &[3, 11, SUM], &[12, 13, EOS]).unwrap();
        assert!((tape.scalar(l) - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gen_loss_agrees_with_sequence_log_prob() {
        let m = ModelWeights::init(ModelConfig { vocab_size: 16, d_model: 8, layers: 1, heads: 2, ffn: 8, max_len: 40, seed: 2 }).unwrap();
        let (prompt, s) = ([3, 11, 4, 12, SUM], [13, 14, 15, EOS]);
        let mut tape = Tape::new();
        let mut b = m.bind(&mut tape);
        let l = loss_gen(&m, &mut tape, &mut b, &prompt, &s).unwrap();
        let lp = m.sequence_log_prob(&prompt, &s).unwrap();
        assert!((tape.scalar(l) + lp / 4.0).abs() < 1e-12);
    }

    #[test]
    fn hand_two_token_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf_from(vec![2, 3], vec![1.0, 2.0, 0.0, 0.5, 0.5, -1.0]).unwrap();
        let l = tape.cross_entropy(logits, &[1, 2]).unwrap();
        let r1 = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
        let r2 = -((-1f64).exp() / (2.0 * 0.5f64.exp() + (-1f64).exp())).ln();
        assert!((tape.scalar(l) - (r1 + r2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn mask_examples_expand_multiword_cells() {
        let vocab = Vocab::build(["[TAB] t [HDR] a | b [ROW] x y | z"]);
        let t = Table::new("t", vec!["a".into(), "b".into()], vec![vec!["x y".into(), "z".into()]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = masked_example(&vocab, &t, 1.0, &mut rng).unwrap();
        assert_eq!(ex.positions.len(), 3);
        assert_eq!(ex.targets, vocab.encode("x y z"));
        for &p in &ex.positions {
            assert_eq!(ex.ids[p], MASK_ID);
        }
    }

    #[test]
    fn uniform_mask_loss_is_ln_v_and_needs_targets() {
        let m = uniform_model(16);
        let mut tape = Tape::new();
        let mut b = m.bind(&mut tape);
        let ex = MaskedExample { ids: vec![7, 11, MASK_ID, 12], positions: vec![2], targets: vec![13] };
        let l = loss_mask(&m, &mut tape, &mut b, &[ex]).unwrap();
        assert!((tape.scalar(l) - 16f64.ln()).abs() < 1e-12);
        let empty = MaskedExample { ids: vec![7, 11], positions: vec![], targets: vec![] };
        assert!(loss_mask(&m, &mut tape, &mut b, &[empty]).is_err());
    }

    #[test]
    fn rel_loss_cases() {
        let mut tape = Tape::new();
        let half = tape.leaf_from(vec![1], vec![0.5]).unwrap();
        let l = loss_rel(&mut tape, &[half, half], &[true, false]).unwrap();
        assert!((tape.scalar(l) - LN2).abs() < 1e-12);
        let a = tape.leaf_from(vec![1], vec![0.8]).unwrap();
        let b = tape.leaf_from(vec![1], vec![0.3]).unwrap();
        let l = loss_rel(&mut tape, &[a, b], &[true, false]).unwrap();
        assert!((tape.scalar(l) - (-(0.8f64.ln()) - 0.7f64.ln()) / 2.0).abs() < 1e-12);
        let one = tape.leaf_from(vec![1], vec![1.0]).unwrap();
        let l = loss_rel(&mut tape, &[one], &[true]).unwrap();
        assert!(tape.scalar(l) < 1e-11);
    }

    #[test]
    fn cont_loss_cases() {
        let mut tape = Tape::new();
        let f = tape.leaf_from(vec![], vec![0.3]).unwrap();
        let l = loss_cont(&mut tape, f, f, 0.1).unwrap();
        assert!((tape.scalar(l) - LN2).abs() < 1e-12);
        let p = tape.leaf_from(vec![], vec![1.0]).unwrap();
        let n = tape.leaf_from(vec![], vec![0.0]).unwrap();
        let l = loss_cont(&mut tape, p, n, 0.5).unwrap();
        assert!((tape.scalar(l) - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        let l = loss_cont(&mut tape, p, n, 0.001).unwrap();
        assert!(tape.scalar(l) < 1e-12);
    }

    fn record() -> QueryRecord {
        generate_record(&CorpusSpec::default(), 0)
    }

    #[test]
    fn gold_summary_scores_one() {
        let r = record();
        let words: Vec<&str> = r.summary.split_whitespace().collect();
        let bd = reward_components(&words, &r, &TrainConfig::default());
        assert_eq!((bd.relevance, bd.coherence, bd.brevity), (1.0, 1.0, 1.0));
        assert!((bd.total - 1.0).abs() < 1e-12);
        assert_eq!(reward_components(&[], &r, &TrainConfig::default()), RewardBreakdown::default());
    }

    #[test]
    fn repeated_bigrams_lower_coherence() {
        assert!((coherence(&["a", "a", "a", "a"]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(coherence(&["a", "b"]), 1.0);
        assert_eq!(brevity(4, 4), 1.0);
        assert!((brevity(2, 4) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn baseline_matching_constant_reward_gives_zero() {
        assert_eq!(reinforce_coefficients(&[0.7; 4], 0.7), vec![0.0; 4]);
        let pol = TwoOutcomePolicy { logits: [0.2, -0.4] };
        let g = pol.estimate([0.7, 0.7], 4, 0.7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn baseline_tracks_history() {
        let mut b = RewardBaseline::new(true, 0.9);
        assert_eq!(b.current(), 0.0);
        b.update(0.5);
        assert_eq!(b.current(), 0.5);
        b.update(1.0);
        assert!((b.current() - 0.55).abs() < 1e-15);
        let off = RewardBaseline { enabled: false, ..b };
        assert_eq!(off.current(), 0.0);
    }

    #[test]
    fn degenerate_lambdas_leave_gen_only() {
        let mut tape = Tape::new();
        let g = tape.leaf_from(vec![], vec![1.25]).unwrap();
        let (t, bd) = total_loss(&mut tape, &Terms { gen: Some(g), ..Default::default() }, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.scalar(t), 1.25);
        assert_eq!((bd.weighted_pretrain, bd.weighted_cont, bd.weighted_rl), (0.0, 0.0, 0.0));
        assert!(matches!(total_loss(&mut tape, &Terms::default(), [0.0, 0.0, 0.5, 0.0]), Err(Error::MissingTerm("L_cont"))));
        let terms = Terms { gen: Some(g), mask: Some(g), ..Default::default() };
        assert!(matches!(total_loss(&mut tape, &terms, [1.0, 0.5, 0.0, 0.0]), Err(Error::MissingTerm("L_rel"))));
    }

    #[test]
    fn doubling_lambda3_doubles_contribution() {
        let mut tape = Tape::new();
        let c = tape.leaf_from(vec![], vec![0.4]).unwrap();
        let terms = Terms { cont: Some(c), ..Default::default() };
        let (_, a) = total_loss(&mut tape, &terms, [0.0, 0.0, 0.5, 0.0]).unwrap();
        let (_, b) = total_loss(&mut tape, &terms, [0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(b.weighted_cont, 2.0 * a.weighted_cont);
    }

    #[test]
    fn segment_sums_split_ranges() {
        let mut tape = Tape::new();
        let v = tape.leaf_from(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let s = segment_sums(&mut tape, v, &[0..2, 2..5]).unwrap();
        assert_eq!(tape.value(s), &[3.0, 12.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 0.6, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { mask_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
    }
}
