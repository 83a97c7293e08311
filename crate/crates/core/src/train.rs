//! Phase-scheduled training.
//!
//! Each phase enables a subset of the objective weights: pretraining uses
//! the table tasks only, finetuning adds generation and contrastive
//! alignment, and the policy-gradient phase keeps generation alongside the
//! reward-driven term. Joint mode enables every term in every phase.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Tape, Var};
use crate::corpus::QueryRecord;
use crate::decoder::{sample_many, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{encode_prompt, encode_query, encode_summary, encode_table, encode_table_set, Bound, ModelWeights};
use crate::objectives::{
    loss_cont, loss_mask_from, loss_rel, mask_forward, masked_example, reinforce_surrogate, reward_components,
    segment_sums, summary_words, total_loss, LossBreakdown, RewardBaseline, Terms, TrainConfig,
};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
    Rl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Rl => "rl",
        }
    }

    /// Objective weights active in this phase.
    pub fn lambdas(self, cfg: &TrainConfig, joint: bool) -> [f64; 4] {
        let [l1, l2, l3, l4] = cfg.lambdas();
        if joint {
            return [l1, l2, l3, l4];
        }
        match self {
            Phase::Pretrain => [0.0, l2, 0.0, 0.0],
            Phase::Finetune => [l1, 0.0, l3, 0.0],
            Phase::Rl => [if cfg.rl_keep_gen { l1 } else { 0.0 }, 0.0, 0.0, l4],
        }
    }

    pub fn epochs(self, cfg: &TrainConfig) -> usize {
        match self {
            Phase::Pretrain => cfg.pretrain_epochs,
            Phase::Finetune => cfg.finetune_epochs,
            Phase::Rl => cfg.rl_epochs,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Finetune => 2,
            Phase::Rl => 3,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            "rl" => Ok(Phase::Rl),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

/// A record encoded for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record: QueryRecord,
    pub prompt: Vec<usize>,
    pub summary: Vec<usize>,
    pub query: Vec<usize>,
    pub table_set: Vec<usize>,
    pub tables: Vec<Vec<usize>>,
}

impl Example {
    pub fn new(vocab: &Vocab, record: &QueryRecord) -> Result<Self> {
        Ok(Example {
            prompt: encode_prompt(vocab, &record.query, &record.tables)?,
            summary: encode_summary(vocab, &record.summary),
            query: encode_query(vocab, &record.query),
            table_set: encode_table_set(vocab, &record.tables)?,
            tables: record.tables.tables.iter().map(|t| encode_table(vocab, t)).collect::<Result<_>>()?,
            record: record.clone(),
        })
    }

    /// Longest sequence the model sees for this record.
    pub fn max_input_len(&self) -> usize {
        (self.prompt.len() + self.summary.len() - 1).max(self.table_set.len())
    }
}

/// Encodes every record, rejecting the batch if any record would exceed
/// `max_len`. Inputs are never truncated.
pub fn prepare(vocab: &Vocab, records: &[QueryRecord], max_len: usize) -> Result<Vec<Example>> {
    let examples = records.iter().map(|r| Example::new(vocab, r)).collect::<Result<Vec<_>>>()?;
    let too_long: Vec<usize> = examples.iter().map(Example::max_input_len).filter(|&l| l > max_len).collect();
    if let Some(&len) = too_long.iter().max() {
        return Err(Error::Data(format!(
            "{} of {} records exceed max_len {max_len} (longest {len} tokens); raise max_len, inputs are never truncated",
            too_long.len(),
            examples.len()
        )));
    }
    Ok(examples)
}

/// One optimizer step, as written to the JSON Lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub mean_reward: Option<f64>,
    pub baseline: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub weights: ModelWeights,
    pub steps: Vec<StepLog>,
    pub elapsed: Duration,
}

impl PhaseOutcome {
    /// Mean of `f` over the steps of each epoch.
    pub fn epoch_means(&self, f: impl Fn(&StepLog) -> f64) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(&f).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }
}

struct BatchCtx<'a> {
    model: &'a ModelWeights,
    vocab: &'a Vocab,
    cfg: &'a TrainConfig,
    all: &'a [Example],
}

struct BatchTerms {
    terms: Terms,
    rewards: Vec<f64>,
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = tape.add(acc, *v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / vars.len() as f64)?))
}

fn build_terms(
    ctx: &BatchCtx<'_>,
    tape: &mut Tape,
    b: &mut Bound,
    batch: &[usize],
    lambdas: [f64; 4],
    baseline: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchTerms> {
    let [l1, l2, l3, l4] = lambdas;
    let (model, cfg) = (ctx.model, ctx.cfg);
    let mut terms = Terms::default();
    let mut rewards = Vec::new();

    if l2 > 0.0 {
        let mut parts = Vec::new();
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for &i in batch {
            let ex = &ctx.all[i];
            let mut pools = Vec::with_capacity(ex.record.tables.len());
            for t in &ex.record.tables.tables {
                let m = masked_example(ctx.vocab, t, cfg.mask_rate, rng)?;
                let f = mask_forward(model, tape, b, &m)?;
                pools.push(f.pool);
                parts.push(f);
            }
            for (ti, tj, label) in ex.record.tables.relation_candidates() {
                probs.push(model.relation_prob(tape, b, pools[ti], pools[tj])?);
                labels.push(label);
            }
        }
        terms.mask = Some(loss_mask_from(tape, &parts)?);
        terms.rel = Some(loss_rel(tape, &probs, &labels)?);
    }

    let mut gen = Vec::new();
    let mut rl = Vec::new();
    if l4 > 0.0 {
        for &i in batch {
            let ex = &ctx.all[i];
            let mode = DecodeMode::Temperature(cfg.rl_temperature);
            let samples = sample_many(model, &ex.prompt, cfg.rl_samples, mode, cfg.max_new_tokens, rng)?;
            let r: Vec<f64> = samples
                .iter()
                .map(|s| reward_components(&summary_words(ctx.vocab, s), &ex.record, cfg).total)
                .collect();
            rewards.extend_from_slice(&r);
            let mut seqs: Vec<&[usize]> = samples.iter().map(Vec::as_slice).collect();
            if l1 > 0.0 {
                seqs.push(&ex.summary);
            }
            let (lp, ranges) = model.packed_sample_log_probs(tape, b, &ex.prompt, &seqs)?;
            let sums = segment_sums(tape, lp, &ranges[..samples.len()])?;
            rl.push(reinforce_surrogate(tape, sums, &r, baseline)?);
            if l1 > 0.0 {
                let g = ranges[samples.len()].clone();
                let gold = segment_sums(tape, lp, std::slice::from_ref(&g))?;
                let s = tape.sum(gold)?;
                gen.push(tape.scale(s, -1.0 / g.len() as f64)?);
            }
        }
    } else if l1 > 0.0 {
        for &i in batch {
            let ex = &ctx.all[i];
            gen.push(crate::objectives::loss_gen(model, tape, b, &ex.prompt, &ex.summary)?);
        }
    }
    terms.gen = mean_of(tape, &gen)?;
    terms.rl = mean_of(tape, &rl)?;

    if l3 > 0.0 {
        let mut tpools = Vec::with_capacity(batch.len());
        for &i in batch {
            tpools.push(model.pool(tape, b, &ctx.all[i].table_set)?);
        }
        let mut losses = Vec::with_capacity(batch.len());
        for (k, &i) in batch.iter().enumerate() {
            let q = model.pool(tape, b, &ctx.all[i].query)?;
            let neg = if batch.len() > 1 {
                let mut j = rng.gen_range(0..batch.len() - 1);
                if j >= k {
                    j += 1;
                }
                tpools[j]
            } else {
                if ctx.all.len() < 2 {
                    return Err(Error::MissingTerm("L_cont"));
                }
                let mut j = rng.gen_range(0..ctx.all.len() - 1);
                if j >= i {
                    j += 1;
                }
                model.pool(tape, b, &ctx.all[j].table_set)?
            };
            let fp = tape.cosine(q, tpools[k])?;
            let fn_ = tape.cosine(q, neg)?;
            losses.push(loss_cont(tape, fp, fn_, cfg.tau)?);
        }
        terms.cont = mean_of(tape, &losses)?;
    }
    Ok(BatchTerms { terms, rewards })
}

fn non_finite(what: &str, step: usize, detail: impl Into<String>) -> Error {
    Error::NonFinite { what: what.into(), step, detail: detail.into() }
}

/// Runs `phase` for its configured number of epochs over `train`, starting
/// from `init`. Every step is appended to `log` as one JSON line.
pub fn run_phase(
    init: &ModelWeights,
    vocab: &Vocab,
    train: &[Example],
    cfg: &TrainConfig,
    phase: Phase,
    joint: bool,
    mut log: Option<&mut (dyn Write + '_)>,
) -> Result<PhaseOutcome> {
    cfg.validate()?;
    if vocab.len() != init.config.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "model expects {} atoms, vocabulary has {}",
            init.config.vocab_size,
            vocab.len()
        )));
    }
    let started = Instant::now();
    let lambdas = phase.lambdas(cfg, joint);
    let mut weights = init.clone();
    let mut steps = Vec::new();
    let epochs = phase.epochs(cfg);
    if epochs == 0 || lambdas.iter().all(|l| *l == 0.0) {
        return Ok(PhaseOutcome { weights, steps, elapsed: started.elapsed() });
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(phase.stream());
    let mut adam = AdamState::new(&weights.params);
    let mut baseline = RewardBaseline::new(cfg.rl_baseline, cfg.baseline_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let b_now = baseline.current();
            let mut tape = Tape::new();
            let mut bound = weights.bind(&mut tape);
            let ctx = BatchCtx { model: &weights, vocab, cfg, all: train };
            let bt = build_terms(&ctx, &mut tape, &mut bound, batch, lambdas, b_now, &mut rng)
                .map_err(|e| match e {
                    Error::Tensor(t) => non_finite("forward value", step, t.to_string()),
                    other => other,
                })?;
            let (loss, breakdown) = total_loss(&mut tape, &bt.terms, lambdas)?;
            if !breakdown.total.is_finite() {
                return Err(non_finite("loss", step, format!("{breakdown:?}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = bound.vars.iter().map(|v| tape.grad(*v)).collect();
            if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
                let name = &crate::model::param_specs(&weights.config)[i].0;
                return Err(non_finite("gradient", step, format!("parameter {name}")));
            }
            drop(tape);
            adam_step(&mut weights.params, &grads, &mut adam, cfg.adam());
            let mean_reward = if bt.rewards.is_empty() {
                None
            } else {
                let m = bt.rewards.iter().sum::<f64>() / bt.rewards.len() as f64;
                baseline.update(m);
                Some(m)
            };
            let entry = StepLog {
                phase,
                epoch,
                step,
                loss: breakdown,
                mean_reward,
                baseline: mean_reward.map(|_| b_now),
            };
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            steps.push(entry);
            step += 1;
        }
    }
    Ok(PhaseOutcome { weights, steps, elapsed: started.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;

    fn setup(n: usize) -> (Vocab, Vec<Example>, ModelWeights) {
        let recs = generate_corpus(&CorpusSpec { num_records: n, tables: (2, 3), ..Default::default() }).unwrap();
        let vocab = crate::corpus::build_vocab(&recs).unwrap();
        let ex = prepare(&vocab, &recs, 256).unwrap();
        let cfg = ModelConfig { vocab_size: vocab.len(), d_model: 8, layers: 1, heads: 2, ffn: 8, max_len: 256, seed: 1 };
        (vocab, ex, ModelWeights::init(cfg).unwrap())
    }

    fn cfg() -> TrainConfig {
        TrainConfig { pretrain_epochs: 1, finetune_epochs: 1, rl_epochs: 1, batch_size: 3, rl_samples: 2, max_new_tokens: 6, ..Default::default() }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (v, ex, m) = setup(6);
        let c = TrainConfig { pretrain_epochs: 0, ..cfg() };
        let out = run_phase(&m, &v, &ex, &c, Phase::Pretrain, false, None).unwrap();
        assert_eq!(out.weights, m);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn phases_mask_lambdas() {
        let (v, ex, m) = setup(6);
        for phase in [Phase::Pretrain, Phase::Finetune, Phase::Rl] {
            let out = run_phase(&m, &v, &ex, &cfg(), phase, false, None).unwrap();
            assert_eq!(out.steps.len(), 2);
            for s in &out.steps {
                let l = &s.loss;
                match phase {
                    Phase::Pretrain => {
                        assert_eq!((l.weighted_gen, l.weighted_cont, l.weighted_rl), (0.0, 0.0, 0.0));
                        assert!(l.weighted_pretrain > 0.0);
                    }
                    Phase::Finetune => assert_eq!((l.weighted_pretrain, l.weighted_rl), (0.0, 0.0)),
                    Phase::Rl => {
                        assert_eq!((l.weighted_pretrain, l.weighted_cont), (0.0, 0.0));
                        assert!(s.mean_reward.is_some());
                    }
                }
            }
            assert_ne!(out.weights, m);
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (v, ex, m) = setup(6);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let o1 = run_phase(&m, &v, &ex, &cfg(), Phase::Rl, true, Some(&mut a)).unwrap();
        let o2 = run_phase(&m, &v, &ex, &cfg(), Phase::Rl, true, Some(&mut b)).unwrap();
        assert_eq!(o1.weights, o2.weights);
        assert_eq!(a, b);
        let first: StepLog = serde_json::from_str(std::str::from_utf8(&a).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        assert!(first.loss.mask.is_some() && first.loss.cont.is_some());
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (v, ex, m) = setup(4);
        let other = ModelWeights::init(ModelConfig { vocab_size: v.len() + 1, ..m.config.clone() }).unwrap();
        assert!(matches!(run_phase(&other, &v, &ex, &cfg(), Phase::Pretrain, false, None), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn over_length_records_are_counted() {
        let recs = generate_corpus(&CorpusSpec { num_records: 5, ..Default::default() }).unwrap();
        let vocab = crate::corpus::build_vocab(&recs).unwrap();
        let err = prepare(&vocab, &recs, 20).unwrap_err().to_string();
        assert!(err.contains("5 of 5 records exceed max_len 20"), "{err}");
    }
}
