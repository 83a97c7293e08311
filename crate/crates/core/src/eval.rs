//! Evaluation reports and model diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Complexity, Domain, QueryRecord};
use crate::decoder::{generate, DecodeMode};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::model::{encode_prompt, encode_query, encode_table, encode_table_set, ModelWeights};
use crate::objectives::masked_example;
use crate::tokenizer::{Vocab, EOS};

/// Metrics in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Percent {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub f1: f64,
}

impl From<Scores> for Percent {
    fn from(s: Scores) -> Self {
        Percent { bleu4: 100.0 * s.bleu4, rouge_l: 100.0 * s.rouge_l, f1: 100.0 * s.f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub count: usize,
    pub scores: Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub domain: String,
    pub complexity: String,
    pub tables: usize,
    pub prediction: String,
    pub gold: String,
    pub scores: Percent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub aggregate: Percent,
    pub by_domain: BTreeMap<String, Cell>,
    pub by_complexity: BTreeMap<String, Cell>,
    pub by_tables: BTreeMap<String, Cell>,
    pub rows: Vec<Row>,
}

pub const TABLE_BUCKETS: [&str; 3] = ["2", "4", "6"];

/// Table-count bucket: 2-3 tables report as "2", 4-5 as "4", 6 as "6".
pub fn table_bucket(n: usize) -> &'static str {
    match n {
        0..=3 => "2",
        4..=5 => "4",
        _ => "6",
    }
}

/// One cell per key in `keys`, empty cells included.
fn cells<'a>(rows: &'a [Row], keys: &[&str], key: impl Fn(&'a Row) -> String) -> BTreeMap<String, Cell> {
    let mut groups: BTreeMap<String, Vec<Scores>> = keys.iter().map(|k| (k.to_string(), Vec::new())).collect();
    for r in rows {
        let s = Scores { bleu4: r.scores.bleu4 / 100.0, rouge_l: r.scores.rouge_l / 100.0, f1: r.scores.f1 / 100.0 };
        groups.entry(key(r)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(k, v)| (k, Cell { count: v.len(), scores: Scores::mean(&v).into() }))
        .collect()
}

/// Scores `predictions` against the gold summaries of `records`.
pub fn report_from_predictions(
    records: &[QueryRecord],
    predictions: &[String],
    seed: u64,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if records.len() != predictions.len() {
        return Err(Error::Precondition(format!("{} records but {} predictions", records.len(), predictions.len())));
    }
    let mut all = Vec::with_capacity(records.len());
    let rows: Vec<Row> = records
        .iter()
        .zip(predictions)
        .map(|(r, p)| {
            let s = Scores::compute(p, &r.summary);
            all.push(s);
            Row {
                id: r.id.clone(),
                domain: r.domain.as_str().to_string(),
                complexity: r.complexity.as_str().to_string(),
                tables: r.tables.len(),
                prediction: p.clone(),
                gold: r.summary.clone(),
                scores: s.into(),
            }
        })
        .collect();
    Ok(EvalReport {
        seed,
        config,
        aggregate: Scores::mean(&all).into(),
        by_domain: cells(&rows, &Domain::ALL.map(Domain::as_str), |r| r.domain.clone()),
        by_complexity: cells(&rows, &Complexity::ALL.map(Complexity::as_str), |r| r.complexity.clone()),
        by_tables: cells(&rows, &TABLE_BUCKETS, |r| table_bucket(r.tables).to_string()),
        rows,
    })
}

/// Decodes every record and scores the outputs.
pub fn evaluate(
    model: &ModelWeights,
    vocab: &Vocab,
    records: &[QueryRecord],
    mode: DecodeMode,
    max_new: usize,
    seed: u64,
    config: BTreeMap<String, String>,
) -> Result<EvalReport> {
    let preds = predict(model, vocab, records, mode, max_new, seed)?;
    report_from_predictions(records, &preds, seed, config)
}

pub fn predict(
    model: &ModelWeights,
    vocab: &Vocab,
    records: &[QueryRecord],
    mode: DecodeMode,
    max_new: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|r| {
            let prompt = encode_prompt(vocab, &r.query, &r.tables)?;
            summarize_ids(model, vocab, &prompt, mode, max_new, &mut rng)
        })
        .collect()
}

/// Generates and decodes one summary, dropping the trailing `[EOS]`.
pub fn summarize_ids<R: Rng + ?Sized>(
    model: &ModelWeights,
    vocab: &Vocab,
    prompt: &[usize],
    mode: DecodeMode,
    max_new: usize,
    rng: &mut R,
) -> Result<String> {
    let mut out = generate(model, prompt, mode, max_new, rng)?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    vocab.decode(&out)
}

impl EvalReport {
    /// Aligned plain-text table of the aggregate and every breakdown cell.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>5} {:>7} {:>7} {:>7}", "group", "n", "BLEU-4", "ROUGE-L", "F1");
        let mut line = |name: &str, n: usize, s: &Percent| {
            let _ = writeln!(out, "{name:<20} {n:>5} {:>7.1} {:>7.1} {:>7.1}", s.bleu4, s.rouge_l, s.f1);
        };
        line("all", self.rows.len(), &self.aggregate);
        for (prefix, map) in [("domain", &self.by_domain), ("complexity", &self.by_complexity), ("tables", &self.by_tables)] {
            for (k, c) in map {
                line(&format!("{prefix}={k}"), c.count, &c.scores);
            }
        }
        out
    }
}

/// Top-1 accuracy at masked cell positions of every table in `records`.
pub fn masked_cell_accuracy(
    model: &ModelWeights,
    vocab: &Vocab,
    records: &[QueryRecord],
    rate: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    let v = model.config.vocab_size;
    for r in records {
        for t in &r.tables.tables {
            let ex = masked_example(vocab, t, rate, &mut rng)?;
            let logits = model.forward_logits(&ex.ids)?;
            for (&p, &target) in ex.positions.iter().zip(&ex.targets) {
                let row = &logits.data()[p * v..(p + 1) * v];
                let best = (0..v).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                hit += (best == target) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no masked cells".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Area under the ROC curve; ties between a positive and a negative count
/// one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Relation-head ROC-AUC over every candidate table pair of `records`.
pub fn relation_auc(model: &ModelWeights, vocab: &Vocab, records: &[QueryRecord]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records {
        let enc = r.tables.tables.iter().map(|t| encode_table(vocab, t)).collect::<Result<Vec<_>>>()?;
        for (i, j, label) in r.tables.relation_candidates() {
            scores.push(model.predict_relation(&enc[i], &enc[j])?);
            labels.push(label);
        }
    }
    roc_auc(&scores, &labels)
}

/// Mean `f(Q, T)` over matching pairs minus the mean over mismatched pairs,
/// where record `i`'s query is paired with record `i + 1`'s tables.
pub fn contrastive_gap(model: &ModelWeights, vocab: &Vocab, records: &[QueryRecord]) -> Result<f64> {
    let n = records.len();
    if n < 2 {
        return Err(Error::Data("contrastive gap needs at least two records".into()));
    }
    let tables = records.iter().map(|r| encode_table_set(vocab, &r.tables)).collect::<Result<Vec<_>>>()?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        let q = encode_query(vocab, &r.query);
        pos += model.score_similarity(&q, &tables[i])?;
        neg += model.score_similarity(&q, &tables[(i + 1) % n])?;
    }
    Ok((pos - neg) / n as f64)
}
