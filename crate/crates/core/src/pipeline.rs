//! End-to-end schedules and the ablation study.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::corpus::{split, QueryRecord, Split};
use crate::decoder::DecodeMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Percent};
use crate::model::ModelWeights;
use crate::tokenizer::Vocab;
use crate::train::{prepare, run_phase, Example, Phase, PhaseOutcome};

/// A dataset with its vocabulary and encoded training split.
#[derive(Debug, Clone)]
pub struct Data {
    pub records: Vec<QueryRecord>,
    pub vocab: Vocab,
    pub train: Vec<Example>,
}

impl Data {
    pub fn new(records: Vec<QueryRecord>, vocab: Vocab, max_len: usize) -> Result<Self> {
        prepare(&vocab, &records, max_len)?;
        let train = prepare(&vocab, split(&records, Split::Train), max_len)?;
        Ok(Data { records, vocab, train })
    }

    pub fn split(&self, s: Split) -> &[QueryRecord] {
        split(&self.records, s)
    }
}

/// Seeded copy of `settings`: the seed drives both initialization and
/// every training phase.
pub fn with_seed(settings: &Settings, seed: u64) -> Settings {
    let mut s = settings.clone();
    s.train.seed = seed;
    s
}

pub fn init_model(data: &Data, settings: &Settings) -> Result<ModelWeights> {
    ModelWeights::init(settings.model.config(data.vocab.len(), settings.train.seed))
}

/// Runs `phases` in order, each starting from the previous weights.
pub fn run_schedule(
    data: &Data,
    init: &ModelWeights,
    settings: &Settings,
    phases: &[Phase],
    joint: bool,
    mut log: Option<&mut (dyn Write + '_)>,
) -> Result<(ModelWeights, Vec<PhaseOutcome>)> {
    let mut w = init.clone();
    let mut outs = Vec::with_capacity(phases.len());
    for &p in phases {
        let o = run_phase(&w, &data.vocab, &data.train, &settings.train, p, joint, log.as_deref_mut())?;
        w = o.weights.clone();
        outs.push(o);
    }
    Ok((w, outs))
}

pub fn evaluate_split(data: &Data, w: &ModelWeights, settings: &Settings, s: Split) -> Result<EvalReport> {
    evaluate(
        w,
        &data.vocab,
        data.split(s),
        DecodeMode::Greedy,
        settings.train.max_new_tokens,
        settings.train.seed,
        settings.echo(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoPretrain,
    NoRl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoPretrain, Variant::NoRl];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "w/o pretrain",
            Variant::NoRl => "w/o RL",
        }
    }

    pub fn phases(self) -> &'static [Phase] {
        match self {
            Variant::Full => &[Phase::Pretrain, Phase::Finetune, Phase::Rl],
            Variant::NoPretrain => &[Phase::Finetune, Phase::Rl],
            Variant::NoRl => &[Phase::Pretrain, Phase::Finetune],
        }
    }
}

/// Test-split reports of all three variants for one seed. Shared prefixes
/// of the schedules are trained once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub full: EvalReport,
    pub no_pretrain: EvalReport,
    pub no_rl: EvalReport,
}

impl SeedRun {
    pub fn report(&self, v: Variant) -> &EvalReport {
        match v {
            Variant::Full => &self.full,
            Variant::NoPretrain => &self.no_pretrain,
            Variant::NoRl => &self.no_rl,
        }
    }
}

/// Trained weights of every variant alongside the phase logs.
pub struct SeedModels {
    pub full: ModelWeights,
    pub no_pretrain: ModelWeights,
    pub no_rl: ModelWeights,
    pub pretrain: PhaseOutcome,
    pub finetune: PhaseOutcome,
    pub rl: PhaseOutcome,
}

pub fn train_variants(data: &Data, settings: &Settings, joint: bool) -> Result<SeedModels> {
    let init = init_model(data, settings)?;
    let cfg = &settings.train;
    let pre = run_phase(&init, &data.vocab, &data.train, cfg, Phase::Pretrain, joint, None)?;
    let fine = run_phase(&pre.weights, &data.vocab, &data.train, cfg, Phase::Finetune, joint, None)?;
    let rl = run_phase(&fine.weights, &data.vocab, &data.train, cfg, Phase::Rl, joint, None)?;
    let (no_pretrain, _) = run_schedule(data, &init, settings, Variant::NoPretrain.phases(), joint, None)?;
    Ok(SeedModels {
        full: rl.weights.clone(),
        no_rl: fine.weights.clone(),
        no_pretrain,
        pretrain: pre,
        finetune: fine,
        rl,
    })
}

pub fn run_seed(data: &Data, settings: &Settings, seed: u64, joint: bool) -> Result<(SeedRun, SeedModels)> {
    let s = with_seed(settings, seed);
    let m = train_variants(data, &s, joint)?;
    let run = SeedRun {
        seed,
        full: evaluate_split(data, &m.full, &s, Split::Test)?,
        no_pretrain: evaluate_split(data, &m.no_pretrain, &s, Split::Test)?,
        no_rl: evaluate_split(data, &m.no_rl, &s, Split::Test)?,
    };
    Ok((run, m))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_percent(xs: &[Percent]) -> Percent {
    let col = |f: fn(&Percent) -> f64| median(&xs.iter().map(f).collect::<Vec<_>>());
    Percent { bleu4: col(|p| p.bleu4), rouge_l: col(|p| p.rouge_l), f1: col(|p| p.f1) }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub median: Percent,
    pub per_seed: Vec<Percent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Median BLEU-4 of the full model on simple and complex queries.
    pub simple_vs_complex: (f64, f64),
    /// Median BLEU-4 of the full model with 2 and 6 tables.
    pub two_vs_six_tables: (f64, f64),
    /// Expected orderings that did not hold.
    pub flags: Vec<String>,
    pub runs: Vec<SeedRun>,
}

fn cell_bleu(r: &EvalReport, group: &str, key: &str) -> Option<f64> {
    let map = match group {
        "complexity" => &r.by_complexity,
        _ => &r.by_tables,
    };
    map.get(key).filter(|c| c.count > 0).map(|c| c.scores.bleu4)
}

fn median_cell(runs: &[SeedRun], group: &str, key: &str) -> f64 {
    median(&runs.iter().filter_map(|r| cell_bleu(&r.full, group, key)).collect::<Vec<_>>())
}

/// Summarizes per-seed runs: medians per variant and trend flags.
pub fn summarize_runs(runs: Vec<SeedRun>) -> Result<AblationReport> {
    if runs.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let rows: Vec<AblationRow> = Variant::ALL
        .iter()
        .map(|&v| {
            let per_seed: Vec<Percent> = runs.iter().map(|r| r.report(v).aggregate).collect();
            AblationRow { variant: v.label().to_string(), median: median_percent(&per_seed), per_seed }
        })
        .collect();
    let simple_vs_complex = (median_cell(&runs, "complexity", "simple"), median_cell(&runs, "complexity", "complex"));
    let two_vs_six_tables = (median_cell(&runs, "tables", "2"), median_cell(&runs, "tables", "6"));
    let mut flags = Vec::new();
    let full = rows[0].median.bleu4;
    for row in &rows[1..] {
        if full < row.median.bleu4 {
            flags.push(format!("full BLEU-4 {full:.1} < {} BLEU-4 {:.1}", row.variant, row.median.bleu4));
        }
    }
    let ge = |(a, b): (f64, f64)| a >= b || a.is_nan() || b.is_nan();
    if !ge(simple_vs_complex) {
        flags.push(format!("simple BLEU-4 {:.1} < complex BLEU-4 {:.1}", simple_vs_complex.0, simple_vs_complex.1));
    }
    if !ge(two_vs_six_tables) {
        flags.push(format!("2-table BLEU-4 {:.1} < 6-table BLEU-4 {:.1}", two_vs_six_tables.0, two_vs_six_tables.1));
    }
    Ok(AblationReport {
        seeds: runs.iter().map(|r| r.seed).collect(),
        rows,
        simple_vs_complex,
        two_vs_six_tables,
        flags,
        runs,
    })
}

pub fn ablate(data: &Data, settings: &Settings, seeds: &[u64], joint: bool) -> Result<AblationReport> {
    let runs = seeds.iter().map(|&s| run_seed(data, settings, s, joint).map(|(r, _)| r)).collect::<Result<Vec<_>>>()?;
    summarize_runs(runs)
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>7} {:>7} {:>7}", "variant", "BLEU-4", "ROUGE-L", "F1");
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>7.1} {:>7.1} {:>7.1}", r.variant, r.median.bleu4, r.median.rouge_l, r.median.f1);
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "medians over seeds {}", seeds.join(", "));
        for f in &self.flags {
            let _ = writeln!(out, "warning: {f}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, generate_corpus, CorpusSpec};

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    fn tiny() -> (Data, Settings) {
        let recs = generate_corpus(&CorpusSpec { num_records: 10, tables: (2, 3), ..Default::default() }).unwrap();
        let vocab = build_vocab(&recs).unwrap();
        let mut s = Settings::default();
        for (k, v) in [
            ("d_model", "8"), ("layers", "1"), ("heads", "2"), ("ffn", "8"), ("max_len", "256"),
            ("pretrain_epochs", "1"), ("finetune_epochs", "1"), ("rl_epochs", "1"),
            ("rl_samples", "2"), ("max_new_tokens", "4"), ("batch_size", "4"),
        ] {
            s.set(k, v).unwrap();
        }
        (Data::new(recs, vocab, 256).unwrap(), s)
    }

    #[test]
    fn ablation_has_three_rows_and_full_matches_standalone() {
        let (data, s) = tiny();
        let rep = ablate(&data, &s, &[3], false).unwrap();
        assert_eq!(rep.rows.len(), 3);
        let s3 = with_seed(&s, 3);
        let init = init_model(&data, &s3).unwrap();
        let (w, _) = run_schedule(&data, &init, &s3, Variant::Full.phases(), false, None).unwrap();
        assert_eq!(evaluate_split(&data, &w, &s3, Split::Test).unwrap(), rep.runs[0].full);
    }
}
