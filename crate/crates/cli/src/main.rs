//! `tablesum` command-line interface.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on
//! data and validation errors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tablesum::checkpoint::{self, Checkpoint};
use tablesum::config::{ModelShape, Settings};
use tablesum::corpus::{build_vocab, generate_corpus, read_dataset, write_dataset, CorpusSpec, Split};
use tablesum::decoder::DecodeMode;
use tablesum::eval::{evaluate, summarize_ids};
use tablesum::gradcheck::{self, TOLERANCE};
use tablesum::model::{encode_prompt, ModelWeights};
use tablesum::pipeline::{ablate, init_model, Data};
use tablesum::table::{Table, TableSet};
use tablesum::tokenizer::Vocab;
use tablesum::train::{run_phase, Phase};

pub const DATA_FILE: &str = "data.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Parser)]
#[command(name = "tablesum", version, about = "Query-focused summarization over related tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint; a fresh model when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Step log (JSON Lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Enable every objective term in this phase.
    #[arg(long)]
    joint: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its vocabulary.
    GenData {
        #[arg(long, default_value_t = 200)]
        num: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Table-aware pretraining (masked cells and table relations).
    Pretrain(TrainArgs),
    /// Query-aligned finetuning (generation and contrastive alignment).
    Finetune(TrainArgs),
    /// Policy-gradient tuning against the summary reward.
    RlTune(TrainArgs),
    /// Decode a split and report BLEU-4, ROUGE-L and F1.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Sampling temperature; greedy when omitted.
        #[arg(long)]
        temperature: Option<f64>,
        /// Directory for `report.json` and `report.txt`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare the full, no-pretraining and no-RL schedules.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "7,8,9")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        joint: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a summary for one query over a JSON array of tables.
    Summarize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every op and a one-block model.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = gradcheck::EPS)]
        eps: f64,
    },
}

fn settings(common: &Common) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        s.apply_file(path).with_context(|| format!("reading config {}", path.display()))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| tablesum::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        s.train.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocab> {
    Vocab::load(path).with_context(|| format!("reading {}", path.display()))
}

fn load_data(dir: &Path, max_len: usize) -> anyhow::Result<Data> {
    let path = dir.join(DATA_FILE);
    let records = read_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Data::new(records, load_vocab(&dir.join(VOCAB_FILE))?, max_len)?)
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> anyhow::Result<ModelWeights> {
    let ck = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.vocab_fingerprint != vocab.fingerprint() {
        return Err(tablesum::Error::VocabMismatch(format!(
            "{} was trained with a different vocabulary",
            path.display()
        ))
        .into());
    }
    Ok(ck.weights)
}

fn decode_mode(temperature: Option<f64>) -> anyhow::Result<DecodeMode> {
    match temperature {
        None => Ok(DecodeMode::Greedy),
        Some(t) if t >= 0.0 && t.is_finite() => Ok(DecodeMode::Temperature(t)),
        Some(t) => Err(tablesum::Error::Config(format!("temperature must be >= 0, got {t}")).into()),
    }
}

fn train(phase: Phase, a: &TrainArgs) -> anyhow::Result<()> {
    let s = settings(&a.common)?;
    let vocab = load_vocab(&a.data.join(VOCAB_FILE))?;
    let init = match &a.init {
        Some(p) => load_checkpoint(p, &vocab)?,
        None => ModelWeights::init(s.model.config(vocab.len(), s.train.seed))?,
    };
    let data = load_data(&a.data, init.config.max_len)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let out = run_phase(&init, &data.vocab, &data.train, &s.train, phase, a.joint, Some(&mut log))?;
    log.flush()?;
    let ck = Checkpoint { weights: out.weights.clone(), vocab_fingerprint: data.vocab.fingerprint() };
    checkpoint::save(&ck, &a.out)?;
    let means = out.epoch_means(|st| st.loss.total);
    for (e, m) in means.iter().enumerate() {
        println!("{phase} epoch {:>3}  loss {m:.4}", e + 1);
    }
    println!("wrote {} ({} steps, log {})", a.out.display(), out.steps.len(), log_path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { num, out, common } => {
            let s = settings(&common)?;
            let spec = CorpusSpec { num_records: num, seed: s.train.seed, ..Default::default() };
            let records = generate_corpus(&spec)?;
            let vocab = build_vocab(&records)?;
            fs::create_dir_all(&out)?;
            write_dataset(&records, &out.join(DATA_FILE))?;
            vocab.save(&out.join(VOCAB_FILE))?;
            println!("wrote {} records and {} atoms to {}", records.len(), vocab.len(), out.display());
        }
        Command::Pretrain(a) => train(Phase::Pretrain, &a)?,
        Command::Finetune(a) => train(Phase::Finetune, &a)?,
        Command::RlTune(a) => train(Phase::Rl, &a)?,
        Command::Eval { data, ckpt, split, temperature, out_dir, common } => {
            let mut s = settings(&common)?;
            let split: Split = split.parse()?;
            let mode = decode_mode(temperature)?;
            let vocab = load_vocab(&data.join(VOCAB_FILE))?;
            let w = load_checkpoint(&ckpt, &vocab)?;
            s.model = ModelShape::of(&w.config);
            let d = load_data(&data, w.config.max_len)?;
            let report = evaluate(&w, &d.vocab, d.split(split), mode, s.train.max_new_tokens, s.train.seed, s.echo())?;
            let text = report.to_text();
            print!("{text}");
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
                fs::write(dir.join("report.txt"), text)?;
            }
        }
        Command::Ablate { data, seeds, out_dir, joint, common } => {
            let s = settings(&common)?;
            if seeds.is_empty() {
                bail!(tablesum::Error::Config("--seeds needs at least one seed".into()));
            }
            let d = load_data(&data, s.model.max_len)?;
            init_model(&d, &s)?;
            let report = ablate(&d, &s, &seeds, joint)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(dir) = out_dir {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
                fs::write(dir.join("ablation.txt"), text)?;
            }
        }
        Command::Summarize { ckpt, vocab, query, tables, temperature, common } => {
            let s = settings(&common)?;
            let mode = decode_mode(temperature)?;
            let vocab = load_vocab(&vocab)?;
            let w = load_checkpoint(&ckpt, &vocab)?;
            let text = fs::read_to_string(&tables).with_context(|| format!("reading {}", tables.display()))?;
            let list: Vec<Table> = serde_json::from_str(&text)
                .map_err(|e| tablesum::Error::Data(format!("{}: {e}", tables.display())))?;
            let ts = TableSet::new(list);
            ts.validate()?;
            let prompt = encode_prompt(&vocab, &query, &ts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
            println!("{}", summarize_ids(&w, &vocab, &prompt, mode, s.train.max_new_tokens, &mut rng)?);
        }
        Command::GradCheck { seeds, eps } => {
            let seeds: Vec<u64> = (0..seeds).collect();
            let results = gradcheck::run_all(&seeds, eps)?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("{:<28} {:.3e}", r.name, r.max_error);
                worst = worst.max(r.max_error);
            }
            println!("max relative error {worst:.3e} over {} seeds", seeds.len());
            if worst >= TOLERANCE {
                bail!(tablesum::Error::Precondition(format!("gradient check failed: {worst:.3e} >= {TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<tablesum::Error>() {
        Some(tablesum::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
