//! Subcommand definitions and their handlers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use salm_core::bpe::{train_bpe, TokenId, TokenizerModel};
use salm_core::corpus::{
    clean_text, concat_corpora, corpus_stats, split_corpus, CleaningConfig, RawCorpus,
};
use salm_core::eval::{compare_report, evaluate_neural, evaluate_ngram, EvalReport};
use salm_core::ngram::{count_ngrams, estimate_mkn, export_arpa, import_arpa};
use salm_core::nn::{Arch, LanguageModel, LmCheckpoint, LmConfig};
use salm_core::rng::RngStream;
use salm_core::train::{train, TrainConfig};
use salm_core::{Error, Result};

use crate::config::{load_experiment, read_config, source_tag, SCHEMA};
use crate::experiment::{run_experiment, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "salm", version, about = "Subword language models for low-resource text")]
pub struct Cli {
    /// Seed for every random stream (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; computation is single-threaded, so only 1 changes nothing.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Log progress at debug level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean, split, concatenate and count text corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train and apply BPE tokenizers.
    #[command(subcommand)]
    Bpe(BpeCmd),
    /// Modified Kneser-Ney n-gram models in ARPA format.
    #[command(subcommand)]
    Ngram(NgramCmd),
    /// Neural language models.
    #[command(subcommand)]
    Nn(NnCmd),
    /// Score a model on a test file, or compare saved reports.
    Eval(EvalArgs),
    /// Config-driven end-to-end runs.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Clean each input and split it into train/valid/test files.
    Prepare {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Keep every line (only whitespace is normalised).
        #[arg(long)]
        no_clean: bool,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
    },
    /// Concatenate corpora in the given order.
    Concat {
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Line, word and character counts.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum BpeCmd {
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write one line of space-separated ids per input line (EOS included).
    Encode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Inverse of `encode`.
    Decode {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum NgramCmd {
    Train {
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the evaluation report of an ARPA model on a text file.
    Score {
        #[arg(long)]
        arpa: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum NnCmd {
    Train(NnTrainArgs),
}

#[derive(Args, Debug)]
pub struct NnTrainArgs {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Architecture; may instead come from --config.
    #[arg(long)]
    arch: Option<String>,
    /// Experiment config whose [model] and [train] sections are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one model or train key, e.g. `--set hidden_dim=128`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    output: PathBuf,
    /// Training log (TSV); defaults to the checkpoint path with `.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Neural checkpoint.
    #[arg(long, conflicts_with_all = ["arpa", "compare"])]
    model: Option<PathBuf>,
    /// ARPA n-gram model.
    #[arg(long, conflicts_with = "compare")]
    arpa: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    block: usize,
    #[arg(long, default_value_t = 64)]
    stride: usize,
    /// Model label in the report (default: file stem).
    #[arg(long)]
    name: Option<String>,
    /// Print a comparison table of saved reports instead of evaluating.
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
    /// With --compare, print tab-separated values.
    #[arg(long)]
    tsv: bool,
}

#[derive(Subcommand, Debug)]
pub enum ExperimentCmd {
    /// Prepare, tokenize, train and evaluate; artifacts go to <runs-dir>/<name>/.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Parse and validate configs without running them.
    Check {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// List every config key with its meaning.
    Keys,
}

fn read_corpus(path: &Path) -> Result<RawCorpus> {
    RawCorpus::read(path)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_split(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("--split: cannot parse {p:?}"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("--split needs three ratios, got {text:?}"))),
    }
}

/// What a finished command wants reported beyond success.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Numeric failure that did not prevent writing results.
    pub aborted: Option<Error>,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Corpus(c) => corpus(c).map(|_| Outcome::default()),
        Command::Bpe(c) => bpe(c).map(|_| Outcome::default()),
        Command::Ngram(c) => ngram(c).map(|_| Outcome::default()),
        Command::Nn(NnCmd::Train(a)) => nn_train(a, cli.seed),
        Command::Eval(a) => eval(a).map(|_| Outcome::default()),
        Command::Experiment(c) => experiment(c, cli.seed),
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Prepare {
            inputs,
            out_dir,
            no_clean,
            split,
        } => {
            let ratios = parse_split(&split)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let rules = if no_clean { CleaningConfig::disabled() } else { CleaningConfig::default() };
            for input in inputs {
                let raw = read_corpus(&input)?;
                let cleaned = clean_text(&raw, &rules);
                let s = split_corpus(&cleaned, ratios)?;
                let tag = source_tag(&input);
                for (part, c) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                    let path = out_dir.join(format!("{tag}.{part}.txt"));
                    c.write(&path)?;
                    println!("{}\t{} lines", path.display(), c.len());
                }
                log::info!("{tag}: {} of {} lines kept", cleaned.len(), raw.len());
            }
        }
        CorpusCmd::Concat { output, inputs } => {
            let corpora = inputs.iter().map(|p| read_corpus(p)).collect::<Result<Vec<_>>>()?;
            let joined = concat_corpora(&corpora)?;
            joined.write(&output)?;
            println!("{}\t{} lines from {}", output.display(), joined.len(), joined.source_name);
        }
        CorpusCmd::Stats { inputs } => {
            println!("file\tlines\twords\tchars");
            for input in inputs {
                let s = corpus_stats(&read_corpus(&input)?);
                println!("{}\t{}\t{}\t{}", input.display(), s.line_count, s.word_count, s.char_count);
            }
        }
    }
    Ok(())
}

fn bpe(cmd: BpeCmd) -> Result<()> {
    match cmd {
        BpeCmd::Train {
            input,
            vocab_size,
            output,
        } => {
            let tok = train_bpe(&read_corpus(&input)?, vocab_size)?;
            tok.save(&output)?;
            println!("{}\t{} tokens, {} merges", output.display(), tok.vocab_size(), tok.merges().len());
        }
        BpeCmd::Encode {
            tokenizer,
            input,
            output,
        } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let mut out = String::new();
            for line in &read_corpus(&input)?.lines {
                let ids: Vec<String> = tok.encode_line(line).ids.iter().map(u32::to_string).collect();
                out.push_str(&ids.join(" "));
                out.push('\n');
            }
            write_out(output.as_deref(), &out)?;
        }
        BpeCmd::Decode {
            tokenizer,
            input,
            output,
        } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let mut ids: Vec<TokenId> = Vec::new();
            for (n, line) in text.lines().enumerate() {
                for t in line.split_whitespace() {
                    ids.push(t.parse().map_err(|_| Error::parse(n + 1, format!("not a token id: {t:?}")))?);
                }
            }
            write_out(output.as_deref(), &tok.decode(&ids)?)?;
        }
    }
    Ok(())
}

fn ngram(cmd: NgramCmd) -> Result<()> {
    match cmd {
        NgramCmd::Train {
            tokenizer,
            input,
            order,
            output,
        } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let counts = count_ngrams(&tok.encode_corpus(&read_corpus(&input)?), order, tok.tokens())?;
            let model = estimate_mkn(&counts)?;
            export_arpa(&model, &output)?;
            println!("{}\torder {}, {} parameters", output.display(), model.order(), model.param_count());
        }
        NgramCmd::Score { arpa, tokenizer, input } => {
            let model = import_arpa(&arpa)?;
            let tok = TokenizerModel::load(&tokenizer)?;
            let report = evaluate_ngram(&model, &tok, &read_corpus(&input)?, &source_tag(&arpa))?;
            print!("{}", report.to_json());
        }
    }
    Ok(())
}

fn nn_train(a: NnTrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let tok = TokenizerModel::load(&a.tokenizer)?;
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut train_pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = &a.config {
        let config = read_config(path)?;
        pairs.extend(config.section("model").iter().cloned());
        train_pairs.extend(config.section("train").iter().cloned());
    }
    if let Some(arch) = &a.arch {
        pairs.push(("arch".into(), arch.clone()));
    }
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let k = k.trim().trim_start_matches("model.").trim_start_matches("train.");
        if TrainConfig::KEYS.contains(&k) {
            train_pairs.push((k.into(), v.trim().into()));
        } else {
            pairs.push((k.into(), v.trim().into()));
        }
    }
    let arch_tag = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "arch")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::Config("model.arch is required (--arch or --config)".into()))?;
    let arch: Arch = arch_tag.parse()?;
    let mut lm = LmConfig::new(arch, tok.vocab_size());
    for (k, v) in &pairs {
        if k != "arch" {
            lm.set(k, v).map_err(|e| Error::Config(format!("model.{k}: {e}")))?;
        }
    }
    lm.vocab = tok.vocab_size();
    lm.validate()?;
    let mut tc = TrainConfig::for_arch(arch);
    for (k, v) in &train_pairs {
        tc.set(k, v).map_err(|e| Error::Config(format!("train.{k}: {e}")))?;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    tc.validate()?;

    let model = LanguageModel::new(lm, &mut RngStream::new(tc.seed))?;
    let train_ids = tok.encode_stream(&read_corpus(&a.train)?);
    let valid_ids = tok.encode_stream(&read_corpus(&a.valid)?);
    let outcome = train(model, &tc, &train_ids, &valid_ids)?;
    let log_path = a.log.unwrap_or_else(|| a.output.with_extension("log"));
    fs::write(&log_path, outcome.log.to_tsv()).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = LmCheckpoint {
        model: outcome.model,
        tokenizer_hash: tok.hash(),
    };
    ckpt.save(&a.output)?;
    println!(
        "{}\t{} steps, best validation loss {:.4} nats",
        a.output.display(),
        outcome.steps,
        outcome.log.best_valid().unwrap_or(f64::NAN)
    );
    Ok(Outcome {
        aborted: outcome.aborted,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    if !a.compare.is_empty() {
        let reports = a.compare.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
        let cmp = compare_report(&reports)?;
        print!("{}", if a.tsv { &cmp.tsv } else { &cmp.table });
        return Ok(());
    }
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone().ok_or_else(|| Error::Usage(format!("eval needs --{flag}")))
    };
    let tok = TokenizerModel::load(&need(&a.tokenizer, "tokenizer")?)?;
    let test = read_corpus(&need(&a.test, "test")?)?;
    let report = match (&a.model, &a.arpa) {
        (Some(ckpt), None) => {
            let name = a.name.clone().unwrap_or_else(|| source_tag(ckpt));
            evaluate_neural(&LmCheckpoint::load(ckpt)?, &tok, &test, a.block, a.stride, &name)?
        }
        (None, Some(arpa)) => {
            let name = a.name.clone().unwrap_or_else(|| source_tag(arpa));
            evaluate_ngram(&import_arpa(arpa)?, &tok, &test, &name)?
        }
        _ => return Err(Error::Usage("eval needs exactly one of --model or --arpa".into())),
    };
    match &a.report {
        Some(p) => report.save(p)?,
        None => print!("{}", report.to_json()),
    }
    println!("bpc {:.4}\tppl {:.2}\ttokens {}\tchars {}", report.bpc, report.perplexity, report.n_tokens, report.c_chars);
    Ok(())
}

fn experiment(cmd: ExperimentCmd, seed: Option<u64>) -> Result<Outcome> {
    match cmd {
        ExperimentCmd::Run { config, runs_dir } => {
            let out = run_experiment(&config, &RunOptions { runs_dir, seed })?;
            println!(
                "{}\tbpc {:.4} on {} (trained on {})",
                out.dir.display(),
                out.report.bpc,
                out.report.dataset,
                out.train_sources.join(", ")
            );
            Ok(Outcome { aborted: out.aborted })
        }
        ExperimentCmd::Check { configs } => {
            for c in configs {
                let (_, exp) = load_experiment(&c)?;
                println!("{}\tok ({}, {} file(s))", c.display(), exp.arch_tag(), exp.files.len());
            }
            Ok(Outcome::default())
        }
        ExperimentCmd::Keys => {
            for (s, k, d) in SCHEMA {
                println!("{s}.{k}\t{d}");
            }
            Ok(Outcome::default())
        }
    }
}
