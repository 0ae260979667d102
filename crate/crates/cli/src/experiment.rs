//! End-to-end runs: prepare, tokenize, train, evaluate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use salm_core::bpe::{train_bpe, TokenizerModel};
use salm_core::corpus::{clean_text, concat_corpora, split_corpus, CleaningConfig, CorpusSplit, RawCorpus};
use salm_core::eval::{evaluate_neural, evaluate_ngram, EvalReport};
use salm_core::ngram::{count_ngrams, estimate_mkn, export_arpa, NGramModel};
use salm_core::nn::{LanguageModel, LmCheckpoint};
use salm_core::rng::RngStream;
use salm_core::train::train;
use salm_core::{Error, Result};

use crate::config::{load_experiment, source_tag, Experiment, ExperimentConfig, ModelSpec};

pub const CONFIG_FILE: &str = "config.conf";
pub const TOKENIZER_FILE: &str = "tokenizer.bpe";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ARPA_FILE: &str = "model.arpa";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parent of the run directory.
    pub runs_dir: PathBuf,
    /// Overrides `train.seed`.
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: EvalReport,
    /// Tags of the corpora the model was trained on.
    pub train_sources: Vec<String>,
    /// Set when training stopped early on a numeric failure; the artifacts
    /// then hold the best model seen before it.
    pub aborted: Option<Error>,
}

/// Cleaned, split corpora of an experiment.
pub struct PreparedData {
    pub splits: Vec<CorpusSplit>,
    pub train: RawCorpus,
    pub valid: RawCorpus,
    pub test: RawCorpus,
}

pub fn prepare_data(exp: &Experiment) -> Result<PreparedData> {
    let mut splits = Vec::with_capacity(exp.files.len());
    for path in &exp.files {
        if !path.is_file() {
            return Err(Error::Config(format!("corpus.files: {} does not exist", path.display())));
        }
        let mut raw = RawCorpus::read(path)?;
        raw.source_name = source_tag(path);
        if exp.clean {
            let before = raw.len();
            raw = clean_text(&raw, &CleaningConfig::default());
            log::info!("{}: kept {} of {before} lines after cleaning", raw.source_name, raw.len());
        }
        splits.push(split_corpus(&raw, exp.split)?);
    }
    let tags: Vec<String> = exp.files.iter().map(|f| source_tag(f)).collect();
    let joined = |part: fn(&CorpusSplit) -> &RawCorpus, label: &str| -> Result<RawCorpus> {
        let mut c = concat_corpora(&splits.iter().map(|s| part(s).clone()).collect::<Vec<_>>())?;
        c.source_name = format!("{}.{label}", tags.join("+"));
        Ok(c)
    };
    let train = joined(|s| &s.train, "train")?;
    let valid = joined(|s| &s.valid, "valid")?;
    let test = splits[exp.eval_source].test.clone();
    Ok(PreparedData {
        splits,
        train,
        valid,
        test,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ngram_log(model: &NGramModel) -> String {
    let mut out = String::from("order\tentries\tD1\tD2\tD3\n");
    for k in 1..=model.order() {
        let d = model.discounts().get(k - 1).copied().unwrap_or([0.0; 3]);
        let _ = writeln!(out, "{k}\t{}\t{:.6}\t{:.6}\t{:.6}", model.probs(k).len(), d[0], d[1], d[2]);
    }
    out
}

/// Runs the experiment described by the config file at `config_path`.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<RunOutput> {
    let (mut config, exp) = load_experiment(config_path)?;
    run_resolved(&mut config, exp, opts)
}

/// Runs an already resolved experiment; `config` is written to the run
/// directory with any seed override applied.
pub fn run_resolved(config: &mut ExperimentConfig, mut exp: Experiment, opts: &RunOptions) -> Result<RunOutput> {
    if let (Some(seed), Some(tc)) = (opts.seed, exp.train.as_mut()) {
        tc.seed = seed;
        config.set("train", "seed", &seed.to_string());
    }
    let data = prepare_data(&exp)?;
    let dir = opts.runs_dir.join(&exp.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(CONFIG_FILE), config.emit())?;

    log::info!("training tokenizer (vocab {}) on {}", exp.vocab_size, data.train.source_name);
    let tokenizer = train_bpe(&data.train, exp.vocab_size)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("tokenizer.vocab_size: {m}")),
            other => other,
        })?;
    tokenizer.save(&dir.join(TOKENIZER_FILE))?;

    let train_sources: Vec<String> = exp.files.iter().map(|f| source_tag(f)).collect();
    let model_name = format!("{}@{}", exp.arch_tag(), train_sources.join("+"));
    let mut aborted = None;
    let report = match &exp.model {
        ModelSpec::Ngram { order } => {
            let counts = count_ngrams(&tokenizer.encode_corpus(&data.train), *order, tokenizer.tokens())?;
            let model = estimate_mkn(&counts)?;
            export_arpa(&model, &dir.join(ARPA_FILE))?;
            write(&dir.join(TRAIN_LOG_FILE), ngram_log(&model))?;
            evaluate_ngram(&model, &tokenizer, &data.test, &model_name)?
        }
        ModelSpec::Neural(lm) => {
            let tc = exp.train.as_ref().expect("neural experiments carry a train config");
            let mut lm = lm.clone();
            lm.vocab = tokenizer.vocab_size();
            let (block, stride) = (exp.eval_block.unwrap_or(lm.block_size), exp.eval_stride.unwrap_or(lm.stride_eval));
            let model = LanguageModel::new(lm, &mut RngStream::new(tc.seed))?;
            log::info!("{} with {} parameters", model_name, model.count_params());
            let (train_ids, valid_ids) = (tokenizer.encode_stream(&data.train), tokenizer.encode_stream(&data.valid));
            let outcome = train(model, tc, &train_ids, &valid_ids)?;
            write(&dir.join(TRAIN_LOG_FILE), outcome.log.to_tsv())?;
            let ckpt = LmCheckpoint {
                model: outcome.model,
                tokenizer_hash: tokenizer.hash(),
            };
            ckpt.save(&dir.join(CHECKPOINT_FILE))?;
            aborted = outcome.aborted;
            evaluate_neural(&ckpt, &tokenizer, &data.test, block, stride, &model_name)?
        }
    };
    report.save(&dir.join(REPORT_FILE))?;
    Ok(RunOutput {
        dir,
        report,
        train_sources,
        aborted,
    })
}

/// Loads the tokenizer a run wrote.
pub fn run_tokenizer(dir: &Path) -> Result<TokenizerModel> {
    TokenizerModel::load(&dir.join(TOKENIZER_FILE))
}
