//! Plain-text experiment configuration.
//!
//! ```text
//! # comment
//! [corpus]
//! files = data/sample-zu.txt
//! [model]
//! arch = transformer
//! ```
//!
//! Sections and keys are checked against [`SCHEMA`] while parsing, so a
//! typo is reported with its line number. A repeated key keeps its last
//! value and produces a warning. [`ExperimentConfig::emit`] writes a
//! canonical form that parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use salm_core::nn::{Arch, LmConfig};
use salm_core::train::TrainConfig;
use salm_core::{Error, Result};

pub const SECTIONS: [&str; 5] = ["corpus", "tokenizer", "model", "train", "eval"];

/// Every accepted `(section, key, description)`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("corpus", "name", "run name; artifacts go to <runs>/<name>/ (default: stem of the config file)"),
    ("corpus", "files", "comma-separated text files, one sentence per line; several files are trained on jointly"),
    ("corpus", "split", "train,valid,test line ratios of the sequential split applied to each file (default 0.8,0.1,0.1)"),
    ("corpus", "clean", "drop empty, HTML, script and duplicate lines before splitting (default true)"),
    ("tokenizer", "vocab_size", "BPE vocabulary size including <unk> and </s>"),
    ("model", "arch", "ngram | ffnn | lstm | awd-lstm | qrnn | transformer"),
    ("model", "order", "n-gram order, 1..=8 (ngram only)"),
    ("model", "emb_dim", "embedding width"),
    ("model", "hidden_dim", "hidden width (LSTM/QRNN units, FFNN layer size, Transformer model width)"),
    ("model", "n_layers", "number of hidden layers"),
    ("model", "context_order", "FFNN window: n of the n-gram, so n - 1 context tokens"),
    ("model", "n_heads", "attention heads (transformer)"),
    ("model", "dropout_input", "dropout on embeddings fed to the first layer"),
    ("model", "dropout_hidden", "dropout between layers"),
    ("model", "dropout_output", "dropout on the last layer's output"),
    ("model", "dropout_embedding", "whole-word embedding dropout (awd-lstm, qrnn)"),
    ("model", "dropout_weight", "DropConnect rate on hidden-to-hidden weights (awd-lstm)"),
    ("model", "dropout_attention", "dropout on attention probabilities (transformer)"),
    ("model", "tie_weights", "share the embedding with the output projection"),
    ("model", "ar_alpha", "activation regularisation weight (awd-lstm, qrnn)"),
    ("model", "tar_beta", "temporal activation regularisation weight (awd-lstm, qrnn)"),
    ("model", "bptt_len", "truncated BPTT length (recurrent models)"),
    ("model", "block_size", "context block and maximum sequence length (transformer)"),
    ("model", "stride_train", "training window stride (transformer)"),
    ("model", "stride_eval", "evaluation window stride (transformer)"),
    ("train", "optimizer", "sgd | adamw"),
    ("train", "lr", "initial learning rate"),
    ("train", "weight_decay", "decoupled weight decay (adamw)"),
    ("train", "clip", "global gradient-norm bound; 0 disables clipping"),
    ("train", "batch_size", "sequences per batch"),
    ("train", "max_steps", "optimizer steps; 0 means unbounded"),
    ("train", "max_epochs", "passes over the training data; 0 means unbounded"),
    ("train", "eval_every", "steps between validations; 0 validates once per epoch"),
    ("train", "patience", "stop after this many validations without improvement; 0 disables"),
    ("train", "schedule", "constant | plateau (x0.25 when validation stalls) | linear (decay to 0)"),
    ("train", "variable_bptt", "sample BPTT lengths around bptt_len"),
    ("train", "chunk_len", "FFNN training chunk length"),
    ("train", "valid_tokens", "cap on validation tokens; 0 uses all"),
    ("train", "seed", "seed for initialisation, dropout, shuffling and BPTT sampling"),
    ("eval", "source", "which input file's test split to evaluate on (file stem; default: the first file)"),
    ("eval", "block", "evaluation block size for transformers (default: model block_size)"),
    ("eval", "stride", "evaluation stride for transformers (default: model stride_eval)"),
];

pub fn describe(section: &str, key: &str) -> Option<&'static str> {
    SCHEMA.iter().find(|(s, k, _)| *s == section && *k == key).map(|(_, _, d)| *d)
}

/// Sections of `key = value` pairs in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExperimentConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

/// Parse result with any non-fatal findings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
}

pub fn parse_config(text: &str) -> Result<Parsed> {
    let mut config = ExperimentConfig::default();
    let mut warnings = Vec::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(line_no, format!("unterminated section header {line:?}")))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::parse(
                    line_no,
                    format!("unknown section [{name}]; expected one of {}", SECTIONS.join(", ")),
                ));
            }
            current = Some(name.to_string());
            config.section_mut(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(line_no, format!("expected key = value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(section) = current.as_deref() else {
            return Err(Error::parse(line_no, format!("key {key:?} appears before any [section]")));
        };
        if key.is_empty() {
            return Err(Error::parse(line_no, "empty key".to_string()));
        }
        if describe(section, key).is_none() {
            return Err(Error::parse(line_no, format!("unknown key {section}.{key}")));
        }
        if config.get(section, key).is_some() {
            warnings.push(format!("line {line_no}: duplicate key {section}.{key}, keeping the last value"));
        }
        config.set(section, key, value);
    }
    Ok(Parsed { config, warnings })
}

impl ExperimentConfig {
    fn section_mut(&mut self, name: &str) -> &mut Vec<(String, String)> {
        let pos = match self.sections.iter().position(|(n, _)| n == name) {
            Some(p) => p,
            None => {
                self.sections.push((name.to_string(), Vec::new()));
                self.sections.len() - 1
            }
        };
        &mut self.sections[pos].1
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, kv)| kv.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    /// Replaces an existing value in place or appends the key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        let kv = self.section_mut(section);
        match kv.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => kv.push((key.to_string(), value.to_string())),
        }
    }

    pub fn section(&self, name: &str) -> &[(String, String)] {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, kv)| kv.as_slice())
            .unwrap_or(&[])
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &[(String, String)])> {
        self.sections.iter().map(|(n, kv)| (n.as_str(), kv.as_slice()))
    }

    /// Canonical text: sections in first-appearance order, one `key = value`
    /// per line, a blank line between sections.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (i, (name, kv)) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

/// What the model section selects.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Ngram { order: usize },
    /// Vocabulary is filled in once the tokenizer exists.
    Neural(LmConfig),
}

/// A configuration checked against the schema and resolved to typed values.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    pub files: Vec<PathBuf>,
    pub split: (f64, f64, f64),
    pub clean: bool,
    pub vocab_size: usize,
    pub model: ModelSpec,
    pub train: Option<TrainConfig>,
    /// Index into `files` of the evaluated corpus.
    pub eval_source: usize,
    pub eval_block: Option<usize>,
    pub eval_stride: Option<usize>,
}

/// Prefixes configuration errors with where they came from.
fn keyed<T>(place: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{place}: {m}")),
        other => other,
    })
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse {value:?}")))
}

/// Stem of a corpus file, used as its source tag.
pub fn source_tag(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

impl Experiment {
    /// Resolves `config`; relative paths are taken relative to `base`.
    /// `default_name` is used when `corpus.name` is absent.
    pub fn resolve(config: &ExperimentConfig, base: &Path, default_name: &str) -> Result<Self> {
        let req = |section: &str, key: &str| {
            config
                .get(section, key)
                .ok_or_else(|| Error::Config(format!("{section}.{key} is required ({})", describe(section, key).unwrap_or(""))))
        };

        let files: Vec<PathBuf> = req("corpus", "files")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| base.join(s))
            .collect();
        if files.is_empty() {
            return Err(Error::Config("corpus.files lists no files".into()));
        }
        let split = match config.get("corpus", "split") {
            None => (0.8, 0.1, 0.1),
            Some(v) => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_num("corpus", "split", p.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::Config(format!("corpus.split needs three ratios, got {v:?}")));
                }
                (parts[0], parts[1], parts[2])
            }
        };
        let clean = match config.get("corpus", "clean") {
            None => true,
            Some(v) => parse_num("corpus", "clean", v)?,
        };
        let name = config.get("corpus", "name").unwrap_or(default_name).to_string();
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("corpus.name {name:?} is not a valid directory name")));
        }

        let vocab_size: usize = parse_num("tokenizer", "vocab_size", req("tokenizer", "vocab_size")?)?;

        let arch_tag = req("model", "arch")?;
        let model_keys = config.section("model");
        let (model, train) = if arch_tag == "ngram" {
            if let Some((k, _)) = model_keys.iter().find(|(k, _)| k != "arch" && k != "order") {
                return Err(Error::Config(format!("model.{k} does not apply to arch=ngram")));
            }
            if let Some((k, _)) = config.section("train").first() {
                return Err(Error::Config(format!("train.{k} does not apply to arch=ngram")));
            }
            let order: usize = parse_num("model", "order", req("model", "order")?)?;
            if !(1..=salm_core::ngram::MAX_ORDER).contains(&order) {
                return Err(Error::Config(format!(
                    "model.order={order} outside 1..={}",
                    salm_core::ngram::MAX_ORDER
                )));
            }
            (ModelSpec::Ngram { order }, None)
        } else {
            let arch: Arch = keyed("model.arch", arch_tag.parse())?;
            let mut lm = LmConfig::new(arch, vocab_size);
            for (k, v) in model_keys {
                match k.as_str() {
                    "arch" => {}
                    "order" => return Err(Error::Config(format!("model.order does not apply to arch={arch}; use context_order"))),
                    _ => keyed(&format!("model.{k}"), lm.set(k, v))?,
                }
            }
            keyed("[model]", lm.validate())?;
            let mut tc = TrainConfig::for_arch(arch);
            for (k, v) in config.section("train") {
                keyed(&format!("train.{k}"), tc.set(k, v))?;
            }
            keyed("[train]", tc.validate())?;
            (ModelSpec::Neural(lm), Some(tc))
        };

        let eval_source = match config.get("eval", "source") {
            None => 0,
            Some(tag) => files.iter().position(|f| source_tag(f) == tag).ok_or_else(|| {
                let known: Vec<String> = files.iter().map(|f| source_tag(f)).collect();
                Error::Config(format!("eval.source {tag:?} is not one of {}", known.join(", ")))
            })?,
        };
        let opt = |key: &str| -> Result<Option<usize>> {
            config.get("eval", key).map(|v| parse_num("eval", key, v)).transpose()
        };
        let (eval_block, eval_stride) = (opt("block")?, opt("stride")?);
        if let (Some(b), Some(s)) = (eval_block, eval_stride) {
            if s == 0 || s > b {
                return Err(Error::Config(format!("eval.stride={s} must lie in 1..=eval.block ({b})")));
            }
        }
        if matches!(model, ModelSpec::Ngram { .. }) && (eval_block.is_some() || eval_stride.is_some()) {
            return Err(Error::Config("eval.block and eval.stride do not apply to arch=ngram".into()));
        }

        Ok(Experiment {
            name,
            files,
            split,
            clean,
            vocab_size,
            model,
            train,
            eval_source,
            eval_block,
            eval_stride,
        })
    }

    pub fn arch_tag(&self) -> &'static str {
        match &self.model {
            ModelSpec::Ngram { .. } => "ngram",
            ModelSpec::Neural(c) => c.arch.tag(),
        }
    }
}

/// Reads and parses a config file, logging warnings. An unreadable or
/// malformed file is a configuration error.
pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let parsed = parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for w in &parsed.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(parsed.config)
}

/// Reads, parses and resolves a config file.
pub fn load_experiment(path: &Path) -> Result<(ExperimentConfig, Experiment)> {
    let config = read_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let stem = source_tag(path);
    let exp = Experiment::resolve(&config, base, &stem)?;
    Ok((config, exp))
}
