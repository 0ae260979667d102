//! Neural language models: a feed-forward n-gram network, LSTMs (plain and
//! with AWD regularisation), a QRNN and a decoder-only Transformer.
//!
//! All models share one calling convention. Inputs are `[batch, len]` token
//! ids in batch-major order; [`LanguageModel::forward`] records the
//! computation on a [`Graph`] and returns logits with one row per input
//! position (row `b * len + t`), an optional regularisation penalty, and the
//! state to carry into the next segment.

mod ffnn;
mod lstm;
mod qrnn;
mod regularize;
mod transformer;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::bpe::{TokenId, EOS_ID};
use crate::rng::RngStream;
use crate::tensor::{Graph, RecordFile, Tensor, Var};
use crate::{Error, Result};

pub use ffnn::ffnn_contexts;
pub use regularize::{ar_penalty, sample_bptt_len, tar_penalty};

/// Token used as sequence start and as left padding. The tokenizer has no
/// separate start symbol, so the end-of-line token doubles as one.
pub const START_ID: TokenId = EOS_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Ffnn,
    Lstm,
    AwdLstm,
    Qrnn,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Ffnn, Arch::Lstm, Arch::AwdLstm, Arch::Qrnn, Arch::Transformer];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Ffnn => "ffnn",
            Arch::Lstm => "lstm",
            Arch::AwdLstm => "awd-lstm",
            Arch::Qrnn => "qrnn",
            Arch::Transformer => "transformer",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Lstm | Arch::AwdLstm | Arch::Qrnn)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?} (expected ffnn|lstm|awd-lstm|qrnn|transformer)")))
    }
}

/// Dropout probabilities (of dropping, not keeping).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dropout {
    /// Layer input (embedding output).
    pub input: f64,
    /// Between stacked layers and on Transformer sub-layer outputs.
    pub hidden: f64,
    /// Final layer output, before the projection.
    pub output: f64,
    /// Whole embedding rows, per word type.
    pub embedding: f64,
    /// DropConnect on recurrent weight matrices.
    pub weight: f64,
    /// Attention probabilities.
    pub attention: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub arch: Arch,
    pub vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    /// n of the FFNN's n-gram window (context is n - 1 tokens).
    pub context_order: usize,
    pub n_heads: usize,
    pub dropout: Dropout,
    pub tie_weights: bool,
    pub ar_alpha: f64,
    pub tar_beta: f64,
    pub bptt_len: usize,
    pub block_size: usize,
    pub stride_train: usize,
    pub stride_eval: usize,
}

impl LmConfig {
    /// Small defaults for the given architecture.
    pub fn new(arch: Arch, vocab: usize) -> Self {
        let mut c = LmConfig {
            arch,
            vocab,
            emb_dim: 64,
            hidden_dim: 64,
            n_layers: 2,
            context_order: 4,
            n_heads: 4,
            dropout: Dropout::default(),
            tie_weights: true,
            ar_alpha: 0.0,
            tar_beta: 0.0,
            bptt_len: 70,
            block_size: 128,
            stride_train: 16,
            stride_eval: 64,
        };
        if arch == Arch::AwdLstm {
            c.dropout = Dropout {
                input: 0.4,
                hidden: 0.25,
                output: 0.4,
                embedding: 0.1,
                weight: 0.5,
                attention: 0.0,
            };
            c.ar_alpha = 2.0;
            c.tar_beta = 1.0;
        }
        c
    }

    /// Width of the representation fed to the output projection.
    pub fn top_width(&self) -> usize {
        match self.arch {
            Arch::Transformer => self.hidden_dim,
            _ if self.tie_weights => self.emb_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("vocab", self.vocab),
            ("emb_dim", self.emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return cfg(format!("{name} must be positive"));
            }
        }
        let d = &self.dropout;
        for (name, r) in [
            ("dropout_input", d.input),
            ("dropout_hidden", d.hidden),
            ("dropout_output", d.output),
            ("dropout_embedding", d.embedding),
            ("dropout_weight", d.weight),
            ("dropout_attention", d.attention),
        ] {
            if !(0.0..1.0).contains(&r) {
                return cfg(format!("{name}={r} must lie in [0, 1)"));
            }
        }
        if self.ar_alpha < 0.0 || self.tar_beta < 0.0 {
            return cfg("ar_alpha and tar_beta must be non-negative".into());
        }
        match self.arch {
            Arch::Ffnn if self.context_order < 2 => return cfg("context_order must be at least 2".into()),
            Arch::Transformer => {
                if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
                    return cfg(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
                }
                if self.emb_dim != self.hidden_dim {
                    return cfg(format!(
                        "transformer needs emb_dim ({}) equal to hidden_dim ({})",
                        self.emb_dim, self.hidden_dim
                    ));
                }
                if self.block_size == 0 {
                    return cfg("block_size must be positive".into());
                }
                for (name, s) in [("stride_train", self.stride_train), ("stride_eval", self.stride_eval)] {
                    if s == 0 || s > self.block_size {
                        return cfg(format!("{name}={s} must lie in 1..=block_size"));
                    }
                }
            }
            Arch::Lstm | Arch::AwdLstm | Arch::Qrnn if self.bptt_len == 0 => {
                return cfg("bptt_len must be positive".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// `key=value` pairs; [`LmConfig::from_pairs`] inverts this.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let d = &self.dropout;
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("arch", self.arch.tag().into()),
            kv("vocab", self.vocab.to_string()),
            kv("emb_dim", self.emb_dim.to_string()),
            kv("hidden_dim", self.hidden_dim.to_string()),
            kv("n_layers", self.n_layers.to_string()),
            kv("context_order", self.context_order.to_string()),
            kv("n_heads", self.n_heads.to_string()),
            kv("dropout_input", d.input.to_string()),
            kv("dropout_hidden", d.hidden.to_string()),
            kv("dropout_output", d.output.to_string()),
            kv("dropout_embedding", d.embedding.to_string()),
            kv("dropout_weight", d.weight.to_string()),
            kv("dropout_attention", d.attention.to_string()),
            kv("tie_weights", self.tie_weights.to_string()),
            kv("ar_alpha", self.ar_alpha.to_string()),
            kv("tar_beta", self.tar_beta.to_string()),
            kv("bptt_len", self.bptt_len.to_string()),
            kv("block_size", self.block_size.to_string()),
            kv("stride_train", self.stride_train.to_string()),
            kv("stride_eval", self.stride_eval.to_string()),
        ]
    }

    /// Names accepted by [`LmConfig::set`].
    pub const KEYS: [&'static str; 20] = [
        "arch",
        "vocab",
        "emb_dim",
        "hidden_dim",
        "n_layers",
        "context_order",
        "n_heads",
        "dropout_input",
        "dropout_hidden",
        "dropout_output",
        "dropout_embedding",
        "dropout_weight",
        "dropout_attention",
        "tie_weights",
        "ar_alpha",
        "tar_beta",
        "bptt_len",
        "block_size",
        "stride_train",
        "stride_eval",
    ];

    /// Sets one field from its textual value. `arch` is not settable here
    /// since it selects the defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "arch" => {
                let arch: Arch = value.parse()?;
                if arch != self.arch {
                    return Err(Error::Config(format!("arch: {arch} does not match {}", self.arch)));
                }
            }
            "vocab" => self.vocab = num(key, value)?,
            "emb_dim" => self.emb_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "context_order" => self.context_order = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "dropout_input" => self.dropout.input = num(key, value)?,
            "dropout_hidden" => self.dropout.hidden = num(key, value)?,
            "dropout_output" => self.dropout.output = num(key, value)?,
            "dropout_embedding" => self.dropout.embedding = num(key, value)?,
            "dropout_weight" => self.dropout.weight = num(key, value)?,
            "dropout_attention" => self.dropout.attention = num(key, value)?,
            "tie_weights" => self.tie_weights = num(key, value)?,
            "ar_alpha" => self.ar_alpha = num(key, value)?,
            "tar_beta" => self.tar_beta = num(key, value)?,
            "bptt_len" => self.bptt_len = num(key, value)?,
            "block_size" => self.block_size = num(key, value)?,
            "stride_train" => self.stride_train = num(key, value)?,
            "stride_eval" => self.stride_eval = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        let arch = pairs
            .iter()
            .find(|(k, _)| *k == "arch")
            .ok_or_else(|| Error::Config("missing arch".into()))?
            .1
            .parse()?;
        let mut c = LmConfig::new(arch, 1);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.index.remove(name)?;
        let (_, t) = self.entries.remove(i);
        for (j, (n, _)) in self.entries.iter().enumerate().skip(i) {
            self.index.insert(n.clone(), j);
        }
        Some(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameter tensors in store order, for optimizers.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Recurrent state carried between segments. Tensors are `[batch, width]`.
#[derive(Clone, Debug, PartialEq)]
pub enum State {
    /// Fresh start.
    Empty,
    Lstm { h: Vec<Tensor>, c: Vec<Tensor> },
    Qrnn { c: Vec<Tensor>, prev: Vec<Tensor> },
    /// Trailing tokens of each row, for the FFNN window.
    History(Vec<Vec<TokenId>>),
}

pub enum Mode<'a> {
    Eval,
    /// Dropout and penalties enabled, masks drawn from the stream.
    Train(&'a mut RngStream),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Graph handles of every parameter, aligned with the store.
pub struct Bound {
    vars: Vec<Var>,
    names: HashMap<String, Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("parameter {name:?} missing")))
    }
}

pub struct Forward {
    /// `[batch * len, vocab]`, row `b * len + t`.
    pub logits: Var,
    /// Weighted AR/TAR terms when training with non-zero coefficients.
    pub penalty: Option<Var>,
    pub state: State,
    /// Dropout masks drawn for this call, by name.
    pub masks: Vec<(String, Tensor)>,
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
}

impl LanguageModel {
    /// Builds and initialises a model from `rng`.
    pub fn new(config: LmConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let v = config.vocab;
        let e = config.emb_dim;
        match config.arch {
            Arch::Transformer => params.insert("embed", Tensor::normal(&[v, e], 0.02, rng)),
            _ => params.insert("embed", Tensor::uniform(&[v, e], 0.1, rng)),
        }
        match config.arch {
            Arch::Ffnn => ffnn::init(&config, &mut params, rng),
            Arch::Lstm | Arch::AwdLstm => lstm::init(&config, &mut params, rng),
            Arch::Qrnn => qrnn::init(&config, &mut params, rng),
            Arch::Transformer => transformer::init(&config, &mut params, rng),
        }
        if !config.tie_weights {
            let w = config.top_width();
            let bound = 1.0 / (w as f64).sqrt();
            params.insert("out.weight", Tensor::uniform(&[v, w], bound, rng));
        }
        if config.arch != Arch::Transformer {
            params.insert("out.bias", Tensor::zeros(&[v]));
        }
        Ok(LanguageModel { config, params })
    }

    /// Parameter names and shapes the architecture requires.
    pub fn expected_shapes(config: &LmConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let m = LanguageModel::new(config.clone(), &mut RngStream::new(0))?;
        Ok(m.params.entries().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect())
    }

    /// Number of stored parameters; a tied embedding is counted once.
    pub fn count_params(&self) -> usize {
        self.params.element_count()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut names = HashMap::new();
        for (n, t) in self.params.entries() {
            let v = g.param(t.clone());
            vars.push(v);
            names.insert(n.clone(), v);
        }
        Bound { vars, names }
    }

    /// Runs the model on `inputs` (`[batch, len]`, batch-major).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        inputs: &[TokenId],
        batch: usize,
        state: &State,
        mode: &mut Mode,
    ) -> Result<Forward> {
        if batch == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(batch) {
            return Err(Error::shape("forward", &[inputs.len()], &[batch]));
        }
        if let Some(&bad) = inputs.iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(Error::Index(format!("token id {bad} out of range for vocabulary {}", self.config.vocab)));
        }
        let len = inputs.len() / batch;
        match self.config.arch {
            Arch::Ffnn => ffnn::forward(self, g, p, inputs, batch, len, state, mode),
            Arch::Lstm | Arch::AwdLstm => lstm::forward(self, g, p, inputs, batch, len, state, mode),
            Arch::Qrnn => qrnn::forward(self, g, p, inputs, batch, len, state, mode),
            Arch::Transformer => transformer::forward(self, g, p, inputs, batch, len, mode),
        }
    }

    /// Feed-forward scoring of explicit contexts: `contexts` is
    /// `[batch, context_order - 1]`; returns `[batch, vocab]` logits.
    pub fn ffnn_forward(&self, g: &mut Graph, p: &Bound, contexts: &[TokenId], batch: usize, mode: &mut Mode) -> Result<Var> {
        if self.config.arch != Arch::Ffnn {
            return Err(Error::Usage(format!("ffnn_forward on a {} model", self.config.arch)));
        }
        ffnn::forward_contexts(self, g, p, contexts, batch, mode, &mut Vec::new())
    }

    /// Output projection shared by all architectures.
    fn project(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        let w = if self.config.tie_weights { p.get("embed")? } else { p.get("out.weight")? };
        let logits = g.matmul_nt(h, w)?;
        match self.params.get("out.bias") {
            Some(_) => g.add_row(logits, p.get("out.bias")?),
            None => Ok(logits),
        }
    }

    /// Replaces a separate output matrix by the input embedding.
    pub fn tie_weights(&mut self) -> Result<()> {
        if self.config.tie_weights {
            return Ok(());
        }
        let width = self.config.top_width();
        if width != self.config.emb_dim {
            return Err(Error::Config(format!(
                "cannot tie: projection input width {width} differs from emb_dim {}",
                self.config.emb_dim
            )));
        }
        self.params.remove("out.weight");
        self.config.tie_weights = true;
        Ok(())
    }

    /// Checks that every expected parameter is present with its shape.
    pub fn check_params(&self) -> Result<()> {
        let want = LanguageModel::expected_shapes(&self.config)?;
        if want.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.params.len()
            )));
        }
        for (name, shape) in want {
            match self.params.get(&name) {
                None => return Err(Error::Integrity(format!("parameter {name:?} missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Integrity(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// A saved model plus the hash of the tokenizer it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct LmCheckpoint {
    pub model: LanguageModel,
    pub tokenizer_hash: String,
}

impl LmCheckpoint {
    pub fn to_records(&self) -> RecordFile {
        let mut meta = self.model.config.to_pairs();
        meta.push(("tokenizer_hash".into(), self.tokenizer_hash.clone()));
        RecordFile {
            meta,
            records: self.model.params.entries().to_vec(),
        }
    }

    pub fn from_records(file: RecordFile) -> Result<Self> {
        let tokenizer_hash = file.require("tokenizer_hash")?.to_string();
        let config = LmConfig::from_pairs(
            file.meta
                .iter()
                .filter(|(k, _)| k != "tokenizer_hash")
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )
        .map_err(|e| Error::Integrity(format!("checkpoint configuration: {e}")))?;
        let mut params = ParamStore::new();
        for (n, t) in file.records {
            params.insert(n, t);
        }
        let model = LanguageModel { config, params };
        model.check_params()?;
        Ok(LmCheckpoint { model, tokenizer_hash })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_records().to_bytes(crate::tensor::Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        LmCheckpoint::from_records(crate::tensor::read_records(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_records().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        LmCheckpoint::from_records(RecordFile::load(path)?)
    }
}

/// Converts a time-major sequence of rows (`t * batch + b`) to batch-major.
fn time_to_batch_major(g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
    if batch == 1 {
        return Ok(x);
    }
    let idx: Vec<Option<usize>> = (0..batch * len).map(|r| Some((r % len) * batch + r / len)).collect();
    g.gather_rows(x, &idx)
}

/// Batch-major ids to time-major order.
fn ids_time_major(inputs: &[TokenId], batch: usize, len: usize) -> Vec<TokenId> {
    (0..batch * len).map(|r| inputs[(r % batch) * len + r / batch]).collect()
}

/// Multiplies `x` by a dropout mask, if `rate` is non-zero in training mode.
fn dropout(
    g: &mut Graph,
    x: Var,
    rate: f64,
    mode: &mut Mode,
    name: &str,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let m = crate::tensor::bernoulli_mask(rng, g.value(x).shape(), 1.0 - rate)?;
    masks.push((name.to_string(), m.clone()));
    let mv = g.constant(m);
    g.mul(x, mv)
}
