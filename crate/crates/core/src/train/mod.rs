//! Training loops for the neural models.
//!
//! Each architecture gets its own batch source: BPTT batches with carried
//! state for recurrent models, shuffled fixed-length windows for the
//! Transformer and shuffled token chunks for the FFNN. Validation loss is
//! measured with the same scorer as evaluation, the best model by that
//! loss is returned, and every random choice comes from the configured seed.

mod batch;
mod schedule;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::bpe::TokenId;
use crate::eval::neural_log2probs;
use crate::nn::{Arch, LanguageModel, Mode, State, START_ID};
use crate::rng::RngStream;
use crate::tensor::{clip_grad_norm, AdamW, Graph, Sgd, Tensor};
use crate::{Error, Result};

pub use batch::{make_windows, shifted_inputs, BpttBatch, BpttBatcher, Window, WindowMode};
pub use schedule::{early_stop, linear_decay, PlateauDecay, IMPROVEMENT_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("optimizer: unknown value {s:?} (expected sgd|adamw)"))),
        }
    }
}

impl OptimizerKind {
    fn tag(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Quarter the rate when validation loss stops improving.
    Plateau,
    /// Linear decay to zero at `max_steps`.
    Linear,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "plateau" => Ok(Schedule::Plateau),
            "linear" => Ok(Schedule::Linear),
            _ => Err(Error::Config(format!("schedule: unknown value {s:?} (expected constant|plateau|linear)"))),
        }
    }
}

impl Schedule {
    fn tag(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Plateau => "plateau",
            Schedule::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub batch_size: usize,
    /// Upper bound on optimizer steps; 0 means no bound.
    pub max_steps: usize,
    /// Upper bound on passes over the data; 0 means no bound.
    pub max_epochs: usize,
    /// Steps between validations; 0 validates once per epoch.
    pub eval_every: usize,
    /// Early-stopping patience in validations; 0 disables it.
    pub patience: usize,
    pub schedule: Schedule,
    pub variable_bptt: bool,
    /// FFNN chunk length.
    pub chunk_len: usize,
    /// Cap on validation tokens; 0 uses all.
    pub valid_tokens: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_arch(arch: Arch) -> Self {
        let mut c = TrainConfig {
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.01,
            clip: 1.0,
            batch_size: 32,
            max_steps: 1000,
            max_epochs: 0,
            eval_every: 200,
            patience: 4,
            schedule: Schedule::Constant,
            variable_bptt: false,
            chunk_len: 64,
            valid_tokens: 0,
            seed: 1,
        };
        match arch {
            Arch::Ffnn => {
                c.schedule = Schedule::Plateau;
                c.eval_every = 0;
                c.max_steps = 0;
                c.max_epochs = 10;
            }
            Arch::Lstm | Arch::AwdLstm | Arch::Qrnn => {
                c.optimizer = OptimizerKind::Sgd;
                c.lr = 20.0;
                c.weight_decay = 0.0;
                c.clip = 0.25;
                c.batch_size = 20;
                c.variable_bptt = arch == Arch::AwdLstm;
            }
            Arch::Transformer => {
                c.schedule = Schedule::Linear;
                c.batch_size = 8;
            }
        }
        c
    }

    pub const KEYS: [&'static str; 14] = [
        "optimizer",
        "lr",
        "weight_decay",
        "clip",
        "batch_size",
        "max_steps",
        "max_epochs",
        "eval_every",
        "patience",
        "schedule",
        "variable_bptt",
        "chunk_len",
        "valid_tokens",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "optimizer" => self.optimizer = value.trim().parse()?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip" => self.clip = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "schedule" => self.schedule = value.trim().parse()?,
            "variable_bptt" => self.variable_bptt = num(key, value)?,
            "chunk_len" => self.chunk_len = num(key, value)?,
            "valid_tokens" => self.valid_tokens = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("optimizer", self.optimizer.tag().into()),
            kv("lr", self.lr.to_string()),
            kv("weight_decay", self.weight_decay.to_string()),
            kv("clip", self.clip.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("max_steps", self.max_steps.to_string()),
            kv("max_epochs", self.max_epochs.to_string()),
            kv("eval_every", self.eval_every.to_string()),
            kv("patience", self.patience.to_string()),
            kv("schedule", self.schedule.tag().into()),
            kv("variable_bptt", self.variable_bptt.to_string()),
            kv("chunk_len", self.chunk_len.to_string()),
            kv("valid_tokens", self.valid_tokens.to_string()),
            kv("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 || self.clip < 0.0 {
            return Err(Error::Config("weight_decay and clip must be non-negative".into()));
        }
        if self.batch_size == 0 || self.chunk_len == 0 {
            return Err(Error::Config("batch_size and chunk_len must be positive".into()));
        }
        if self.max_steps == 0 && self.max_epochs == 0 {
            return Err(Error::Config("set max_steps or max_epochs".into()));
        }
        if self.schedule == Schedule::Linear && self.max_steps == 0 {
            return Err(Error::Config("schedule=linear needs max_steps".into()));
        }
        Ok(())
    }
}

/// One validation point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean training loss (nats/token) since the previous record; absent
    /// for the record taken before any update.
    pub train_loss: Option<f64>,
    pub valid_loss: f64,
    pub lr: f64,
    pub tok_per_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\ttrain_loss\tvalid_loss\tlr\ttok_per_s\n");
        for r in &self.records {
            let train = r.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            let _ = writeln!(out, "{}\t{train}\t{:.6}\t{:e}\t{:.1}", r.step, r.valid_loss, r.lr, r.tok_per_s);
        }
        out
    }

    /// Equality ignoring throughput, which depends on the machine.
    pub fn same_curve(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step && a.train_loss == b.train_loss && a.valid_loss == b.valid_loss && a.lr == b.lr
            })
    }

    pub fn best_valid(&self) -> Option<f64> {
        self.records.iter().map(|r| r.valid_loss).min_by(f64::total_cmp)
    }
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub model: LanguageModel,
    pub log: TrainLog,
    pub steps: usize,
    /// Set when training stopped on a numeric failure.
    pub aborted: Option<Error>,
}

/// Loss of one batch and gradients for every parameter.
pub struct StepResult {
    /// Mean cross-entropy in nats over scored targets.
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub state: State,
}

/// Forward pass on `[batch, len]` inputs and targets without gradients;
/// returns the mean cross-entropy in nats and the next state.
pub fn batch_loss(
    model: &LanguageModel,
    inputs: &[TokenId],
    targets: &[TokenId],
    batch: usize,
    state: &State,
) -> Result<(f64, State)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, inputs, batch, state, &mut Mode::Eval)?;
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ce = g.cross_entropy(out.logits, &t, None)?;
    Ok((g.value(ce).item(), out.state))
}

/// Loss and gradients of one training batch (cross-entropy plus any
/// regularisation penalty).
pub fn compute_gradients(
    model: &LanguageModel,
    inputs: &[TokenId],
    targets: &[TokenId],
    batch: usize,
    state: &State,
    mode: &mut Mode,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, inputs, batch, state, mode)?;
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let ce = g.cross_entropy(out.logits, &t, None)?;
    let objective = match out.penalty {
        Some(pen) => g.add(ce, pen)?,
        None => ce,
    };
    let loss = g.value(ce).item();
    let grads = g.backward(objective)?;
    let grads = p.vars().iter().map(|&v| grads.get_or_zeros(v, &g)).collect();
    Ok(StepResult {
        loss,
        grads,
        state: out.state,
    })
}

enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    fn step(&mut self, model: &mut LanguageModel, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.params.tensors_mut();
        match self {
            Optimizer::Sgd(o) => {
                o.lr = lr;
                o.step(&mut params, grads)
            }
            Optimizer::AdamW(o) => {
                o.lr = lr;
                o.step(&mut params, grads)
            }
        }
    }
}

struct Batch {
    inputs: Vec<TokenId>,
    targets: Vec<TokenId>,
    batch: usize,
    lr_scale: f64,
    /// `None` continues from the previous batch's state.
    state: Option<State>,
}

/// Produces the batches of one epoch.
enum Source<'a> {
    Bptt(Box<BpttBatcher>),
    Windows {
        ext: Vec<TokenId>,
        stream: &'a [TokenId],
        windows: Vec<Window>,
    },
    Chunks {
        ext: Vec<TokenId>,
        stream: &'a [TokenId],
        starts: Vec<usize>,
        len: usize,
        history: usize,
    },
}

impl<'a> Source<'a> {
    fn new(model: &LanguageModel, cfg: &TrainConfig, stream: &'a [TokenId], rng: &RngStream) -> Result<Self> {
        let c = &model.config;
        Ok(match c.arch {
            Arch::Lstm | Arch::AwdLstm | Arch::Qrnn => {
                Source::Bptt(Box::new(BpttBatcher::new(stream, cfg.batch_size, c.bptt_len, cfg.variable_bptt, rng.derive(3))?))
            }
            Arch::Transformer => Source::Windows {
                ext: shifted_inputs(stream, START_ID),
                stream,
                windows: make_windows(stream.len(), c.block_size, c.stride_train, WindowMode::Train)?,
            },
            Arch::Ffnn => {
                if stream.is_empty() {
                    return Err(Error::Size("empty training stream".into()));
                }
                let len = cfg.chunk_len.min(stream.len());
                Source::Chunks {
                    ext: shifted_inputs(stream, START_ID),
                    stream,
                    starts: (0..=stream.len() - len).step_by(len).collect(),
                    len,
                    history: c.context_order - 1,
                }
            }
        })
    }

    fn epoch(&mut self, shuffle: &mut RngStream, batch_size: usize) -> Vec<Batch> {
        match self {
            Source::Bptt(b) => {
                b.reset();
                let mut out = Vec::new();
                let mut first = true;
                while let Some(x) = b.next_batch() {
                    out.push(Batch {
                        inputs: x.inputs,
                        targets: x.targets,
                        batch: x.batch,
                        lr_scale: x.lr_scale,
                        state: first.then_some(State::Empty),
                    });
                    first = false;
                }
                out
            }
            Source::Windows { ext, stream, windows } => {
                let mut order: Vec<usize> = (0..windows.len()).collect();
                shuffle.shuffle(&mut order);
                order
                    .chunks(batch_size)
                    .map(|group| {
                        let mut inputs = Vec::new();
                        let mut targets = Vec::new();
                        for &i in group {
                            let w = &windows[i];
                            inputs.extend_from_slice(&ext[w.start..w.start + w.len]);
                            targets.extend_from_slice(&stream[w.start..w.start + w.len]);
                        }
                        Batch {
                            inputs,
                            targets,
                            batch: group.len(),
                            lr_scale: 1.0,
                            state: Some(State::Empty),
                        }
                    })
                    .collect()
            }
            Source::Chunks {
                ext,
                stream,
                starts,
                len,
                history,
            } => {
                let mut order = starts.clone();
                shuffle.shuffle(&mut order);
                order
                    .chunks(batch_size)
                    .map(|group| {
                        let mut inputs = Vec::new();
                        let mut targets = Vec::new();
                        let mut hist = Vec::new();
                        for &s in group {
                            inputs.extend_from_slice(&ext[s..s + *len]);
                            targets.extend_from_slice(&stream[s..s + *len]);
                            hist.push(ext[s.saturating_sub(*history)..s].to_vec());
                        }
                        Batch {
                            inputs,
                            targets,
                            batch: group.len(),
                            lr_scale: 1.0,
                            state: Some(State::History(hist)),
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Mean validation loss in nats per token.
pub fn validation_loss(model: &LanguageModel, valid: &[TokenId]) -> Result<f64> {
    let lp = neural_log2probs(model, valid, model.config.block_size, model.config.stride_eval)?;
    if lp.is_empty() {
        return Err(Error::Size("empty validation stream".into()));
    }
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64 * std::f64::consts::LN_2)
}

/// Trains `model` on `train`, validating on `valid`.
pub fn train(mut model: LanguageModel, cfg: &TrainConfig, train: &[TokenId], valid: &[TokenId]) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let valid = if cfg.valid_tokens > 0 && valid.len() > cfg.valid_tokens {
        &valid[..cfg.valid_tokens]
    } else {
        valid
    };
    let root = RngStream::new(cfg.seed);
    let mut mask_rng = root.derive(1);
    let mut shuffle_rng = root.derive(2);
    let mut source = Source::new(&model, cfg, train, &root)?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.lr)),
        OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(cfg.lr, cfg.weight_decay)),
    };
    let mut plateau = PlateauDecay::new(cfg.lr);
    let mut base_lr = cfg.lr;

    let mut log = TrainLog::default();
    let mut history = Vec::new();
    let v0 = validation_loss(&model, valid)?;
    if cfg.schedule == Schedule::Plateau {
        plateau.observe(v0);
    }
    log.records.push(TrainRecord {
        step: 0,
        train_loss: None,
        valid_loss: v0,
        lr: base_lr,
        tok_per_s: 0.0,
    });
    history.push(v0);
    let mut best = (v0, model.clone());

    let mut step = 0;
    let mut epoch = 0;
    let mut state = State::Empty;
    let mut since = (0.0, 0usize, 0usize, Instant::now()); // (loss sum, batches, tokens, clock)
    let mut aborted = None;
    let mut stop = false;
    log::info!("training {} with {} parameters", model.config.arch, model.count_params());

    'outer: while !stop {
        let batches = source.epoch(&mut shuffle_rng, cfg.batch_size);
        if batches.is_empty() {
            return Err(Error::Size("training stream yields no batches".into()));
        }
        for b in batches {
            if let Some(s) = b.state {
                state = s;
            }
            let lr = scheduled_lr(cfg, step, base_lr) * b.lr_scale;
            let result = compute_gradients(&model, &b.inputs, &b.targets, b.batch, &state, &mut Mode::Train(&mut mask_rng))
                .and_then(|mut r| {
                    if !r.loss.is_finite() {
                        return Err(Error::Numeric(format!("non-finite training loss at step {}", step + 1)));
                    }
                    if cfg.clip > 0.0 {
                        clip_grad_norm(&mut r.grads, cfg.clip)?;
                    }
                    opt.step(&mut model, &r.grads, lr)?;
                    Ok(r)
                });
            let r = match result {
                Ok(r) => r,
                Err(e @ Error::Numeric(_)) => {
                    log::warn!("aborting: {e}");
                    aborted = Some(e);
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            state = r.state;
            step += 1;
            since.0 += r.loss;
            since.1 += 1;
            since.2 += b.targets.len();

            let at_limit = cfg.max_steps > 0 && step >= cfg.max_steps;
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || (at_limit && cfg.eval_every > 0) {
                match evaluate_point(&model, valid, cfg, step, scheduled_lr(cfg, step, base_lr), &mut since, &mut log, &mut history, &mut best) {
                    Ok(s) => stop = s,
                    Err(e @ Error::Numeric(_)) => {
                        aborted = Some(e);
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                }
                if cfg.schedule == Schedule::Plateau {
                    base_lr = plateau.observe(*history.last().expect("just pushed"));
                }
            }
            if at_limit {
                stop = true;
            }
            if stop {
                break;
            }
        }
        epoch += 1;
        if cfg.eval_every == 0 && since.1 > 0 {
            match evaluate_point(&model, valid, cfg, step, scheduled_lr(cfg, step, base_lr), &mut since, &mut log, &mut history, &mut best) {
                Ok(s) => stop |= s,
                Err(e @ Error::Numeric(_)) => {
                    aborted = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
            if cfg.schedule == Schedule::Plateau {
                base_lr = plateau.observe(*history.last().expect("just pushed"));
            }
        }
        if cfg.max_epochs > 0 && epoch >= cfg.max_epochs {
            stop = true;
        }
    }
    if aborted.is_none() && since.1 > 0 {
        if let Err(e) = evaluate_point(&model, valid, cfg, step, scheduled_lr(cfg, step, base_lr), &mut since, &mut log, &mut history, &mut best) {
            match e {
                Error::Numeric(_) => aborted = Some(e),
                e => return Err(e),
            }
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        log,
        steps: step,
        aborted,
    })
}

fn scheduled_lr(cfg: &TrainConfig, step: usize, base_lr: f64) -> f64 {
    match cfg.schedule {
        Schedule::Linear => linear_decay(step, cfg.max_steps, cfg.lr),
        _ => base_lr,
    }
}

/// Records a validation point; returns whether early stopping triggers.
#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    model: &LanguageModel,
    valid: &[TokenId],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
    since: &mut (f64, usize, usize, Instant),
    log: &mut TrainLog,
    history: &mut Vec<f64>,
    best: &mut (f64, LanguageModel),
) -> Result<bool> {
    let v = validation_loss(model, valid)?;
    let elapsed = since.3.elapsed().as_secs_f64();
    let record = TrainRecord {
        step,
        train_loss: Some(since.0 / since.1.max(1) as f64),
        valid_loss: v,
        lr,
        tok_per_s: if elapsed > 0.0 { since.2 as f64 / elapsed } else { 0.0 },
    };
    log::info!(
        "step {step}: train {:.4} valid {v:.4} lr {lr:e}",
        record.train_loss.unwrap_or(f64::NAN)
    );
    log.records.push(record);
    *since = (0.0, 0, 0, Instant::now());
    history.push(v);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite validation loss at step {step}")));
    }
    if v < best.0 - IMPROVEMENT_TOL {
        *best = (v, model.clone());
    }
    Ok(cfg.patience > 0 && early_stop(history, cfg.patience))
}
