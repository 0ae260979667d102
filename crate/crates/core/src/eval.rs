//! Cross-entropy, perplexity and bits-per-character for n-gram and neural
//! models, plus comparison tables.
//!
//! Every predicted token counts, including the end-of-line token, and the
//! character denominator counts Unicode scalar values plus one per line.
//! With `n` tokens, `c` characters and total log-probability `L` (base 2):
//! cross-entropy is `-L / n`, perplexity `2^(-L / n)` and BPC `-L / c`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::{TokenId, TokenizerModel, UNK_ID};
use crate::corpus::{corpus_stats, RawCorpus};
use crate::ngram::NGramModel;
use crate::nn::{Arch, LanguageModel, LmCheckpoint, Mode, State, START_ID};
use crate::tensor::{log_softmax_rows, Graph};
use crate::train::{make_windows, shifted_inputs, WindowMode};
use crate::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;

/// Segment length for stateful scoring of feed-forward models.
const FFNN_SEGMENT: usize = 256;
/// Windows of equal length scored together.
const WINDOW_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub model: String,
    pub param_count: u64,
    pub vocab: u64,
    pub n_tokens: u64,
    pub c_chars: u64,
    pub total_log2prob: f64,
    pub cross_entropy_bits_per_token: f64,
    pub perplexity: f64,
    pub bpc: f64,
}

impl EvalReport {
    /// Fills the derived metrics from the raw totals.
    pub fn from_totals(
        dataset: impl Into<String>,
        model: impl Into<String>,
        param_count: u64,
        vocab: u64,
        n_tokens: u64,
        c_chars: u64,
        total_log2prob: f64,
    ) -> Result<Self> {
        if n_tokens == 0 || c_chars == 0 {
            return Err(Error::Size("evaluation needs at least one token and one character".into()));
        }
        let cross_entropy = -total_log2prob / n_tokens as f64;
        let report = EvalReport {
            dataset: dataset.into(),
            model: model.into(),
            param_count,
            vocab,
            n_tokens,
            c_chars,
            total_log2prob,
            cross_entropy_bits_per_token: cross_entropy,
            perplexity: cross_entropy.exp2(),
            bpc: -total_log2prob / c_chars as f64,
        };
        if !(report.total_log2prob.is_finite() && report.perplexity.is_finite() && report.bpc.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite evaluation metrics (total log2 probability {total_log2prob})"
            )));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EvalReport::from_json(&text)
    }
}

/// Characters of a corpus as counted for BPC.
pub fn char_count(corpus: &RawCorpus) -> usize {
    corpus_stats(corpus).char_count
}

/// Share of tokens that are UNK.
pub fn unk_rate(ids: &[TokenId]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().filter(|&&t| t == UNK_ID).count() as f64 / ids.len() as f64
}

/// log2 probability of every token of `stream`, predicted from the tokens
/// before it. Recurrent and feed-forward models run statefully over the
/// whole stream; Transformers use strided windows of at most `block`
/// tokens advancing by `stride`.
pub fn neural_log2probs(model: &LanguageModel, stream: &[TokenId], block: usize, stride: usize) -> Result<Vec<f64>> {
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let ext = shifted_inputs(stream, START_ID);
    let mut out = vec![0.0; stream.len()];
    match model.config.arch {
        Arch::Transformer => {
            let block = block.min(model.config.block_size);
            let windows = make_windows(stream.len(), block, stride.min(block), WindowMode::Eval)?;
            let mut i = 0;
            while i < windows.len() {
                let len = windows[i].len;
                let mut j = i;
                while j < windows.len() && j - i < WINDOW_BATCH && windows[j].len == len {
                    j += 1;
                }
                let group = &windows[i..j];
                let inputs: Vec<TokenId> = group.iter().flat_map(|w| ext[w.start..w.start + len].iter().copied()).collect();
                let logp = run_segment(model, &inputs, group.len(), &State::Empty)?.0;
                for (b, w) in group.iter().enumerate() {
                    for pos in w.scored.clone() {
                        let row = b * len + (pos - w.start);
                        out[pos] = logp[row * model.config.vocab + stream[pos] as usize] / LN_2;
                    }
                }
                i = j;
            }
        }
        arch => {
            let seg = if arch == Arch::Ffnn { FFNN_SEGMENT } else { model.config.bptt_len.max(1) };
            let mut state = State::Empty;
            let mut pos = 0;
            while pos < stream.len() {
                let end = (pos + seg).min(stream.len());
                let (logp, next) = run_segment(model, &ext[pos..end], 1, &state)?;
                for t in pos..end {
                    out[t] = logp[(t - pos) * model.config.vocab + stream[t] as usize] / LN_2;
                }
                state = next;
                pos = end;
            }
        }
    }
    Ok(out)
}

/// Natural-log softmax of every logit row for one forward pass.
fn run_segment(model: &LanguageModel, inputs: &[TokenId], batch: usize, state: &State) -> Result<(Vec<f64>, State)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let f = model.forward(&mut g, &p, inputs, batch, state, &mut Mode::Eval)?;
    Ok((log_softmax_rows(g.value(f.logits)).into_data(), f.state))
}

fn check_tokenizer(tokenizer: &TokenizerModel, expected_hash: &str) -> Result<()> {
    let actual = tokenizer.hash();
    if actual != expected_hash {
        return Err(Error::Integrity(format!(
            "model was trained with tokenizer {expected_hash}, got {actual}"
        )));
    }
    Ok(())
}

/// Scores `test` with a neural checkpoint.
pub fn evaluate_neural(
    ckpt: &LmCheckpoint,
    tokenizer: &TokenizerModel,
    test: &RawCorpus,
    block: usize,
    stride: usize,
    model_name: &str,
) -> Result<EvalReport> {
    check_tokenizer(tokenizer, &ckpt.tokenizer_hash)?;
    let stream = tokenizer.encode_stream(test);
    let lp = neural_log2probs(&ckpt.model, &stream, block, stride)?;
    log::info!("UNK rate {:.4}%", 100.0 * unk_rate(&stream));
    EvalReport::from_totals(
        &test.source_name,
        model_name,
        ckpt.model.count_params() as u64,
        tokenizer.vocab_size() as u64,
        stream.len() as u64,
        char_count(test) as u64,
        lp.iter().sum(),
    )
}

/// Scores `test` line by line with an n-gram model keyed to `tokenizer`'s
/// ids (see [`NGramModel::align_vocab`]).
pub fn evaluate_ngram(
    model: &NGramModel,
    tokenizer: &TokenizerModel,
    test: &RawCorpus,
    model_name: &str,
) -> Result<EvalReport> {
    let aligned = model.align_vocab(tokenizer.tokens())?;
    let seqs = tokenizer.encode_corpus(test);
    let n: usize = seqs.iter().map(|s| s.ids.len()).sum();
    let total: f64 = seqs.iter().map(|s| aligned.score_sequence(s)).sum();
    let unk = seqs.iter().flat_map(|s| s.ids.iter()).filter(|&&t| t == UNK_ID).count();
    log::info!("UNK rate {:.4}%", 100.0 * unk as f64 / n.max(1) as f64);
    EvalReport::from_totals(
        &test.source_name,
        model_name,
        model.param_count() as u64,
        tokenizer.vocab_size() as u64,
        n as u64,
        char_count(test) as u64,
        total,
    )
}

/// Machine-readable and aligned renderings of a set of reports, sorted by
/// BPC ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<EvalReport>,
    pub tsv: String,
    pub table: String,
}

pub const COMPARISON_HEADER: [&str; 7] = ["dataset", "model", "params", "vocab", "bpc", "ppl", "xent"];

pub fn compare_report(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to compare".into()));
    }
    let mut rows = reports.to_vec();
    rows.sort_by(|a, b| a.bpc.total_cmp(&b.bpc));
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.model.clone(),
                r.param_count.to_string(),
                r.vocab.to_string(),
                format!("{:.3}", r.bpc),
                format!("{:.2}", r.perplexity),
                format!("{:.4}", r.cross_entropy_bits_per_token),
            ]
        })
        .collect();

    let mut tsv = COMPARISON_HEADER.join("\t");
    tsv.push('\n');
    for row in &cells {
        tsv.push_str(&row.join("\t"));
        tsv.push('\n');
    }

    let mut widths: Vec<usize> = COMPARISON_HEADER.iter().map(|h| h.chars().count()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut table = String::new();
    let render = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
            // text columns left-aligned, numbers right-aligned
            if i < 2 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "{c:>w$}");
            }
            out.push_str(if i + 1 < row.len() { "  " } else { "\n" });
        }
    };
    render(&mut table, &COMPARISON_HEADER);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    render(&mut table, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for row in &cells {
        render(&mut table, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    Ok(Comparison { rows, tsv, table })
}
