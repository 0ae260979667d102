//! Batch construction: BPTT folding for recurrent models and sliding
//! windows for the Transformer (and for strided evaluation).

use std::ops::Range;

use crate::bpe::TokenId;
use crate::nn::sample_bptt_len;
use crate::rng::RngStream;
use crate::{Error, Result};

/// One `[batch, len]` slice of inputs and next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct BpttBatch {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub batch: usize,
    pub len: usize,
    /// Learning-rate multiplier `len / base_len`.
    pub lr_scale: f64,
}

/// Folds a stream into `batch` equal rows and walks them left to right.
/// Tokens past `batch * floor(n / batch)` are dropped.
#[derive(Clone, Debug)]
pub struct BpttBatcher {
    rows: Vec<Vec<TokenId>>,
    base_len: usize,
    variable: bool,
    rng: RngStream,
    cursor: usize,
}

impl BpttBatcher {
    pub fn new(stream: &[TokenId], batch: usize, base_len: usize, variable: bool, rng: RngStream) -> Result<Self> {
        if batch == 0 || base_len == 0 {
            return Err(Error::Config("batch size and BPTT length must be positive".into()));
        }
        if stream.len() < 2 * batch {
            return Err(Error::Size(format!(
                "stream of {} tokens is too short for batch size {batch}",
                stream.len()
            )));
        }
        let width = stream.len() / batch;
        let rows = stream.chunks_exact(width).take(batch).map(<[TokenId]>::to_vec).collect();
        Ok(BpttBatcher {
            rows,
            base_len,
            variable,
            rng,
            cursor: 0,
        })
    }

    pub fn rows(&self) -> &[Vec<TokenId>] {
        &self.rows
    }

    /// Restarts from the first column (a new epoch).
    pub fn reset(&mut self) {
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Option<BpttBatch> {
        let width = self.rows[0].len();
        if self.cursor + 1 >= width {
            return None;
        }
        let want = if self.variable { sample_bptt_len(self.base_len, &mut self.rng) } else { self.base_len };
        let len = want.min(width - 1 - self.cursor);
        let mut inputs = Vec::with_capacity(self.rows.len() * len);
        let mut targets = Vec::with_capacity(self.rows.len() * len);
        for row in &self.rows {
            inputs.extend_from_slice(&row[self.cursor..self.cursor + len]);
            targets.extend_from_slice(&row[self.cursor + 1..self.cursor + 1 + len]);
        }
        self.cursor += len;
        Some(BpttBatch {
            inputs,
            targets,
            batch: self.rows.len(),
            len,
            lr_scale: len as f64 / self.base_len as f64,
        })
    }
}

impl Iterator for BpttBatcher {
    type Item = BpttBatch;

    fn next(&mut self) -> Option<BpttBatch> {
        self.next_batch()
    }
}

/// A window over target positions `start..start + len` of a stream. The
/// model input for target `i` is the token before it (or the start token).
/// Only targets in `scored` count towards the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub scored: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Starts at multiples of the stride; every position scored.
    Train,
    /// Every position of the stream scored exactly once; later windows keep
    /// `block - stride` positions of context.
    Eval,
}

pub fn make_windows(n: usize, block: usize, stride: usize, mode: WindowMode) -> Result<Vec<Window>> {
    if block == 0 || stride == 0 || stride > block {
        return Err(Error::Config(format!("window stride {stride} must lie in 1..={block}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if n <= block {
        return Ok(vec![Window {
            start: 0,
            len: n,
            scored: 0..n,
        }]);
    }
    let mut out = Vec::new();
    match mode {
        WindowMode::Train => {
            let mut s = 0;
            while s + block <= n {
                out.push(Window {
                    start: s,
                    len: block,
                    scored: s..s + block,
                });
                s += stride;
            }
        }
        WindowMode::Eval => {
            out.push(Window {
                start: 0,
                len: block,
                scored: 0..block,
            });
            let mut end = block;
            while end < n {
                let next = (end + stride).min(n);
                out.push(Window {
                    start: next - block,
                    len: block,
                    scored: end..next,
                });
                end = next;
            }
        }
    }
    Ok(out)
}

/// `[start] ++ stream`: entry `i` is the model input for target `i`.
pub fn shifted_inputs(stream: &[TokenId], start: TokenId) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(stream.len() + 1);
    ext.push(start);
    ext.extend_from_slice(stream);
    ext
}
