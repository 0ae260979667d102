//! Feed-forward n-gram network over concatenated context embeddings.

use super::{dropout, regularize, Bound, Forward, LanguageModel, LmConfig, Mode, ParamStore, State, START_ID};
use crate::bpe::TokenId;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub(super) fn init(c: &LmConfig, params: &mut ParamStore, rng: &mut RngStream) {
    let mut width = (c.context_order - 1) * c.emb_dim;
    for l in 0..c.n_layers {
        let out = if l + 1 == c.n_layers { c.top_width() } else { c.hidden_dim };
        let bound = 1.0 / (width as f64).sqrt();
        params.insert(format!("ff.{l}.w"), Tensor::uniform(&[width, out], bound, rng));
        params.insert(format!("ff.{l}.b"), Tensor::zeros(&[out]));
        width = out;
    }
}

/// The window of `order - 1` tokens ending at each position of
/// `ext[skip..]` (the context for predicting the token after it). Missing
/// history is padded with the start token.
pub fn ffnn_contexts(ext: &[TokenId], skip: usize, order: usize) -> Vec<TokenId> {
    let w = order - 1;
    let mut out = Vec::with_capacity((ext.len() - skip) * w);
    for t in skip..ext.len() {
        for k in (0..w).rev() {
            out.push(if t >= k { ext[t - k] } else { START_ID });
        }
    }
    out
}

pub(super) fn forward_contexts(
    m: &LanguageModel,
    g: &mut Graph,
    p: &Bound,
    contexts: &[TokenId],
    batch: usize,
    mode: &mut Mode,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    let c = &m.config;
    let w = c.context_order - 1;
    if contexts.len() != batch * w {
        return Err(Error::shape("ffnn_forward", &[contexts.len()], &[batch, w]));
    }
    let table = regularize::embedding_rows(g, p.get("embed")?, c.dropout.embedding, mode, masks)?;
    let e = g.embedding(table, contexts)?;
    let mut h = g.reshape(e, &[batch, w * c.emb_dim])?;
    h = dropout(g, h, c.dropout.input, mode, "input", masks)?;
    for l in 0..c.n_layers {
        let z = g.matmul(h, p.get(&format!("ff.{l}.w"))?)?;
        let z = g.add_row(z, p.get(&format!("ff.{l}.b"))?)?;
        h = g.relu(z)?;
        h = dropout(g, h, c.dropout.hidden, mode, &format!("hidden.{l}"), masks)?;
    }
    m.project(g, p, h)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    m: &LanguageModel,
    g: &mut Graph,
    p: &Bound,
    inputs: &[TokenId],
    batch: usize,
    len: usize,
    state: &State,
    mode: &mut Mode,
) -> Result<Forward> {
    let w = m.config.context_order - 1;
    let history: Vec<Vec<TokenId>> = match state {
        State::Empty => vec![Vec::new(); batch],
        State::History(h) if h.len() == batch => h.clone(),
        State::History(h) => return Err(Error::shape("ffnn state", &[h.len()], &[batch])),
        _ => return Err(Error::Usage("recurrent state passed to a feed-forward model".into())),
    };
    let mut contexts = Vec::with_capacity(batch * len * w);
    let mut next = Vec::with_capacity(batch);
    for (b, hist) in history.into_iter().enumerate() {
        let mut ext = hist;
        let skip = ext.len();
        ext.extend_from_slice(&inputs[b * len..(b + 1) * len]);
        contexts.extend(ffnn_contexts(&ext, skip, m.config.context_order));
        let keep = ext.len().saturating_sub(w);
        next.push(ext[keep..].to_vec());
    }
    let mut masks = Vec::new();
    let logits = forward_contexts(m, g, p, &contexts, batch * len, mode, &mut masks)?;
    Ok(Forward {
        logits,
        penalty: None,
        state: State::History(next),
        masks,
    })
}
