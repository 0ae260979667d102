//! Quasi-recurrent network: causal convolutions produce candidate, forget
//! and output gates for all timesteps at once; fo-pooling is the only
//! sequential part. The first layer sees the current and previous input
//! (window 2), higher layers only the current one.

use super::lstm::{layer_dropout, sum_terms};
use super::{ids_time_major, regularize, time_to_batch_major, Bound, Forward, LanguageModel, LmConfig, Mode, ParamStore, State};
use crate::bpe::TokenId;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};

/// (input width, window, hidden width) of layer `l`.
pub(super) fn layer_dims(c: &LmConfig, l: usize) -> (usize, usize, usize) {
    let input = if l == 0 { c.emb_dim } else { c.hidden_dim };
    let hidden = if l + 1 == c.n_layers { c.top_width() } else { c.hidden_dim };
    (input, if l == 0 { 2 } else { 1 }, hidden)
}

pub(super) fn init(c: &LmConfig, params: &mut ParamStore, rng: &mut RngStream) {
    for l in 0..c.n_layers {
        let (i, k, h) = layer_dims(c, l);
        let bound = 1.0 / ((k * i) as f64).sqrt();
        params.insert(format!("qrnn.{l}.w"), Tensor::uniform(&[k * i, 3 * h], bound, rng));
        params.insert(format!("qrnn.{l}.b"), Tensor::zeros(&[3 * h]));
    }
}

fn zero_state(c: &LmConfig, batch: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut cs = Vec::new();
    let mut prev = Vec::new();
    for l in 0..c.n_layers {
        let (i, _, h) = layer_dims(c, l);
        cs.push(Tensor::zeros(&[batch, h]));
        prev.push(Tensor::zeros(&[batch, i]));
    }
    (cs, prev)
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
    let c = &m.config;
    let d = c.dropout;
    let (c0, prev0) = match state {
        State::Empty => zero_state(c, batch),
        State::Qrnn { c, prev } => (c.clone(), prev.clone()),
        _ => return Err(Error::Usage("state of another architecture passed to a QRNN".into())),
    };
    if c0.len() != c.n_layers || prev0.len() != c.n_layers {
        return Err(Error::shape("qrnn state", &[c0.len()], &[c.n_layers]));
    }
    let mut masks = Vec::new();
    let ids = ids_time_major(inputs, batch, len);
    let table = regularize::embedding_rows(g, p.get("embed")?, d.embedding, mode, &mut masks)?;
    let mut x = g.embedding(table, &ids)?;
    x = layer_dropout(g, x, batch, d.input, true, mode, "input", &mut masks)?;

    let mut cs = Vec::with_capacity(c.n_layers);
    let mut prevs = Vec::with_capacity(c.n_layers);
    let mut raw_top = x;
    for l in 0..c.n_layers {
        let (iw, k, hw) = layer_dims(c, l);
        let want_c = [batch, hw];
        let want_p = [batch, iw];
        if c0[l].shape() != want_c || prev0[l].shape() != want_p {
            return Err(Error::shape("qrnn state", c0[l].shape(), &want_c));
        }
        let rows = len * batch;
        prevs.push(Tensor::new(&want_p, g.value(x).data()[(rows - batch) * iw..].to_vec())?);
        let conv_in = if k == 2 {
            let carried = g.constant(prev0[l].clone());
            let shifted = if len > 1 {
                let head = g.slice_rows(x, 0, rows - batch)?;
                g.concat_rows(&[carried, head])?
            } else {
                carried
            };
            g.concat_cols(&[shifted, x])?
        } else {
            x
        };
        let pre = g.matmul(conv_in, p.get(&format!("qrnn.{l}.w"))?)?;
        let pre = g.add_row(pre, p.get(&format!("qrnn.{l}.b"))?)?;
        let z = g.slice_cols(pre, 0, hw)?;
        let f = g.slice_cols(pre, hw, hw)?;
        let o = g.slice_cols(pre, 2 * hw, hw)?;
        let z = g.tanh(z)?;
        let f = g.sigmoid(f)?;
        let o = g.sigmoid(o)?;
        let start = g.constant(c0[l].clone());
        let cells = g.fo_pool(f, z, Some(start), batch)?;
        cs.push(Tensor::new(&want_c, g.value(cells).data()[(rows - batch) * hw..].to_vec())?);
        let h = g.mul(o, cells)?;
        raw_top = h;
        let (rate, name) = if l + 1 == c.n_layers {
            (d.output, "output".to_string())
        } else {
            (d.hidden, format!("hidden.{l}"))
        };
        x = layer_dropout(g, h, batch, rate, true, mode, &name, &mut masks)?;
    }

    let mut penalty = None;
    if mode.is_train() {
        let mut terms = Vec::new();
        if c.ar_alpha > 0.0 {
            terms.push(regularize::ar_penalty(g, x, c.ar_alpha)?);
        }
        if c.tar_beta > 0.0 {
            if let Some(t) = regularize::tar_penalty(g, raw_top, batch, c.tar_beta)? {
                terms.push(t);
            }
        }
        penalty = sum_terms(g, &terms)?;
    }

    let top = time_to_batch_major(g, x, batch, len)?;
    let logits = m.project(g, p, top)?;
    Ok(Forward {
        logits,
        penalty,
        state: State::Qrnn { c: cs, prev: prevs },
        masks,
    })
}
