//! Stacked LSTM, optionally with AWD regularisation.
//!
//! Gates are packed `[i, f, g, o]` along the columns of each weight matrix.
//! The plain variant draws fresh dropout masks at every timestep and only
//! on layer inputs and outputs; the AWD variant uses variational masks,
//! embedding-row dropout, DropConnect on the recurrent weights and AR/TAR
//! penalties.

use super::{
    dropout, ids_time_major, regularize, time_to_batch_major, Arch, Bound, Forward, LanguageModel, LmConfig, Mode,
    ParamStore, State,
};
use crate::bpe::TokenId;
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// (input width, hidden width) of layer `l`.
pub(super) fn layer_dims(c: &LmConfig, l: usize) -> (usize, usize) {
    let input = if l == 0 { c.emb_dim } else { c.hidden_dim };
    let hidden = if l + 1 == c.n_layers { c.top_width() } else { c.hidden_dim };
    (input, hidden)
}

pub(super) fn init(c: &LmConfig, params: &mut ParamStore, rng: &mut RngStream) {
    for l in 0..c.n_layers {
        let (i, h) = layer_dims(c, l);
        let bound = 1.0 / (h as f64).sqrt();
        params.insert(format!("lstm.{l}.w_ih"), Tensor::uniform(&[i, 4 * h], bound, rng));
        params.insert(format!("lstm.{l}.w_hh"), Tensor::uniform(&[h, 4 * h], bound, rng));
        params.insert(format!("lstm.{l}.b"), Tensor::zeros(&[4 * h]));
    }
}

pub(super) fn zero_state(c: &LmConfig, batch: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let zs: Vec<Tensor> = (0..c.n_layers).map(|l| Tensor::zeros(&[batch, layer_dims(c, l).1])).collect();
    (zs.clone(), zs)
}

/// One LSTM step on `[batch, 4h]` pre-activations; returns `(h, c)`.
pub(super) fn cell(g: &mut Graph, pre: Var, c_prev: Var, h: usize) -> Result<(Var, Var)> {
    let i = g.slice_cols(pre, 0, h)?;
    let f = g.slice_cols(pre, h, h)?;
    let u = g.slice_cols(pre, 2 * h, h)?;
    let o = g.slice_cols(pre, 3 * h, h)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let u = g.tanh(u)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, u)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let hn = g.mul(o, tc)?;
    Ok((hn, c))
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
    let awd = c.arch == Arch::AwdLstm;
    let d = c.dropout;
    let (h0, c0) = match state {
        State::Empty => zero_state(c, batch),
        State::Lstm { h, c: cs } => (h.clone(), cs.clone()),
        _ => return Err(Error::Usage("state of another architecture passed to an LSTM".into())),
    };
    if h0.len() != c.n_layers || c0.len() != c.n_layers {
        return Err(Error::shape("lstm state", &[h0.len()], &[c.n_layers]));
    }
    for l in 0..c.n_layers {
        let want = [batch, layer_dims(c, l).1];
        if h0[l].shape() != want || c0[l].shape() != want {
            return Err(Error::shape("lstm state", h0[l].shape(), &want));
        }
    }

    let mut masks = Vec::new();
    let ids = ids_time_major(inputs, batch, len);
    let table = if awd {
        regularize::embedding_rows(g, p.get("embed")?, d.embedding, mode, &mut masks)?
    } else {
        p.get("embed")?
    };
    let mut x = g.embedding(table, &ids)?;
    x = layer_dropout(g, x, batch, d.input, awd, mode, "input", &mut masks)?;

    let mut hs = Vec::with_capacity(c.n_layers);
    let mut cs = Vec::with_capacity(c.n_layers);
    let mut raw_top = x;
    for l in 0..c.n_layers {
        let (_, hw) = layer_dims(c, l);
        let w_ih = p.get(&format!("lstm.{l}.w_ih"))?;
        let mut w_hh = p.get(&format!("lstm.{l}.w_hh"))?;
        if awd {
            w_hh = regularize::drop_connect(g, w_hh, d.weight, mode, &format!("weight.{l}"), &mut masks)?;
        }
        let bias = p.get(&format!("lstm.{l}.b"))?;
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add_row(xw, bias)?;
        let mut h = g.constant(h0[l].clone());
        let mut cell_state = g.constant(c0[l].clone());
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.slice_rows(xw, t * batch, batch)?;
            let hh = g.matmul(h, w_hh)?;
            let pre = g.add(xt, hh)?;
            let (hn, cn) = cell(g, pre, cell_state, hw)?;
            h = hn;
            cell_state = cn;
            outs.push(h);
        }
        hs.push(g.value(h).clone());
        cs.push(g.value(cell_state).clone());
        let out = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };
        raw_top = out;
        let (rate, name) = if l + 1 == c.n_layers {
            (d.output, "output".to_string())
        } else {
            (d.hidden, format!("hidden.{l}"))
        };
        x = layer_dropout(g, out, batch, rate, awd, mode, &name, &mut masks)?;
    }

    let mut penalty = None;
    if awd && mode.is_train() {
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
        state: State::Lstm { h: hs, c: cs },
        masks,
    })
}

pub(super) fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &t in terms {
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

/// Variational dropout for AWD models, per-timestep dropout otherwise.
#[allow(clippy::too_many_arguments)]
pub(super) fn layer_dropout(
    g: &mut Graph,
    x: Var,
    batch: usize,
    rate: f64,
    variational: bool,
    mode: &mut Mode,
    name: &str,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    if variational {
        regularize::variational(g, x, batch, rate, mode, name, masks)
    } else {
        dropout(g, x, rate, mode, name, masks)
    }
}
