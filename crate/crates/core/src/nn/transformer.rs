//! Decoder-only Transformer with pre-norm blocks, learned positions and a
//! GELU feed-forward of four times the model width.

use super::{dropout, Bound, Forward, LanguageModel, LmConfig, Mode, ParamStore, State};
use crate::bpe::TokenId;
use crate::rng::RngStream;
use crate::tensor::{bernoulli_mask, Graph, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub(super) fn init(c: &LmConfig, params: &mut ParamStore, rng: &mut RngStream) {
    let d = c.hidden_dim;
    params.insert("pos", Tensor::normal(&[c.block_size, d], INIT_STD, rng));
    // residual projections are scaled down with depth
    let proj_std = INIT_STD / ((2 * c.n_layers) as f64).sqrt();
    for l in 0..c.n_layers {
        let pre = format!("tf.{l}");
        params.insert(format!("{pre}.ln1.g"), Tensor::ones(&[d]));
        params.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]));
        params.insert(format!("{pre}.attn.w"), Tensor::normal(&[d, 3 * d], INIT_STD, rng));
        params.insert(format!("{pre}.attn.b"), Tensor::zeros(&[3 * d]));
        params.insert(format!("{pre}.proj.w"), Tensor::normal(&[d, d], proj_std, rng));
        params.insert(format!("{pre}.proj.b"), Tensor::zeros(&[d]));
        params.insert(format!("{pre}.ln2.g"), Tensor::ones(&[d]));
        params.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]));
        params.insert(format!("{pre}.ff1.w"), Tensor::normal(&[d, 4 * d], INIT_STD, rng));
        params.insert(format!("{pre}.ff1.b"), Tensor::zeros(&[4 * d]));
        params.insert(format!("{pre}.ff2.w"), Tensor::normal(&[4 * d, d], proj_std, rng));
        params.insert(format!("{pre}.ff2.b"), Tensor::zeros(&[d]));
    }
    params.insert("ln_f.g", Tensor::ones(&[d]));
    params.insert("ln_f.b", Tensor::zeros(&[d]));
}

fn affine(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add_row(y, p.get(&format!("{name}.b"))?)
}

fn norm(g: &mut Graph, p: &Bound, x: Var, name: &str) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, LN_EPS)
}

pub(super) fn forward(
    m: &LanguageModel,
    g: &mut Graph,
    p: &Bound,
    inputs: &[TokenId],
    batch: usize,
    len: usize,
    mode: &mut Mode,
) -> Result<Forward> {
    let c = &m.config;
    if len > c.block_size {
        return Err(Error::Size(format!("sequence length {len} exceeds block size {}", c.block_size)));
    }
    let mut masks = Vec::new();
    let tok = g.embedding(p.get("embed")?, inputs)?;
    let positions: Vec<Option<usize>> = (0..batch * len).map(|r| Some(r % len)).collect();
    let pos = g.gather_rows(p.get("pos")?, &positions)?;
    let mut x = g.add(tok, pos)?;
    x = dropout(g, x, c.dropout.input, mode, "input", &mut masks)?;

    for l in 0..c.n_layers {
        let pre = format!("tf.{l}");
        let h = norm(g, p, x, &format!("{pre}.ln1"))?;
        let qkv = affine(g, p, h, &format!("{pre}.attn"))?;
        let attn_mask = match mode {
            Mode::Train(rng) if c.dropout.attention > 0.0 => {
                let mk = bernoulli_mask(rng, &[batch, c.n_heads, len, len], 1.0 - c.dropout.attention)?;
                masks.push((format!("attention.{l}"), mk.clone()));
                Some(mk)
            }
            _ => None,
        };
        let a = g.causal_attention(qkv, batch, len, c.n_heads, attn_mask)?;
        let a = affine(g, p, a, &format!("{pre}.proj"))?;
        let a = dropout(g, a, c.dropout.hidden, mode, &format!("attn_out.{l}"), &mut masks)?;
        x = g.add(x, a)?;

        let h = norm(g, p, x, &format!("{pre}.ln2"))?;
        let f = affine(g, p, h, &format!("{pre}.ff1"))?;
        let f = g.gelu(f)?;
        let f = affine(g, p, f, &format!("{pre}.ff2"))?;
        let f = dropout(g, f, c.dropout.hidden, mode, &format!("ff_out.{l}"), &mut masks)?;
        x = g.add(x, f)?;
    }
    let x = norm(g, p, x, "ln_f")?;
    let logits = m.project(g, p, x)?;
    Ok(Forward {
        logits,
        penalty: None,
        state: State::Empty,
        masks,
    })
}
