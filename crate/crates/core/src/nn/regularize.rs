//! AWD-style regularisers: variational and embedding dropout, DropConnect,
//! activation penalties and variable BPTT lengths.

use super::Mode;
use crate::rng::RngStream;
use crate::tensor::{bernoulli_mask, Graph, Tensor, Var};
use crate::Result;

/// Multiplies time-major rows `x` (`[len * batch, width]`) by one
/// `[batch, width]` mask reused at every timestep.
pub(super) fn variational(
    g: &mut Graph,
    x: Var,
    batch: usize,
    rate: f64,
    mode: &mut Mode,
    name: &str,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let v = g.value(x);
    let (rows, width) = (v.rows(), v.cols());
    let m = bernoulli_mask(rng, &[batch, width], 1.0 - rate)?;
    let tiled = m.tile_rows(rows / batch);
    masks.push((name.to_string(), tiled.clone()));
    let mv = g.constant(tiled);
    g.mul(x, mv)
}

/// Drops whole rows of the embedding table: one keep/drop decision per
/// word type for the current batch.
pub(super) fn embedding_rows(
    g: &mut Graph,
    table: Var,
    rate: f64,
    mode: &mut Mode,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(table) };
    if rate == 0.0 {
        return Ok(table);
    }
    let (v, e) = (g.value(table).rows(), g.value(table).cols());
    let rows = bernoulli_mask(rng, &[v, 1], 1.0 - rate)?;
    let m = Tensor::from_fn(&[v, e], |i| rows.data()[i / e]);
    masks.push(("embedding".into(), m.clone()));
    let mv = g.constant(m);
    g.mul(table, mv)
}

/// DropConnect: a single mask over a weight matrix for the whole batch.
pub(super) fn drop_connect(
    g: &mut Graph,
    w: Var,
    rate: f64,
    mode: &mut Mode,
    name: &str,
    masks: &mut Vec<(String, Tensor)>,
) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(w) };
    if rate == 0.0 {
        return Ok(w);
    }
    let m = bernoulli_mask(rng, g.value(w).shape(), 1.0 - rate)?;
    masks.push((name.to_string(), m.clone()));
    let mv = g.constant(m);
    g.mul(w, mv)
}

/// `alpha * mean(h^2)`.
pub fn ar_penalty(g: &mut Graph, h: Var, alpha: f64) -> Result<Var> {
    let ms = g.mean_square(h)?;
    g.scale(ms, alpha)
}

/// `beta * mean((h_t - h_{t-1})^2)` over time-major rows; `None` when the
/// segment has a single step.
pub fn tar_penalty(g: &mut Graph, h: Var, batch: usize, beta: f64) -> Result<Option<Var>> {
    let rows = g.value(h).rows();
    if rows <= batch {
        return Ok(None);
    }
    let later = g.slice_rows(h, batch, rows - batch)?;
    let earlier = g.slice_rows(h, 0, rows - batch)?;
    let d = g.sub(later, earlier)?;
    let ms = g.mean_square(d)?;
    Ok(Some(g.scale(ms, beta)?))
}

/// Variable BPTT length: half of `base` with probability 0.05, then
/// Gaussian jitter (sd 5), rounded and clamped to `[10, base + 20]`.
pub fn sample_bptt_len(base: usize, rng: &mut RngStream) -> usize {
    let centre = if rng.uniform() < 0.05 { base as f64 / 2.0 } else { base as f64 };
    let l = rng.normal(centre, 5.0).round();
    let hi = (base + 20) as f64;
    l.clamp(10.0_f64.min(hi), hi) as usize
}
