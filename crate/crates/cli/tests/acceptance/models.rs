//! Criteria on the autodiff engine and the neural architectures.

use std::cell::RefCell;

use salm_core::nn::{Arch, LanguageModel, LmConfig, Mode, State};
use salm_core::rng::RngStream;
use salm_core::tensor::{Graph, Sgd, Tensor, Var};
use salm_core::train::compute_gradients;
use salm_oracles::fd;

use crate::{ensure, Check};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Op = Box<dyn Fn(&mut Graph, &[Var]) -> salm_core::Result<Var>>;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut RngStream::new(seed))
}

/// Largest relative error of d/dx sum(op(x) * R) over every input coordinate.
fn op_error(inputs: &[Tensor], op: &Op) -> f64 {
    let weights = RefCell::new(None::<Tensor>);
    let run = |xs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        let shape = g.value(out).shape().to_vec();
        let r = weights.borrow_mut().get_or_insert_with(|| rand(&shape, 99)).clone();
        let rv = g.constant(r);
        let prod = g.mul(out, rv).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let gs = vars.iter().map(|&v| grads.get_or_zeros(v, &g)).collect();
        (g.value(loss).item(), gs)
    };
    let (_, analytic) = run(inputs);
    let mut worst = 0f64;
    for (k, x) in inputs.iter().enumerate() {
        let mut flat = x.data().to_vec();
        let coords: Vec<usize> = (0..flat.len()).collect();
        let f = |v: &[f64]| {
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::new(x.shape(), v.to_vec()).unwrap();
            run(&xs).0
        };
        worst = worst.max(fd::max_error(f, &mut flat, analytic[k].data(), &coords, STEP).0);
    }
    worst
}

fn layer_cases() -> Vec<(&'static str, Vec<Tensor>, Op)> {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    let sq = rand(&[3, 5], 3);
    let kinkless = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    let gates = rand(&[6, 4], 4).map(|x| 1.0 / (1.0 + (-x).exp()));
    let mut cases: Vec<(&'static str, Vec<Tensor>, Op)> = vec![
        ("matmul", vec![rand(&[3, 4], 5), rand(&[4, 5], 6)], Box::new(|g, v| g.matmul_t(v[0], v[1], false, false))),
        ("matmul^T", vec![rand(&[4, 3], 5), rand(&[5, 4], 6)], Box::new(|g, v| g.matmul_t(v[0], v[1], true, true))),
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("tanh", vec![a.clone()], Box::new(|g, v| g.tanh(v[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| g.sigmoid(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|g, v| g.gelu(v[0]))),
        ("relu", vec![kinkless], Box::new(|g, v| g.relu(v[0]))),
        ("add_row", vec![a.clone(), rand(&[4], 7)], Box::new(|g, v| g.add_row(v[0], v[1]))),
        ("softmax", vec![sq.clone()], Box::new(|g, v| g.softmax_rows(v[0]))),
        ("layer_norm", vec![sq.clone(), rand(&[5], 8), rand(&[5], 9)], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("mean_square", vec![sq.clone()], Box::new(|g, v| g.mean_square(v[0]))),
        ("concat_cols", vec![a.clone(), rand(&[3, 2], 10)], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", vec![a.clone(), rand(&[2, 4], 11)], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("slice", vec![a.clone()], Box::new(|g, v| g.slice_cols(v[0], 1, 2))),
        ("gather_rows", vec![a.clone()], Box::new(|g, v| g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]))),
        ("attention", vec![rand(&[8, 18], 12)], Box::new(|g, v| g.causal_attention(v[0], 2, 4, 2, None))),
        ("fo_pool", vec![gates, rand(&[6, 4], 13), rand(&[2, 4], 14)], Box::new(|g, v| g.fo_pool(v[0], v[1], Some(v[2]), 2))),
        ("cross_entropy", vec![rand(&[4, 7], 15)], Box::new(|g, v| g.cross_entropy(v[0], &[3, 0, 6, 2], Some(&[1.0, 0.0, 2.0, 0.5])))),
    ];
    cases.push(("reshape", vec![a], Box::new(|g, v| {
        let r = g.reshape(v[0], &[6, 2])?;
        g.tanh(r)
    })));
    cases
}

fn tiny(arch: Arch) -> LmConfig {
    let mut c = LmConfig::new(arch, 11);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 2;
    c.context_order = 3;
    c.n_heads = 2;
    c.block_size = 8;
    c.stride_train = 4;
    c.stride_eval = 8;
    c.bptt_len = 5;
    c.tie_weights = true;
    c
}

/// Gradient of loss + penalty (masks replayed from a fixed seed) against
/// central differences on sampled parameters.
fn model_error(config: LmConfig, train_mode: bool, samples: usize) -> f64 {
    let model = LanguageModel::new(config, &mut RngStream::new(21)).unwrap();
    let (batch, len) = (2, 5);
    let mut rng = RngStream::new(22);
    let inputs: Vec<u32> = (0..batch * len).map(|_| rng.below(11) as u32).collect();
    let targets: Vec<u32> = (0..batch * len).map(|_| rng.below(11) as u32).collect();
    let objective = |m: &LanguageModel| -> (f64, Vec<Tensor>) {
        let mut mask_rng = RngStream::new(23);
        let mut mode = if train_mode { Mode::Train(&mut mask_rng) } else { Mode::Eval };
        let r = compute_gradients(m, &inputs, &targets, batch, &State::Empty, &mut mode).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let mut mask_rng = RngStream::new(23);
        let mut mode = if train_mode { Mode::Train(&mut mask_rng) } else { Mode::Eval };
        let out = m.forward(&mut g, &p, &inputs, batch, &State::Empty, &mut mode).unwrap();
        let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        let ce = g.cross_entropy(out.logits, &t, None).unwrap();
        let total = match out.penalty {
            Some(pen) => g.add(ce, pen).unwrap(),
            None => ce,
        };
        (g.value(total).item(), r.grads)
    };
    let analytic: Vec<f64> = objective(&model).1.iter().flat_map(|t| t.data().to_vec()).collect();
    let mut flat: Vec<f64> = model.params.entries().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut pick = RngStream::new(24);
    let coords: Vec<usize> = (0..samples).map(|_| pick.below(flat.len())).collect();
    let mut scratch = model.clone();
    let f = |v: &[f64]| {
        let mut off = 0;
        for t in scratch.params.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        objective(&scratch).0
    };
    fd::max_error(f, &mut flat, &analytic, &coords, STEP).0
}

pub fn gradients() -> Check {
    let mut worst = (0f64, String::new());
    let mut note = |name: String, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
    };
    let cases = layer_cases();
    let n_ops = cases.len();
    for (name, inputs, op) in &cases {
        note(name.to_string(), op_error(inputs, op));
    }
    for arch in Arch::ALL {
        note(format!("{arch} eval"), model_error(tiny(arch), false, 50));
        let mut c = tiny(arch);
        c.dropout.input = 0.2;
        c.dropout.hidden = 0.2;
        c.dropout.output = 0.2;
        if matches!(arch, Arch::AwdLstm | Arch::Qrnn) {
            c.dropout.embedding = 0.1;
            c.ar_alpha = 2.0;
            c.tar_beta = 1.0;
        }
        if arch == Arch::AwdLstm {
            c.dropout.weight = 0.3;
        }
        if arch == Arch::Transformer {
            c.dropout.attention = 0.2;
        }
        note(format!("{arch} train"), model_error(c, true, 50));
    }
    ensure(worst.0 < TOL, || format!("{} relative error {:.2e}", worst.1, worst.0))?;
    Ok(format!("{n_ops} layers and {} architectures (eval and train mode); max relative error {:.2e} ({})", Arch::ALL.len(), worst.0, worst.1))
}

fn model(c: LmConfig, seed: u64) -> LanguageModel {
    LanguageModel::new(c, &mut RngStream::new(seed)).unwrap()
}

fn config(arch: Arch, v: usize) -> LmConfig {
    let mut c = LmConfig::new(arch, v);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 2;
    c.context_order = 4;
    c.n_heads = 2;
    c.block_size = 16;
    c.stride_train = 8;
    c.stride_eval = 8;
    c.bptt_len = 8;
    c
}

fn forward(m: &LanguageModel, x: &[u32], batch: usize, state: &State, rng: Option<&mut RngStream>) -> (Tensor, State, Vec<(String, Tensor)>) {
    let mut g = Graph::new();
    let p = m.bind(&mut g);
    let mut mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let out = m.forward(&mut g, &p, x, batch, state, &mut mode).unwrap();
    (g.value(out.logits).clone(), out.state, out.masks)
}

fn tokens(n: usize, v: usize, rng: &mut RngStream) -> Vec<u32> {
    (0..n).map(|_| rng.below(v) as u32).collect()
}

pub fn invariants() -> Check {
    const V: usize = 13;
    let mut rng = RngStream::new(505);
    let seeds = 20;

    // causality: tokens after t never change logits at or before t
    for seed in 0..seeds {
        let m = model(config(Arch::Transformer, V), seed);
        let (batch, len) = (2, 12);
        let a = tokens(batch * len, V, &mut rng);
        let cut = rng.below(len - 1);
        let mut b = a.clone();
        for row in 0..batch {
            for t in cut + 1..len {
                b[row * len + t] = rng.below(V) as u32;
            }
        }
        let (la, _, _) = forward(&m, &a, batch, &State::Empty, None);
        let (lb, _, _) = forward(&m, &b, batch, &State::Empty, None);
        for row in 0..batch {
            for t in 0..=cut {
                ensure(la.row(row * len + t) == lb.row(row * len + t), || format!("causality broken at t={t} (cut {cut})"))?;
            }
        }
    }

    // QRNN: one pass over T steps equals T single steps
    let mut qrnn_worst = 0f64;
    for seed in 0..seeds {
        let m = model(config(Arch::Qrnn, V), seed);
        let (batch, len) = (2, 7);
        let x = tokens(batch * len, V, &mut rng);
        let (whole, _, _) = forward(&m, &x, batch, &State::Empty, None);
        let mut state = State::Empty;
        for t in 0..len {
            let step: Vec<u32> = (0..batch).map(|b| x[b * len + t]).collect();
            let (logits, next, _) = forward(&m, &step, batch, &state, None);
            state = next;
            for b in 0..batch {
                for (p, q) in logits.row(b).iter().zip(whole.row(b * len + t)) {
                    qrnn_worst = qrnn_worst.max((p - q).abs());
                }
            }
        }
    }
    ensure(qrnn_worst < 1e-6, || format!("QRNN parallel vs sequential {qrnn_worst:e}"))?;

    // variational masks: one mask per sequence, reused at every step
    for arch in [Arch::AwdLstm, Arch::Qrnn] {
        for seed in 0..seeds {
            let mut c = config(arch, V);
            c.dropout.input = 0.4;
            c.dropout.hidden = 0.3;
            c.dropout.output = 0.4;
            let m = model(c, seed);
            let (batch, len) = (3, 6);
            let x = tokens(batch * len, V, &mut rng);
            let (_, _, masks) = forward(&m, &x, batch, &State::Empty, Some(&mut RngStream::new(seed + 7)));
            let mut seen = 0;
            for (name, mask) in masks.iter().filter(|(n, _)| n == "input" || n == "output" || n.starts_with("hidden.")) {
                seen += 1;
                for t in 1..len {
                    for b in 0..batch {
                        ensure(mask.row(t * batch + b) == mask.row(b), || format!("{arch} mask {name} varies at t={t}"))?;
                    }
                }
            }
            ensure(seen >= 3, || format!("{arch}: only {seen} variational masks recorded"))?;
        }
    }

    // DropConnect: one weight mask for the whole batch
    for seed in 0..seeds {
        let mut c = config(Arch::AwdLstm, V);
        c.dropout = Default::default();
        c.dropout.weight = 0.5;
        let m = model(c, seed);
        let batch = 4;
        let row = tokens(5, V, &mut rng);
        let x: Vec<u32> = (0..batch).flat_map(|_| row.clone()).collect();
        let (logits, _, masks) = forward(&m, &x, batch, &State::Empty, Some(&mut RngStream::new(seed)));
        ensure(masks.iter().any(|(n, _)| n == "weight.0"), || "no DropConnect mask recorded".into())?;
        for b in 1..batch {
            for t in 0..5 {
                ensure(logits.row(b * 5 + t) == logits.row(t), || format!("DropConnect differs across the batch (row {b})"))?;
            }
        }
    }

    // tied weights: the shared matrix stays one matrix through updates
    for arch in Arch::ALL {
        let mut c = config(arch, V);
        c.tie_weights = true;
        let mut m = model(c, 11);
        ensure(m.params.get("out.weight").is_none(), || format!("{arch}: tied model has an output matrix"))?;
        let x = tokens(12, V, &mut rng);
        let y = tokens(12, V, &mut rng);
        let mut sgd = Sgd { lr: 0.5 };
        for _ in 0..3 {
            let r = compute_gradients(&m, &x, &y, 2, &State::Empty, &mut Mode::Eval).map_err(|e| e.to_string())?;
            sgd.step(&mut m.params.tensors_mut(), &r.grads).map_err(|e| e.to_string())?;
        }
        let mut untied = m.clone();
        untied.config.tie_weights = false;
        untied.params.insert("out.weight", m.params.get("embed").unwrap().clone());
        let (a, _, _) = forward(&m, &x, 2, &State::Empty, None);
        let (b, _, _) = forward(&untied, &x, 2, &State::Empty, None);
        ensure(a == b, || format!("{arch}: tied logits diverge from embedding-as-output"))?;
    }
    Ok(format!(
        "causality exact over {seeds} seeds; QRNN max diff {qrnn_worst:.1e}; variational and DropConnect masks constant; tied updates coherent for all {} architectures",
        Arch::ALL.len()
    ))
}
