//! Criteria that train real models on the bundled sample corpora.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use salm_cli::config::load_experiment;
use salm_cli::experiment::{
    prepare_data, run_experiment, run_tokenizer, RunOptions, RunOutput, CHECKPOINT_FILE, REPORT_FILE, TOKENIZER_FILE,
};
use salm_core::corpus::RawCorpus;
use salm_core::eval::evaluate_neural;
use salm_core::nn::{Arch, LanguageModel, LmCheckpoint, LmConfig};
use salm_core::rng::RngStream;
use salm_core::train::{train, OptimizerKind, TrainConfig};

use crate::{ensure, Check};

const VOCAB: usize = 300;
const PART_BUDGET: Duration = Duration::from_secs(300);

fn within_budget(part: &str, start: Instant) -> Result<f64, String> {
    let took = start.elapsed();
    ensure(took <= PART_BUDGET, || format!("{part} took {:.0} s", took.as_secs_f64()))?;
    Ok(took.as_secs_f64())
}

fn data(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name);
    p.canonicalize().unwrap_or(p).display().to_string()
}

fn run(dir: &Path, name: &str, body: &str, seed: Option<u64>) -> Result<RunOutput, String> {
    let path = dir.join(format!("{name}.conf"));
    fs::write(&path, format!("[corpus]\nname = {name}\n{body}")).map_err(|e| e.to_string())?;
    run_experiment(&path, &RunOptions { runs_dir: dir.join("runs"), seed }).map_err(|e| format!("{name}: {e}"))
}

fn ngram_body(order: usize) -> String {
    format!("files = {}\n[tokenizer]\nvocab_size = {VOCAB}\n[model]\narch = ngram\norder = {order}\n", data("sample-zu.txt"))
}

fn transformer_body(files: &str, steps: usize, extra: &str) -> String {
    format!(
        "files = {files}\n[tokenizer]\nvocab_size = {VOCAB}\n\
         [model]\narch = transformer\nemb_dim = 64\nhidden_dim = 64\nn_layers = 2\nn_heads = 4\n\
         dropout_input = 0.1\ndropout_hidden = 0.1\ndropout_output = 0.1\ndropout_attention = 0.1\n\
         block_size = 64\nstride_train = 32\nstride_eval = 32\n\
         [train]\noptimizer = adamw\nlr = 0.003\nweight_decay = 0.01\nschedule = linear\nbatch_size = 8\n\
         max_steps = {steps}\neval_every = {}\npatience = 0\nvalid_tokens = 4000\nseed = 1\n{extra}",
        (steps / 4).max(1)
    )
}

pub fn behaviour() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();

    // (a) n-gram orders
    let start = Instant::now();
    let kn1 = run(dir, "kn1", &ngram_body(1), None)?;
    let kn6 = run(dir, "kn6", &ngram_body(6), None)?;
    let (b1, b6) = (kn1.report.bpc, kn6.report.bpc);
    ensure(b6 <= b1 - 0.10, || format!("(a) KN6 {b6:.4} vs KN1 {b1:.4}"))?;
    let ta = within_budget("(a)", start)?;
    eprintln!("  (a) KN1 {b1:.4} BPC, KN6 {b6:.4} BPC");


    // (b) tiny Transformer, 2000 steps, same tokenizer as the baseline
    let start = Instant::now();
    let tf = run(dir, "tf", &transformer_body(&data("sample-zu.txt"), 2000, ""), None)?;
    let bt = tf.report.bpc;
    ensure(run_tokenizer(&tf.dir).map(|t| t.hash()).ok() == run_tokenizer(&kn1.dir).map(|t| t.hash()).ok(), || "(b) tokenizers differ".into())?;
    ensure(bt < b1, || format!("(b) Transformer {bt:.4} vs KN1 {b1:.4}"))?;
    let tb = within_budget("(b)", start)?;
    eprintln!("  (b) Transformer {bt:.4} BPC");


    // (c) unregularised LSTM memorising a small slice of the training split
    let start = Instant::now();
    let (rise, train_loss, best_at, n_points) = overfit_lstm(&kn1.dir)?;
    ensure(train_loss < 0.5, || format!("(c) LSTM train loss only reached {train_loss:.3} nats"))?;
    ensure(rise > 0.0, || format!("(c) validation loss did not rise after its minimum (point {best_at} of {n_points})"))?;
    let tc = within_budget("(c)", start)?;
    Ok(format!(
        "(a) KN6 {b6:.3} <= KN1 {b1:.3} - 0.10 [{ta:.0} s]; (b) Transformer {bt:.3} < KN1 {b1:.3} [{tb:.0} s]; \
         (c) LSTM train loss {train_loss:.3} nats, validation +{rise:.3} nats after its minimum at point {best_at}/{n_points} [{tc:.0} s]"
    ))
}

/// Trains a basic LSTM without regularisation on a few hundred training
/// lines; returns (validation rise after the minimum, final train loss,
/// index of the minimum, number of validation points).
fn overfit_lstm(run_dir: &Path) -> Result<(f64, f64, usize, usize), String> {
    let tok = run_tokenizer(run_dir).map_err(|e| e.to_string())?;
    let (_, exp) = load_experiment(&run_dir.join("config.conf")).map_err(|e| e.to_string())?;
    let data = prepare_data(&exp).map_err(|e| e.to_string())?;
    let slice = RawCorpus::new("slice", data.train.lines[..OVERFIT_LINES].to_vec());
    let train_ids = tok.encode_stream(&slice);
    let valid_ids = tok.encode_stream(&data.valid);

    let mut c = LmConfig::new(Arch::Lstm, tok.vocab_size());
    c.emb_dim = 128;
    c.hidden_dim = 128;
    c.n_layers = 1;
    c.dropout = Default::default();
    c.tie_weights = false;
    c.bptt_len = 32;
    let mut tc = TrainConfig::for_arch(Arch::Lstm);
    tc.optimizer = OptimizerKind::AdamW;
    tc.lr = 0.005;
    tc.weight_decay = 0.0;
    tc.clip = 1.0;
    tc.batch_size = 8;
    tc.max_steps = OVERFIT_STEPS;
    tc.eval_every = 50;
    tc.patience = 0;
    tc.valid_tokens = 3000;
    tc.seed = 3;
    let model = LanguageModel::new(c, &mut RngStream::new(tc.seed)).map_err(|e| e.to_string())?;
    let outcome = train(model, &tc, &train_ids, &valid_ids).map_err(|e| e.to_string())?;
    let recs = &outcome.log.records;
    let valid: Vec<f64> = recs.iter().map(|r| r.valid_loss).collect();
    let (best_at, best) = valid.iter().copied().enumerate().fold((0, f64::INFINITY), |a, (i, v)| if v < a.1 { (i, v) } else { a });
    let rise = valid[best_at..].iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)) - best;
    let last_train = recs.last().and_then(|r| r.train_loss).unwrap_or(f64::INFINITY);
    for r in recs {
        eprintln!("  (c) step {} train {:.3} valid {:.3}", r.step, r.train_loss.unwrap_or(f64::NAN), r.valid_loss);
    }
    Ok((rise, last_train, best_at + 1, valid.len()))
}

const OVERFIT_LINES: usize = 150;
const OVERFIT_STEPS: usize = 800;

fn bytes(dir: &Path, file: &str) -> Result<Vec<u8>, String> {
    fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"))
}

pub fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let body = transformer_body(&data("sample-xh.txt"), 120, "");
    let mut dirs: Vec<PathBuf> = Vec::new();
    for i in 0..2 {
        let sub = tmp.path().join(format!("r{i}"));
        fs::create_dir_all(&sub).map_err(|e| e.to_string())?;
        dirs.push(run(&sub, "det", &body, Some(42))?.dir);
    }
    for file in [TOKENIZER_FILE, CHECKPOINT_FILE, REPORT_FILE] {
        let (a, b) = (bytes(&dirs[0], file)?, bytes(&dirs[1], file)?);
        ensure(a == b, || format!("{file} differs between runs"))?;
    }
    // and the checkpoint really is a usable model
    let ckpt = LmCheckpoint::load(&dirs[0].join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let tok = run_tokenizer(&dirs[0]).map_err(|e| e.to_string())?;
    let probe = RawCorpus::new("probe", vec!["Umntwana uyafunda.".into()]);
    let r = evaluate_neural(&ckpt, &tok, &probe, 64, 32, "probe").map_err(|e| e.to_string())?;
    ensure(r.bpc.is_finite(), || "reloaded checkpoint gives non-finite BPC".into())?;
    Ok(format!("two seed-42 runs: {TOKENIZER_FILE}, {CHECKPOINT_FILE}, {REPORT_FILE} byte-identical"))
}

pub fn multilingual() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = format!("{}, {}", data("sample-zu.txt"), data("sample-xh.txt"));
    let out = run(tmp.path(), "multi", &transformer_body(&files, 100, "[eval]\nsource = sample-zu\n"), None)?;
    ensure(out.train_sources == ["sample-zu", "sample-xh"], || format!("train sources {:?}", out.train_sources))?;
    ensure(out.report.dataset == "sample-zu.test", || format!("evaluated on {}", out.report.dataset))?;
    ensure(out.report.model == "transformer@sample-zu+sample-xh", || format!("model tagged {}", out.report.model))?;
    ensure(out.report.bpc.is_finite(), || "non-finite BPC".into())?;

    let (_, exp) = load_experiment(&out.dir.join("config.conf")).map_err(|e| e.to_string())?;
    let data = prepare_data(&exp).map_err(|e| e.to_string())?;
    let (zu, xh) = (&data.splits[0], &data.splits[1]);
    ensure(data.train.len() == zu.train.len() + xh.train.len(), || "training set is not the concatenation".into())?;
    ensure(data.test.lines == zu.test.lines, || "test set is not the isiZulu test split".into())?;
    let tok = run_tokenizer(&out.dir).map_err(|e| e.to_string())?;
    let n: usize = tok.encode_corpus(&zu.test).iter().map(|s| s.ids.len()).sum();
    ensure(out.report.n_tokens as usize == n, || format!("scored {} tokens, isiZulu test has {n}", out.report.n_tokens))?;
    Ok(format!(
        "trained on {} lines from sample-zu+sample-xh, scored {} sample-zu test tokens, BPC {:.3}",
        data.train.len(),
        n,
        out.report.bpc
    ))
}
