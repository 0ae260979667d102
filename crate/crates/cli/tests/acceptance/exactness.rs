//! Criteria checked against exact oracles: BPE, Kneser-Ney, metrics, windows.

use salm_core::bpe::{min_vocab_size, train_bpe, TokenSequence, TokenizerModel, WORD_MARKER};
use salm_core::corpus::RawCorpus;
use salm_core::eval::{evaluate_neural, neural_log2probs, EvalReport};
use salm_core::ngram::{count_ngrams, estimate_mkn, read_arpa, write_arpa};
use salm_core::nn::{Arch, LanguageModel, LmCheckpoint, LmConfig, Mode, State};
use salm_core::rng::RngStream;
use salm_core::tensor::{Graph, Tensor};
use salm_core::train::{make_windows, WindowMode};
use salm_oracles::{bpe as bpe_oracle, kn::KneserNey, schedule};

use crate::{ensure, Check};

fn random_line(rng: &mut RngStream, alphabet: &[char], max_words: usize) -> String {
    (0..1 + rng.below(max_words))
        .map(|_| (0..1 + rng.below(8)).map(|_| alphabet[rng.below(alphabet.len())]).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn bpe_oracle() -> Check {
    let mut rng = RngStream::new(101);
    let alphabets: [&[char]; 3] = [&['a', 'b', 'c', 'd', 'e'], &['a', 'e', 'i', 'o', 'u', 'n', 'g', 'z'], &['k', 'ü', 'ɓ', 'a', 'h']];
    let (mut merges_checked, mut lines_checked) = (0, 0);
    for case in 0..20 {
        let alphabet = alphabets[case % alphabets.len()];
        let mut lines = Vec::new();
        let mut chars = 0;
        loop {
            let line = random_line(&mut rng, alphabet, 8);
            if chars + line.chars().count() > 2000 {
                break;
            }
            chars += line.chars().count();
            lines.push(line);
        }
        let corpus = RawCorpus::new("c", lines.clone());
        let budget = min_vocab_size(&corpus) + 1 + rng.below(120);
        let model = train_bpe(&corpus, budget).map_err(|e| e.to_string())?;
        let expected = bpe_oracle::learn_merges(&lines, budget);
        ensure(model.merges() == &expected[..], || format!("corpus {case}: merge lists differ"))?;
        merges_checked += expected.len();

        // round trip on fresh text over the same alphabet
        for _ in 0..50 {
            let line = random_line(&mut rng, alphabet, 10);
            let ids = model.encode_line(&line).ids;
            ensure(!ids.contains(&0), || format!("corpus {case}: <unk> in {line:?}"))?;
            let back = model.decode(&ids).map_err(|e| e.to_string())?;
            ensure(back == format!("{line}\n"), || format!("corpus {case}: {line:?} decoded as {back:?}"))?;
            lines_checked += 1;
        }
    }
    Ok(format!("20 corpora, {merges_checked} merges identical, {lines_checked}/{lines_checked} lines round-trip"))
}

pub fn kneser_ney() -> Check {
    const V: usize = 7;
    let vocab: Vec<String> = ["<unk>", "</s>"].iter().map(|s| s.to_string()).chain((2..V).map(|i| format!("t{i}"))).collect();
    let mut rng = RngStream::new(202);
    let sentence = |rng: &mut RngStream| -> Vec<u32> {
        let mut s: Vec<u32> = (0..rng.below(10)).map(|_| 2 + rng.below(V - 2) as u32).collect();
        s.push(1);
        s
    };
    let (mut contexts, mut scores, mut worst_sum, mut worst_score, mut worst_arpa) = (0, 0, 0f64, 0f64, 0f64);
    for case in 0..10 {
        let sents: Vec<Vec<u32>> = (0..4 + rng.below(20)).map(|_| sentence(&mut rng)).collect();
        let probe: Vec<Vec<u32>> = (0..10).map(|_| sentence(&mut rng)).collect();
        let seqs: Vec<TokenSequence> = sents.iter().map(|s| TokenSequence { ids: s.clone(), char_len: s.len() }).collect();
        for order in 1..=6 {
            let m = estimate_mkn(&count_ngrams(&seqs, order, &vocab).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            for len in 1..order {
                for h in m.backoffs(len).keys() {
                    let mass: f64 = (0..V as u32).map(|w| m.log2_prob(h, w).exp2()).sum();
                    worst_sum = worst_sum.max((mass - 1.0).abs());
                    contexts += 1;
                }
            }
            let oracle = KneserNey::new(&sents, V, order, V as u32);
            let text = write_arpa(&m);
            let back = read_arpa(&text).map_err(|e| e.to_string())?;
            for s in sents.iter().chain(&probe) {
                let seq = TokenSequence { ids: s.clone(), char_len: 0 };
                for (a, b) in m.token_log2_probs(&seq).iter().zip(oracle.sentence_log2probs(s)) {
                    worst_score = worst_score.max((a - b).abs());
                    scores += 1;
                }
                worst_arpa = worst_arpa.max((m.score_sequence(&seq) - back.score_sequence(&seq)).abs());
            }
        }
        ensure(worst_sum < 1e-9, || format!("corpus {case}: context mass off by {worst_sum:e}"))?;
        ensure(worst_score < 1e-9, || format!("corpus {case}: oracle mismatch {worst_score:e}"))?;
        ensure(worst_arpa < 1e-6, || format!("corpus {case}: ARPA round-trip off by {worst_arpa:e}"))?;
    }
    Ok(format!(
        "{contexts} contexts sum to 1 (max dev {worst_sum:.1e}); {scores} scores match oracle (max {worst_score:.1e}); ARPA max {worst_arpa:.1e}"
    ))
}

pub fn metrics() -> Check {
    let mut rng = RngStream::new(303);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = 1 + rng.below(1_000_000) as u64;
        let c = 1 + rng.below(5_000_000) as u64;
        let total = -rng.uniform() * 20.0 * n as f64;
        let r = EvalReport::from_totals("d", "m", 1, 1, n, c, total).map_err(|e| e.to_string())?;
        let h = -total / n as f64;
        for (got, want) in [(r.cross_entropy_bits_per_token, h), (r.perplexity, h.exp2()), (r.bpc, -total / c as f64), (r.bpc, n as f64 / c as f64 * h)] {
            worst = worst.max(rel(got, want));
        }
    }
    ensure(worst < 1e-12, || format!("identity off by {worst:e}"))?;

    // every character its own token, a newline per EOS: n == c with V = 256
    let letters: Vec<char> = (0x100u32..0x17E).filter_map(char::from_u32).collect();
    let mut merges: Vec<(String, String)> = letters.iter().map(|c| (WORD_MARKER.to_string(), c.to_string())).collect();
    merges.push((letters[0].to_string(), letters[1].to_string()));
    let mut alphabet = letters.clone();
    alphabet.push(WORD_MARKER);
    let tok = TokenizerModel::from_parts(&alphabet, &merges).map_err(|e| e.to_string())?;
    let lines: Vec<String> = (0..40)
        .map(|_| (0..1 + rng.below(12)).map(|_| letters[2 + rng.below(letters.len() - 2)]).collect())
        .collect();
    let mut c = LmConfig::new(Arch::Lstm, 256);
    c.emb_dim = 4;
    c.hidden_dim = 4;
    c.n_layers = 1;
    let mut model = LanguageModel::new(c, &mut RngStream::new(0)).map_err(|e| e.to_string())?;
    for t in model.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let ckpt = LmCheckpoint { model, tokenizer_hash: tok.hash() };
    let r = evaluate_neural(&ckpt, &tok, &RawCorpus::new("uniform", lines), 128, 64, "uniform").map_err(|e| e.to_string())?;
    ensure(tok.vocab_size() == 256 && r.n_tokens == r.c_chars, || format!("fixture has V={} n={} c={}", tok.vocab_size(), r.n_tokens, r.c_chars))?;
    let shown = format!("{:.6}", r.bpc);
    ensure(shown == "8.000000", || format!("uniform BPC {shown}"))?;
    Ok(format!("1000 triples within {worst:.1e}; uniform V=256 fixture BPC {shown}"))
}

pub fn windows() -> Check {
    let (block, stride) = (128, 64);
    let mut rng = RngStream::new(404);
    for _ in 0..50 {
        let n = 1 + rng.below(5000);
        let ws = make_windows(n, block, stride, WindowMode::Eval).map_err(|e| e.to_string())?;
        let scored: Vec<(usize, usize)> = ws.iter().map(|w| (w.scored.start, w.scored.end)).collect();
        let cover = schedule::coverage(n, &scored);
        ensure(cover.iter().all(|&c| c == 1), || format!("length {n}: coverage {:?}", cover.iter().max()))?;
        ensure(ws.iter().all(|w| w.len <= block), || format!("length {n}: window longer than {block}"))?;
    }

    // through a real model: one score per token, and the first block's
    // scores equal a single unstrided pass
    let mut c = LmConfig::new(Arch::Transformer, 17);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.block_size = block;
    c.stride_eval = stride;
    let model = LanguageModel::new(c, &mut RngStream::new(5)).map_err(|e| e.to_string())?;
    let stream: Vec<u32> = (0..700).map(|_| rng.below(17) as u32).collect();
    let lp = neural_log2probs(&model, &stream, block, stride).map_err(|e| e.to_string())?;
    ensure(lp.len() == stream.len() && lp.iter().all(|x| x.is_finite() && *x < 0.0), || "missing or invalid scores".into())?;
    let mut inputs = vec![salm_core::bpe::EOS_ID];
    inputs.extend_from_slice(&stream[..block - 1]);
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let out = model.forward(&mut g, &p, &inputs, 1, &State::Empty, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let logits: &Tensor = g.value(out.logits);
    for (t, &want) in lp.iter().take(block).enumerate() {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let got = (row[stream[t] as usize] - lse) / std::f64::consts::LN_2;
        ensure((got - want).abs() < 1e-9, || format!("position {t}: {got} vs {want}"))?;
    }
    Ok("50 stream lengths fully covered exactly once; 700-token model pass scores 700 tokens".into())
}
