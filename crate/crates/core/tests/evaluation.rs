use salm_core::bpe::{train_bpe, TokenizerModel, WORD_MARKER};
use salm_core::corpus::RawCorpus;
use salm_core::eval::{compare_report, evaluate_neural, evaluate_ngram, neural_log2probs, EvalReport};
use salm_core::ngram::{count_ngrams, estimate_mkn};
use salm_core::nn::{Arch, LanguageModel, LmCheckpoint, LmConfig};
use salm_core::rng::RngStream;
use salm_core::tensor::Tensor;
use salm_core::Error;

#[test]
fn metric_identities_on_random_totals() {
    let mut rng = RngStream::new(17);
    for _ in 0..1000 {
        let n = 1 + rng.below(1_000_000) as u64;
        let c = 1 + rng.below(5_000_000) as u64;
        let total = -rng.uniform() * 20.0 * n as f64;
        let r = EvalReport::from_totals("d", "m", 1, 2, n, c, total).unwrap();
        let h = -total / n as f64;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        assert!(rel(r.cross_entropy_bits_per_token, h) < 1e-12);
        assert!(rel(r.perplexity, 2f64.powf(h)) < 1e-12);
        assert!(rel(r.bpc, -total / c as f64) < 1e-12);
        assert!(rel(r.bpc, n as f64 / c as f64 * h) < 1e-12);
    }
}

#[test]
fn half_probability_tokens() {
    let r = EvalReport::from_totals("d", "m", 1, 2, 100, 200, -100.0).unwrap();
    assert_eq!(r.cross_entropy_bits_per_token, 1.0);
    assert_eq!(r.perplexity, 2.0);
    assert_eq!(r.bpc, 0.5);
}

/// 126 letters, each also merged with the word marker, plus one extra merge
/// and the three fixed symbols: 256 tokens. Single-word lines then give one
/// token per character and EOS per newline, so n == c.
fn char_tokenizer() -> (TokenizerModel, Vec<char>) {
    let letters: Vec<char> = (0x100u32..0x17E).map(|u| char::from_u32(u).unwrap()).collect();
    let mut merges: Vec<(String, String)> = letters.iter().map(|c| (WORD_MARKER.to_string(), c.to_string())).collect();
    merges.push((letters[0].to_string(), letters[1].to_string()));
    let mut alphabet = letters.clone();
    alphabet.push(WORD_MARKER);
    let tok = TokenizerModel::from_parts(&alphabet, &merges).unwrap();
    (tok, letters)
}

#[test]
fn uniform_model_over_256_tokens_gives_eight_bits_per_character() {
    let (tok, letters) = char_tokenizer();
    assert_eq!(tok.vocab_size(), 256);
    let mut rng = RngStream::new(1);
    let lines: Vec<String> = (0..40)
        .map(|_| {
            // avoid the extra merge so every character stays one token
            let mut w = String::new();
            while w.chars().count() < 1 + rng.below(12) {
                let c = letters[2 + rng.below(letters.len() - 2)];
                w.push(c);
            }
            w
        })
        .collect();
    let test = RawCorpus::new("uniform", lines);

    let mut c = LmConfig::new(Arch::Lstm, 256);
    c.emb_dim = 4;
    c.hidden_dim = 4;
    c.n_layers = 1;
    let mut model = LanguageModel::new(c, &mut RngStream::new(0)).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for n in names {
        let shape = model.params.get(&n).unwrap().shape().to_vec();
        model.params.insert(n, Tensor::zeros(&shape));
    }
    let ckpt = LmCheckpoint {
        model,
        tokenizer_hash: tok.hash(),
    };
    let r = evaluate_neural(&ckpt, &tok, &test, 128, 64, "uniform").unwrap();
    assert_eq!(r.n_tokens, r.c_chars);
    assert!((r.bpc - 8.0).abs() < 1e-12, "{}", r.bpc);
    assert_eq!(format!("{:.6}", r.bpc), "8.000000");
}

fn sample_text() -> RawCorpus {
    let words = ["ngiyabonga", "umuntu", "abantu", "ukudla", "izinja", "inja", "amanzi", "ngiyakuthanda"];
    let mut rng = RngStream::new(4);
    let lines = (0..120)
        .map(|_| (0..1 + rng.below(7)).map(|_| words[rng.below(words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    RawCorpus::new("sample", lines)
}

#[test]
fn character_denominator_is_tokenizer_independent() {
    let text = sample_text();
    let test = RawCorpus::new("test", text.lines[..30].to_vec());
    let train = RawCorpus::new("train", text.lines[30..].to_vec());
    let mut chars = Vec::new();
    for budget in [30, 60] {
        let tok = train_bpe(&train, budget).unwrap();
        let counts = count_ngrams(&tok.encode_corpus(&train), 3, tok.tokens()).unwrap();
        let model = estimate_mkn(&counts).unwrap();
        let r = evaluate_ngram(&model, &tok, &test, "kn").unwrap();
        let direct: f64 = tok.encode_corpus(&test).iter().map(|s| model.score_sequence(s)).sum();
        assert!((r.total_log2prob - direct).abs() < 1e-9);
        chars.push(r.c_chars);
    }
    assert_eq!(chars[0], chars[1]);
}

#[test]
fn strided_equals_unstrided_within_one_block() {
    let mut c = LmConfig::new(Arch::Transformer, 20);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.block_size = 32;
    c.stride_train = 8;
    c.stride_eval = 8;
    let m = LanguageModel::new(c, &mut RngStream::new(2)).unwrap();
    let mut rng = RngStream::new(3);
    let stream: Vec<u32> = (0..30).map(|_| rng.below(20) as u32).collect();
    assert_eq!(neural_log2probs(&m, &stream, 32, 32).unwrap(), neural_log2probs(&m, &stream, 32, 8).unwrap());
}

#[test]
fn strided_eval_scores_every_token_once() {
    let mut c = LmConfig::new(Arch::Transformer, 20);
    c.emb_dim = 8;
    c.hidden_dim = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.block_size = 16;
    c.stride_train = 8;
    c.stride_eval = 8;
    let m = LanguageModel::new(c, &mut RngStream::new(2)).unwrap();
    let mut rng = RngStream::new(3);
    for n in [1, 15, 16, 17, 100, 129] {
        let stream: Vec<u32> = (0..n).map(|_| rng.below(20) as u32).collect();
        let lp = neural_log2probs(&m, &stream, 16, 8).unwrap();
        assert_eq!(lp.len(), n);
        assert!(lp.iter().all(|x| x.is_finite() && *x < 0.0));
        // the first block is scored with full left context from the start
        let first = neural_log2probs(&m, &stream[..n.min(16)], 16, 16).unwrap();
        assert_eq!(&lp[..n.min(16)], &first[..]);
    }
}

#[test]
fn tokenizer_mismatch_is_an_integrity_error() {
    let text = sample_text();
    let tok = train_bpe(&text, 40).unwrap();
    let other = train_bpe(&text, 45).unwrap();
    let mut c = LmConfig::new(Arch::Lstm, tok.vocab_size());
    c.emb_dim = 4;
    c.hidden_dim = 4;
    let ckpt = LmCheckpoint {
        model: LanguageModel::new(c, &mut RngStream::new(0)).unwrap(),
        tokenizer_hash: other.hash(),
    };
    let err = evaluate_neural(&ckpt, &tok, &text, 128, 64, "m").unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err}");
}

#[test]
fn multilingual_comparison_fixture_renders() {
    let row = |model: &str, bpc: f64| EvalReport::from_totals("isiZulu", model, 0, 0, 1000, 1000, -bpc * 1000.0).unwrap();
    let cmp = compare_report(&[row("monolingual", 1.391), row("all-languages", 1.298)]).unwrap();
    let lines: Vec<&str> = cmp.tsv.lines().collect();
    assert_eq!(lines[0], "dataset\tmodel\tparams\tvocab\tbpc\tppl\txent");
    assert!(lines[1].starts_with("isiZulu\tall-languages\t") && lines[1].contains("\t1.298\t"));
    assert!(lines[2].starts_with("isiZulu\tmonolingual\t") && lines[2].contains("\t1.391\t"));
    assert!(cmp.table.contains("1.298") && cmp.table.contains("1.391"));
}

#[test]
fn report_json_round_trip() {
    let r = EvalReport::from_totals("zu", "kn6", 123, 500, 1000, 4000, -1234.5).unwrap();
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
}
