use proptest::prelude::*;
use salm_core::bpe::{min_vocab_size, train_bpe, TokenizerModel, EOS_ID, WORD_MARKER};
use salm_core::corpus::RawCorpus;
use salm_oracles::bpe as oracle;

/// Lines over a small alphabet so that merges are plentiful.
fn corpus_lines() -> impl Strategy<Value = Vec<String>> {
    let word = proptest::string::string_regex("[abcdeü]{1,7}").unwrap();
    let line = proptest::collection::vec(word, 1..8).prop_map(|ws| ws.join(" "));
    proptest::collection::vec(line, 1..25)
}

fn owned_merges(model: &TokenizerModel) -> Vec<(String, String)> {
    model.merges().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn merges_equal_brute_force(lines in corpus_lines(), extra in 1usize..60) {
        let corpus = RawCorpus::new("p", lines.clone());
        let budget = min_vocab_size(&corpus) + extra;
        let model = train_bpe(&corpus, budget).unwrap();
        prop_assert_eq!(owned_merges(&model), oracle::learn_merges(&lines, budget));
        prop_assert!(model.vocab_size() <= budget);
    }

    #[test]
    fn smaller_budget_gives_prefix(lines in corpus_lines(), a in 1usize..40, b in 1usize..40) {
        let corpus = RawCorpus::new("p", lines);
        let base = min_vocab_size(&corpus);
        let (lo, hi) = (base + a.min(b), base + a.max(b));
        let small = owned_merges(&train_bpe(&corpus, lo).unwrap());
        let large = owned_merges(&train_bpe(&corpus, hi).unwrap());
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn round_trip_on_covered_text(lines in corpus_lines(), extra in 1usize..40, probe in corpus_lines()) {
        let corpus = RawCorpus::new("p", lines.clone());
        let model = train_bpe(&corpus, min_vocab_size(&corpus) + extra).unwrap();
        let covered = oracle::alphabet(&lines);
        for line in probe {
            let line: String = line.chars().filter(|c| *c == ' ' || covered.contains(c)).collect();
            let normal = line.split_whitespace().collect::<Vec<_>>().join(" ");
            let ids = model.encode_line(&normal).ids;
            prop_assert!(!ids.contains(&0), "unexpected <unk> in {normal:?}");
            prop_assert_eq!(model.decode(&ids).unwrap(), format!("{normal}\n"));
        }
    }

    #[test]
    fn marker_only_starts_tokens(lines in corpus_lines(), extra in 1usize..60) {
        let corpus = RawCorpus::new("p", lines);
        let model = train_bpe(&corpus, min_vocab_size(&corpus) + extra).unwrap();
        for t in model.tokens() {
            prop_assert!(t.chars().skip(1).all(|c| c != WORD_MARKER), "{t:?}");
        }
    }

    #[test]
    fn serialisation_is_lossless(lines in corpus_lines(), extra in 1usize..30) {
        let corpus = RawCorpus::new("p", lines.clone());
        let model = train_bpe(&corpus, min_vocab_size(&corpus) + extra).unwrap();
        let back = TokenizerModel::from_text(&model.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), model.to_text());
        prop_assert_eq!(back.hash(), model.hash());
        for line in &lines {
            prop_assert_eq!(back.encode_line(line).ids, model.encode_line(line).ids);
        }
    }
}

#[test]
fn unseen_characters_become_unk() {
    let corpus = RawCorpus::new("p", vec!["abab abab".into()]);
    let model = train_bpe(&corpus, min_vocab_size(&corpus) + 3).unwrap();
    let ids = model.encode_line("abz").ids;
    assert!(ids.contains(&0));
    assert_eq!(*ids.last().unwrap(), EOS_ID);
}

#[test]
fn budget_below_minimum_names_the_bound() {
    let corpus = RawCorpus::new("p", vec!["abc".into()]);
    let err = train_bpe(&corpus, 5).unwrap_err().to_string();
    assert!(err.contains(&min_vocab_size(&corpus).to_string()), "{err}");
}
