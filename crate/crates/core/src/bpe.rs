//! Byte-pair-encoding tokenizer: training, encoding, decoding and a plain-text
//! model file.
//!
//! Words are whitespace-delimited. Each word starts with the word-boundary
//! symbol [`WORD_MARKER`] followed by its characters, and merges never cross
//! word boundaries. Training greedily merges the most frequent adjacent pair,
//! breaking ties by the lexicographic order of `(left, right)` and stopping
//! once the vocabulary is full or no pair occurs at least twice.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::RawCorpus;
use crate::{Error, Result};

/// Marks the start of a word; decodes to a space between words.
pub const WORD_MARKER: char = '\u{2581}';
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
const SPECIALS: usize = 2;

const HEADER: &str = "bpe-tokenizer v1";

pub type TokenId = u32;

/// Token ids of a text plus the character length used as the BPC denominator.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Unicode scalar values of the source text, one extra per line.
    pub char_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerModel {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    vocab: HashMap<String, TokenId>,
    /// (left id, right id) -> (rank, merged id)
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl TokenizerModel {
    /// Builds a model from an alphabet and an ordered merge list, assigning
    /// ids specials-first, then alphabet in sorted order, then merges.
    pub fn from_parts(alphabet: &[char], merges: &[(String, String)]) -> Result<Self> {
        let mut alphabet = alphabet.to_vec();
        alphabet.sort_unstable();
        alphabet.dedup();
        let mut model = TokenizerModel {
            alphabet: Vec::new(),
            merges: Vec::new(),
            tokens: vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()],
            vocab: HashMap::new(),
            ranks: HashMap::new(),
        };
        model.vocab.insert(UNK_TOKEN.into(), UNK_ID);
        model.vocab.insert(EOS_TOKEN.into(), EOS_ID);
        for ch in alphabet {
            if ch.is_whitespace() {
                return Err(Error::Config(format!("whitespace {ch:?} in alphabet")));
            }
            model.push_token(ch.to_string())?;
            model.alphabet.push(ch);
        }
        for (l, r) in merges {
            model.push_merge(l, r)?;
        }
        Ok(model)
    }

    fn push_token(&mut self, token: String) -> Result<TokenId> {
        if self.vocab.contains_key(&token) {
            return Err(Error::Config(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len() as TokenId;
        self.vocab.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    fn push_merge(&mut self, left: &str, right: &str) -> Result<TokenId> {
        let (Some(&l), Some(&r)) = (self.vocab.get(left), self.vocab.get(right)) else {
            return Err(Error::Config(format!(
                "merge ({left:?}, {right:?}) uses a token not produced earlier"
            )));
        };
        if l < SPECIALS as TokenId || r < SPECIALS as TokenId {
            return Err(Error::Config("special tokens cannot be merged".into()));
        }
        let id = self.push_token(format!("{left}{right}"))?;
        self.ranks.insert((l, r), (self.merges.len(), id));
        self.merges.push((left.to_string(), right.to_string()));
        Ok(id)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Token strings indexed by id.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    /// Segments one whitespace-free word into token ids.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        let mut symbols: Vec<TokenId> = std::iter::once(WORD_MARKER)
            .chain(word.chars())
            .map(|c| self.single_char_id(c))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((_, i, id)) = best else { break };
            symbols[i] = id;
            symbols.remove(i + 1);
        }
        symbols
    }

    fn single_char_id(&self, c: char) -> TokenId {
        let mut buf = [0u8; 4];
        self.vocab
            .get(c.encode_utf8(&mut buf) as &str)
            .copied()
            .unwrap_or(UNK_ID)
    }

    /// Encodes one line; an EOS id is appended.
    pub fn encode_line(&self, line: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for word in line.split_whitespace() {
            ids.extend(self.encode_word(word));
        }
        ids.push(EOS_ID);
        TokenSequence {
            ids,
            char_len: line.chars().count() + 1,
        }
    }

    /// Encodes text line by line; a single trailing newline is ignored so
    /// that `"a\n"` and `"a"` both hold one line.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let text = text.strip_suffix('\n').unwrap_or(text);
        let mut out = TokenSequence::default();
        for line in text.split('\n') {
            let seq = self.encode_line(line);
            out.ids.extend(seq.ids);
            out.char_len += seq.char_len;
        }
        out
    }

    pub fn encode_corpus(&self, corpus: &RawCorpus) -> Vec<TokenSequence> {
        corpus.lines.iter().map(|l| self.encode_line(l)).collect()
    }

    /// Concatenated ids of all lines, each terminated by EOS.
    pub fn encode_stream(&self, corpus: &RawCorpus) -> Vec<TokenId> {
        corpus
            .lines
            .iter()
            .flat_map(|l| self.encode_line(l).ids)
            .collect()
    }

    /// Inverse of [`encode`](Self::encode): EOS renders as `\n`, word markers
    /// as spaces between words.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        let mut line = String::new();
        for &id in ids {
            let token = self.token(id).ok_or_else(|| {
                Error::Index(format!("token id {id} outside vocabulary of {}", self.vocab_size()))
            })?;
            if id == EOS_ID {
                out.push_str(line.strip_prefix(' ').unwrap_or(&line));
                out.push('\n');
                line.clear();
            } else {
                line.extend(token.chars().map(|c| if c == WORD_MARKER { ' ' } else { c }));
            }
        }
        out.push_str(line.strip_prefix(' ').unwrap_or(&line));
        Ok(out)
    }

    /// Serialises to the line-oriented tokenizer file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "vocab {}", self.vocab_size());
        let _ = writeln!(out, "special unk {UNK_ID}");
        let _ = writeln!(out, "special eos {EOS_ID}");
        for &c in &self.alphabet {
            let _ = writeln!(out, "alphabet {c} {}", self.single_char_id(c));
        }
        for (l, r) in &self.merges {
            let _ = writeln!(out, "merge {l} {r} {}", self.vocab[&format!("{l}{r}")]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(Error::parse(1, format!("expected header `{HEADER}`"))),
        }
        let declared: usize = match lines.next() {
            Some((n, l)) => l
                .strip_prefix("vocab ")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(n, "expected `vocab <V>`"))?,
            None => return Err(Error::parse(2, "missing vocab line")),
        };
        let mut model = TokenizerModel::from_parts(&[], &[])?;
        let mut last_line = 2;
        for (n, line) in lines {
            last_line = n;
            let fields: Vec<&str> = line.split(' ').collect();
            let parse_id = |s: &str| -> Result<TokenId> {
                s.parse().map_err(|_| Error::parse(n, format!("bad id {s:?}")))
            };
            match fields.as_slice() {
                ["special", name, id] => {
                    let expected = match *name {
                        "unk" => UNK_ID,
                        "eos" => EOS_ID,
                        _ => return Err(Error::parse(n, format!("unknown special {name:?}"))),
                    };
                    if parse_id(id)? != expected {
                        return Err(Error::parse(n, format!("special {name} must have id {expected}")));
                    }
                }
                ["alphabet", ch, id] => {
                    let mut chars = ch.chars();
                    let (Some(c), None) = (chars.next(), chars.next()) else {
                        return Err(Error::parse(n, "alphabet entry must be one character"));
                    };
                    if !model.merges.is_empty() {
                        return Err(Error::parse(n, "alphabet entry after merges"));
                    }
                    if model.alphabet.last().is_some_and(|&p| p >= c) {
                        return Err(Error::parse(n, "alphabet entries must be sorted and unique"));
                    }
                    let got = model.push_token(c.to_string()).map_err(|e| Error::parse(n, e.to_string()))?;
                    model.alphabet.push(c);
                    if parse_id(id)? != got {
                        return Err(Error::parse(n, format!("expected id {got}")));
                    }
                }
                ["merge", l, r, id] => {
                    let got = model.push_merge(l, r).map_err(|e| Error::parse(n, e.to_string()))?;
                    if parse_id(id)? != got {
                        return Err(Error::parse(n, format!("expected id {got}")));
                    }
                }
                _ => return Err(Error::parse(n, format!("malformed line {line:?}"))),
            }
        }
        if model.vocab_size() != declared {
            return Err(Error::parse(
                last_line,
                format!("declared vocab {declared} but file defines {}", model.vocab_size()),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialised model, hex encoded. Checkpoints record it so
    /// evaluation can refuse a mismatched tokenizer.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Word frequencies and alphabet of a corpus, as seen by the trainer.
pub fn word_counts(corpus: &RawCorpus) -> (BTreeMap<String, usize>, BTreeSet<char>) {
    let mut words = BTreeMap::new();
    let mut alphabet = BTreeSet::from([WORD_MARKER]);
    for line in &corpus.lines {
        for word in line.split_whitespace() {
            *words.entry(word.to_string()).or_insert(0) += 1;
            alphabet.extend(word.chars());
        }
    }
    (words, alphabet)
}

/// Minimum vocabulary size for a corpus: alphabet plus specials plus one merge.
pub fn min_vocab_size(corpus: &RawCorpus) -> usize {
    word_counts(corpus).1.len() + SPECIALS + 1
}

struct PairIndex {
    counts: HashMap<(TokenId, TokenId), i64>,
    words: HashMap<(TokenId, TokenId), HashSet<usize>>,
}

impl PairIndex {
    fn add_word(&mut self, idx: usize, symbols: &[TokenId], freq: i64) {
        for w in symbols.windows(2) {
            let pair = (w[0], w[1]);
            *self.counts.entry(pair).or_insert(0) += freq;
            self.words.entry(pair).or_default().insert(idx);
        }
    }

    fn remove_word(&mut self, symbols: &[TokenId], freq: i64) {
        for w in symbols.windows(2) {
            let pair = (w[0], w[1]);
            if let Some(c) = self.counts.get_mut(&pair) {
                *c -= freq;
                if *c <= 0 {
                    self.counts.remove(&pair);
                }
            }
        }
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
pub(crate) fn merge_symbols(symbols: &[TokenId], pair: (TokenId, TokenId), merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Learns a tokenizer with at most `vocab_size` entries from training text.
pub fn train_bpe(corpus: &RawCorpus, vocab_size: usize) -> Result<TokenizerModel> {
    let (word_freq, alphabet) = word_counts(corpus);
    if word_freq.is_empty() {
        return Err(Error::Size(format!("{} contains no words", corpus.source_name)));
    }
    let minimum = alphabet.len() + SPECIALS + 1;
    if vocab_size < minimum {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} too small: alphabet of {} plus {SPECIALS} specials needs at least {minimum}",
            alphabet.len()
        )));
    }
    let alphabet: Vec<char> = alphabet.into_iter().collect();
    let mut model = TokenizerModel::from_parts(&alphabet, &[])?;

    let mut words: Vec<(Vec<TokenId>, i64)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let symbols = std::iter::once(WORD_MARKER)
                .chain(w.chars())
                .map(|c| model.single_char_id(c))
                .collect();
            (symbols, f as i64)
        })
        .collect();
    let mut index = PairIndex {
        counts: HashMap::new(),
        words: HashMap::new(),
    };
    for (i, (symbols, freq)) in words.iter().enumerate() {
        index.add_word(i, symbols, *freq);
    }

    while model.vocab_size() < vocab_size {
        let mut best: Option<((TokenId, TokenId), i64)> = None;
        for (&pair, &count) in &index.counts {
            if count < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && (&model.tokens[pair.0 as usize], &model.tokens[pair.1 as usize])
                                < (&model.tokens[bp.0 as usize], &model.tokens[bp.1 as usize]))
                }
            };
            if better && !model.vocab.contains_key(&model.concat(pair)) {
                best = Some((pair, count));
            }
        }
        let Some((pair, _)) = best else { break };
        let left = model.tokens[pair.0 as usize].clone();
        let right = model.tokens[pair.1 as usize].clone();
        let merged = model.push_merge(&left, &right)?;

        let mut affected: Vec<usize> = index.words.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for idx in affected {
            let (symbols, freq) = &words[idx];
            let freq = *freq;
            let new_symbols = merge_symbols(symbols, pair, merged);
            if new_symbols.len() == symbols.len() {
                continue;
            }
            index.remove_word(symbols, freq);
            index.add_word(idx, &new_symbols, freq);
            words[idx].0 = new_symbols;
        }
        index.counts.remove(&pair);
    }
    Ok(model)
}

impl TokenizerModel {
    fn concat(&self, pair: (TokenId, TokenId)) -> String {
        format!("{}{}", self.tokens[pair.0 as usize], self.tokens[pair.1 as usize])
    }
}
