//! Interpolated modified Kneser-Ney n-gram models over token ids.
//!
//! Every line is padded with `order - 1` BOS symbols and terminated by its EOS
//! token. BOS only ever appears as context; it gets the id one past the
//! tokenizer vocabulary. The estimated model is stored in backoff form: each
//! observed n-gram keeps its fully interpolated log2 probability and each
//! observed context keeps its log2 interpolation weight, which is exactly what
//! an ARPA file holds.

mod arpa;

use std::collections::HashMap;

use crate::bpe::{TokenId, TokenSequence, EOS_TOKEN, UNK_ID, UNK_TOKEN};
use crate::{Error, Result};

pub use arpa::{export_arpa, import_arpa, read_arpa, write_arpa};

pub const MAX_ORDER: usize = 8;
pub const BOS_TOKEN: &str = "<s>";
/// Absolute discount used when count-of-counts are degenerate.
pub const FALLBACK_DISCOUNT: f64 = 0.75;

pub type NGram = Vec<TokenId>;

/// Raw and adjusted n-gram counts, indexed by `order - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    order: usize,
    vocab: Vec<String>,
    raw: Vec<HashMap<NGram, u64>>,
    /// Raw counts at the highest order, continuation counts (number of
    /// distinct left extensions) below it.
    adjusted: Vec<HashMap<NGram, u64>>,
}

impl CountTable {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable vocabulary size (BOS excluded).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos(&self) -> TokenId {
        self.vocab.len() as TokenId
    }

    pub fn raw(&self, k: usize) -> &HashMap<NGram, u64> {
        &self.raw[k - 1]
    }

    pub fn adjusted(&self, k: usize) -> &HashMap<NGram, u64> {
        &self.adjusted[k - 1]
    }

    /// Keeps orders `1..=order` as they are, so the top order of the result
    /// carries continuation counts.
    pub fn truncated(&self, order: usize) -> Result<Self> {
        if order == 0 || order > self.order {
            return Err(Error::Config(format!("cannot truncate order {} to {order}", self.order)));
        }
        Ok(CountTable {
            order,
            vocab: self.vocab.clone(),
            raw: self.raw[..order].to_vec(),
            adjusted: self.adjusted[..order].to_vec(),
        })
    }
}

/// Counts all k-grams, k <= order, that end at a predicted position.
pub fn count_ngrams(sequences: &[TokenSequence], order: usize, vocab: &[String]) -> Result<CountTable> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::Config(format!("n-gram order {order} outside 1..={MAX_ORDER}")));
    }
    if sequences.is_empty() {
        return Err(Error::Size("no sequences to count".into()));
    }
    let v = vocab.len() as TokenId;
    let bos = v;
    let mut raw: Vec<HashMap<NGram, u64>> = vec![HashMap::new(); order];
    let mut padded = Vec::new();
    for seq in sequences {
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        padded.clear();
        padded.extend(std::iter::repeat_n(bos, order - 1));
        padded.extend_from_slice(&seq.ids);
        for end in order - 1..padded.len() {
            for k in 1..=order {
                *raw[k - 1].entry(padded[end + 1 - k..=end].to_vec()).or_insert(0) += 1;
            }
        }
    }
    let mut adjusted = vec![HashMap::new(); order];
    adjusted[order - 1] = raw[order - 1].clone();
    for k in 1..order {
        let mut cont: HashMap<NGram, u64> = HashMap::new();
        for gram in raw[k].keys() {
            *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        adjusted[k - 1] = cont;
    }
    Ok(CountTable {
        order,
        vocab: vocab.to_vec(),
        raw,
        adjusted,
    })
}

/// Chen-Goodman discounts `[D(1), D(2), D(3+)]` from count-of-counts
/// `n[0..4] = n1..n4`; falls back to a flat absolute discount when any is zero.
pub fn mkn_discounts(n: [u64; 4]) -> [f64; 3] {
    if n.contains(&0) {
        return [FALLBACK_DISCOUNT; 3];
    }
    let [n1, n2, n3, n4] = n.map(|c| c as f64);
    let y = n1 / (n1 + 2.0 * n2);
    [
        (1.0 - 2.0 * y * n2 / n1).clamp(0.0, 1.0),
        (2.0 - 3.0 * y * n3 / n2).clamp(0.0, 2.0),
        (3.0 - 4.0 * y * n4 / n3).clamp(0.0, 3.0),
    ]
}

pub fn count_of_counts(counts: &HashMap<NGram, u64>) -> [u64; 4] {
    let mut n = [0u64; 4];
    for &c in counts.values() {
        if (1..=4).contains(&c) {
            n[c as usize - 1] += 1;
        }
    }
    n
}

fn discount_for(d: &[f64; 3], count: u64) -> f64 {
    match count {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

#[derive(Default)]
struct ContextStats {
    total: u64,
    /// Σ_w D(a(h,w)), the mass handed to the lower order.
    discounted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    order: usize,
    /// Token strings by id; the last entry is BOS.
    vocab: Vec<String>,
    /// log2 P(w | h) keyed by `h ++ [w]`, indexed by `order - 1`.
    probs: Vec<HashMap<NGram, f64>>,
    /// log2 backoff weight keyed by context `h`, indexed by `len(h) - 1`.
    backoffs: Vec<HashMap<NGram, f64>>,
    discounts: Vec<[f64; 3]>,
}

/// Estimates an interpolated modified Kneser-Ney model.
pub fn estimate_mkn(counts: &CountTable) -> Result<NGramModel> {
    let order = counts.order;
    let v = counts.vocab_size();
    if counts.adjusted.iter().all(HashMap::is_empty) || v == 0 {
        return Err(Error::Estimation("no n-gram counts to estimate from".into()));
    }
    let mut vocab = counts.vocab.clone();
    vocab.push(BOS_TOKEN.to_string());
    let mut model = NGramModel {
        order,
        vocab,
        probs: vec![HashMap::new(); order],
        backoffs: vec![HashMap::new(); order.saturating_sub(1)],
        discounts: Vec::with_capacity(order),
    };

    for k in 1..=order {
        let adjusted = &counts.adjusted[k - 1];
        let d = mkn_discounts(count_of_counts(adjusted));
        model.discounts.push(d);

        let mut contexts: HashMap<&[TokenId], ContextStats> = HashMap::new();
        for (gram, &c) in adjusted {
            let stats = contexts.entry(&gram[..k - 1]).or_default();
            stats.total += c;
            stats.discounted += discount_for(&d, c);
        }

        if k == 1 {
            let stats = contexts.remove(&[][..]).unwrap_or_default();
            if stats.total == 0 {
                return Err(Error::Estimation("unigram counts are empty".into()));
            }
            let total = stats.total as f64;
            let uniform = stats.discounted / total / v as f64;
            for w in 0..v as TokenId {
                let c = adjusted.get(&vec![w]).copied().unwrap_or(0);
                let p = (c as f64 - discount_for(&d, c)) / total + uniform;
                model.probs[0].insert(vec![w], p.log2());
            }
            continue;
        }

        let mut probs = HashMap::with_capacity(adjusted.len());
        for (gram, &c) in adjusted {
            let stats = &contexts[&gram[..k - 1]];
            let total = stats.total as f64;
            let gamma = stats.discounted / total;
            let lower = model.probs[k - 2]
                .get(&gram[1..])
                .copied()
                .ok_or_else(|| Error::Estimation(format!("missing lower-order entry for {gram:?}")))?;
            let p = (c as f64 - discount_for(&d, c)) / total + gamma * lower.exp2();
            probs.insert(gram.clone(), p.log2());
        }
        model.probs[k - 1] = probs;
        model.backoffs[k - 2] = contexts
            .into_iter()
            .map(|(h, s)| (h.to_vec(), (s.discounted / s.total as f64).log2()))
            .collect();
    }
    Ok(model)
}

impl NGramModel {
    pub(crate) fn from_tables(
        order: usize,
        vocab: Vec<String>,
        probs: Vec<HashMap<NGram, f64>>,
        backoffs: Vec<HashMap<NGram, f64>>,
    ) -> Self {
        NGramModel {
            order,
            vocab,
            probs,
            backoffs,
            discounts: Vec::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Predictable vocabulary size (BOS excluded).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn bos(&self) -> TokenId {
        self.vocab_size() as TokenId
    }

    /// Token strings by id, BOS last.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.vocab.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    /// Discounts per order; empty for models read from ARPA files.
    pub fn discounts(&self) -> &[[f64; 3]] {
        &self.discounts
    }

    /// Stored log2 probabilities of order `k`.
    pub fn probs(&self, k: usize) -> &HashMap<NGram, f64> {
        &self.probs[k - 1]
    }

    /// Stored log2 backoff weights of contexts of length `len`.
    pub fn backoffs(&self, len: usize) -> &HashMap<NGram, f64> {
        &self.backoffs[len - 1]
    }

    /// Number of stored probabilities and backoff weights.
    pub fn param_count(&self) -> usize {
        self.probs.iter().map(HashMap::len).sum::<usize>() + self.backoffs.iter().map(HashMap::len).sum::<usize>()
    }

    /// log2 P(w | context) using the longest stored suffix of `context`.
    /// Ids outside the vocabulary are scored as UNK.
    pub fn log2_prob(&self, context: &[TokenId], w: TokenId) -> f64 {
        let w = if (w as usize) < self.vocab_size() && self.probs[0].contains_key(&[w][..]) {
            w
        } else {
            UNK_ID
        };
        let ctx = &context[context.len().saturating_sub(self.order - 1)..];
        let mut key: Vec<TokenId> = Vec::with_capacity(ctx.len() + 1);
        let mut backoff = 0.0;
        for len in (0..=ctx.len()).rev() {
            let h = &ctx[ctx.len() - len..];
            key.clear();
            key.extend_from_slice(h);
            key.push(w);
            if let Some(p) = self.probs[len].get(&key[..]) {
                return backoff + p;
            }
            if len > 0 {
                backoff += self.backoffs[len - 1].get(h).copied().unwrap_or(0.0);
            }
        }
        // unreachable for estimated models, which store every unigram
        f64::NEG_INFINITY
    }

    /// Total log2 probability of a BOS-padded sequence, EOS included.
    pub fn score_sequence(&self, seq: &TokenSequence) -> f64 {
        self.token_log2_probs(seq).iter().sum()
    }

    pub fn token_log2_probs(&self, seq: &TokenSequence) -> Vec<f64> {
        let mut ctx = vec![self.bos(); self.order - 1];
        seq.ids
            .iter()
            .map(|&w| {
                let lp = self.log2_prob(&ctx, w);
                ctx.push(w);
                lp
            })
            .collect()
    }

    /// The same model with orders above `order` removed.
    pub fn truncated(&self, order: usize) -> Result<Self> {
        if order == 0 || order > self.order {
            return Err(Error::Config(format!("cannot truncate order {} to {order}", self.order)));
        }
        Ok(NGramModel {
            order,
            vocab: self.vocab.clone(),
            probs: self.probs[..order].to_vec(),
            backoffs: self.backoffs[..order - 1].to_vec(),
            discounts: self.discounts.iter().take(order).copied().collect(),
        })
    }

    /// Re-keys the model to a tokenizer's id space. Every model token must
    /// exist in `tokens`; tokenizer entries absent from the model are scored
    /// as UNK.
    pub fn align_vocab(&self, tokens: &[String]) -> Result<Self> {
        let index: HashMap<&str, TokenId> = tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i as TokenId)).collect();
        let new_bos = tokens.len() as TokenId;
        let mut map = Vec::with_capacity(self.vocab.len());
        for (i, t) in self.vocab.iter().enumerate() {
            if i as TokenId == self.bos() {
                map.push(new_bos);
            } else {
                let id = index.get(t.as_str()).copied().ok_or_else(|| {
                    Error::Integrity(format!("model token {t:?} missing from tokenizer vocabulary"))
                })?;
                map.push(id);
            }
        }
        if index.get(UNK_TOKEN) != Some(&UNK_ID) || !index.contains_key(EOS_TOKEN) {
            return Err(Error::Integrity("tokenizer lacks the expected special tokens".into()));
        }
        let remap = |table: &HashMap<NGram, f64>| -> HashMap<NGram, f64> {
            table
                .iter()
                .map(|(g, &p)| (g.iter().map(|&id| map[id as usize]).collect(), p))
                .collect()
        };
        let probs: Vec<_> = self.probs.iter().map(remap).collect();
        if !probs[0].contains_key(&[UNK_ID][..]) {
            return Err(Error::Integrity(format!("model has no {UNK_TOKEN} unigram")));
        }
        let mut vocab = tokens.to_vec();
        vocab.push(BOS_TOKEN.to_string());
        Ok(NGramModel {
            order: self.order,
            vocab,
            probs,
            backoffs: self.backoffs.iter().map(remap).collect(),
            discounts: self.discounts.clone(),
        })
    }
}
