//! BPE merge learning by full recount at every iteration.

use std::collections::{BTreeMap, BTreeSet, HashSet};

pub const MARKER: &str = "\u{2581}";

/// Merge list learned from `lines` with a vocabulary budget of `vocab_size`
/// (two special tokens included). Each iteration recounts every adjacent
/// pair over the current segmentation of every word occurrence, picks the
/// most frequent pair (ties: smallest `(left, right)` as strings), skips
/// pairs whose concatenation is already a token, and requires a count of at
/// least two.
pub fn learn_merges(lines: &[String], vocab_size: usize) -> Vec<(String, String)> {
    let mut words: Vec<Vec<String>> = Vec::new();
    let mut vocab: HashSet<String> = ["<unk>".to_string(), "</s>".to_string(), MARKER.to_string()].into();
    for line in lines {
        for w in line.split_whitespace() {
            let mut seg = vec![MARKER.to_string()];
            for c in w.chars() {
                seg.push(c.to_string());
                vocab.insert(c.to_string());
            }
            words.push(seg);
        }
    }
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for seg in &words {
            for p in seg.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_insert(0) += 1;
            }
        }
        // BTreeMap iterates in (left, right) order, so the first maximum wins ties
        let mut best: Option<(&(String, String), usize)> = None;
        for (pair, &c) in &counts {
            if c < 2 || vocab.contains(&format!("{}{}", pair.0, pair.1)) {
                continue;
            }
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        let joined = format!("{}{}", pair.0, pair.1);
        for seg in &mut words {
            let mut out = Vec::with_capacity(seg.len());
            let mut i = 0;
            while i < seg.len() {
                if i + 1 < seg.len() && seg[i] == pair.0 && seg[i + 1] == pair.1 {
                    out.push(joined.clone());
                    i += 2;
                } else {
                    out.push(seg[i].clone());
                    i += 1;
                }
            }
            *seg = out;
        }
        vocab.insert(joined);
        merges.push(pair);
    }
    merges
}

/// Characters of `lines` (without whitespace), for building covered text.
pub fn alphabet(lines: &[String]) -> BTreeSet<char> {
    lines.iter().flat_map(|l| l.chars()).filter(|c| !c.is_whitespace()).collect()
}
