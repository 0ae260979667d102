//! ARPA text format: `\data\` counts, `\k-grams:` sections of
//! `log10prob<TAB>tokens<TAB>log10backoff`, then `\end\`.
//!
//! Entries that exist only as contexts (those ending in `<s>`) are written
//! with the conventional probability of -99.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{NGram, NGramModel, BOS_TOKEN};
use crate::bpe::{TokenId, EOS_TOKEN, UNK_TOKEN};
use crate::{Error, Result};

const LOG10_2: f64 = std::f64::consts::LOG10_2;
const NO_PROB: f64 = -99.0;

fn fmt_log10(out: &mut String, log2: f64) {
    let v = log2 * LOG10_2;
    // avoid "-0.00000000"
    let v = if v.abs() < 5e-9 { 0.0 } else { v };
    let _ = write!(out, "{v:.8}");
}

/// Renders the model as ARPA text. Entries are sorted by id sequence.
pub fn write_arpa(model: &NGramModel) -> String {
    let order = model.order();
    let mut sections: Vec<Vec<NGram>> = Vec::with_capacity(order);
    for k in 1..=order {
        let mut keys: Vec<NGram> = model.probs(k).keys().cloned().collect();
        if k < order {
            keys.extend(model.backoffs(k).keys().filter(|h| !model.probs(k).contains_key(*h)).cloned());
        }
        keys.sort_unstable();
        sections.push(keys);
    }

    let mut out = String::new();
    out.push_str("\\data\\\n");
    for (k, keys) in sections.iter().enumerate() {
        let _ = writeln!(out, "ngram {}={}", k + 1, keys.len());
    }
    for (k, keys) in sections.iter().enumerate() {
        let k = k + 1;
        let _ = write!(out, "\n\\{k}-grams:\n");
        for key in keys {
            match model.probs(k).get(key) {
                Some(&p) => fmt_log10(&mut out, p),
                None => {
                    let _ = write!(out, "{NO_PROB:.8}");
                }
            }
            out.push('\t');
            for (i, &id) in key.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&model.vocab()[id as usize]);
            }
            if k < order {
                if let Some(&b) = model.backoffs(k).get(key) {
                    out.push('\t');
                    fmt_log10(&mut out, b);
                }
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn export_arpa(model: &NGramModel, path: &Path) -> Result<()> {
    fs::write(path, write_arpa(model)).map_err(|e| Error::io(path, e))
}

pub fn import_arpa(path: &Path) -> Result<NGramModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_arpa(&text)
}

enum Section {
    Preamble,
    Data,
    Grams(usize),
    End,
}

/// (tokens, log10 prob, log10 backoff, line number)
type RawEntry<'a> = (Vec<&'a str>, f64, Option<f64>, usize);

/// Parses ARPA text. Token ids follow the order of the unigram section with
/// `<s>` moved to the end.
pub fn read_arpa(text: &str) -> Result<NGramModel> {
    let mut declared: Vec<usize> = Vec::new();
    let mut section = Section::Preamble;
    let mut entries: Vec<Vec<RawEntry>> = Vec::new();
    let mut last_line = 0;

    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        let line = line.trim_end();
        if line == "\\data\\" {
            if !matches!(section, Section::Preamble) {
                return Err(Error::parse(n, "unexpected \\data\\"));
            }
            section = Section::Data;
            continue;
        }
        if line == "\\end\\" {
            section = Section::End;
            continue;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            let k: usize = rest
                .strip_suffix("-grams:")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| Error::parse(n, format!("malformed section header {line:?}")))?;
            if k != entries.len() + 1 || k > declared.len() {
                return Err(Error::parse(n, format!("unexpected section {k}-grams")));
            }
            entries.push(Vec::new());
            section = Section::Grams(k);
            continue;
        }
        if line.is_empty() {
            continue;
        }
        match section {
            Section::Preamble => {}
            Section::End => return Err(Error::parse(n, "content after \\end\\")),
            Section::Data => {
                let (k, count) = line
                    .strip_prefix("ngram ")
                    .and_then(|r| r.split_once('='))
                    .and_then(|(k, c)| Some((k.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                    .ok_or_else(|| Error::parse(n, format!("malformed count line {line:?}")))?;
                if k != declared.len() + 1 {
                    return Err(Error::parse(n, format!("count for order {k} out of sequence")));
                }
                declared.push(count);
            }
            Section::Grams(k) => {
                let fields: Vec<&str> = line.split('\t').collect();
                let (prob, tokens, backoff) = match fields.as_slice() {
                    [p, t] => (*p, *t, None),
                    [p, t, b] => (*p, *t, Some(*b)),
                    _ => {
                        // some writers separate with spaces only
                        let parts: Vec<&str> = line.split_whitespace().collect();
                        if parts.len() == k + 1 {
                            (parts[0], "", None)
                        } else if parts.len() == k + 2 {
                            (parts[0], "", Some(parts[k + 1]))
                        } else {
                            return Err(Error::parse(n, format!("malformed {k}-gram entry")));
                        }
                    }
                };
                let toks: Vec<&str> = if tokens.is_empty() {
                    line.split_whitespace().skip(1).take(k).collect()
                } else {
                    tokens.split(' ').collect()
                };
                if toks.len() != k {
                    return Err(Error::parse(n, format!("expected {k} tokens, found {}", toks.len())));
                }
                let parse = |s: &str| -> Result<f64> {
                    s.trim().parse::<f64>().map_err(|_| Error::parse(n, format!("bad number {s:?}")))
                };
                let p = parse(prob)?;
                let b = backoff.map(parse).transpose()?;
                if b.is_some() && k == declared.len() {
                    return Err(Error::parse(n, "backoff weight on highest-order entry"));
                }
                entries[k - 1].push((toks, p, b, n));
            }
        }
    }
    if !matches!(section, Section::End) {
        return Err(Error::parse(last_line, "missing \\end\\"));
    }
    if declared.is_empty() {
        return Err(Error::parse(last_line, "missing \\data\\ counts"));
    }
    if entries.len() != declared.len() {
        return Err(Error::parse(last_line, format!("declared {} orders, found {}", declared.len(), entries.len())));
    }
    for (k, (es, &want)) in entries.iter().zip(&declared).enumerate() {
        if es.len() != want {
            let line = es.last().map(|e| e.3).unwrap_or(last_line);
            return Err(Error::parse(line, format!("\\data\\ declares {want} {}-grams, found {}", k + 1, es.len())));
        }
    }

    let mut vocab: Vec<String> = Vec::new();
    for (toks, ..) in &entries[0] {
        if toks[0] != BOS_TOKEN {
            vocab.push(toks[0].to_string());
        }
    }
    if !vocab.iter().any(|t| t == EOS_TOKEN) {
        return Err(Error::parse(1, format!("no {EOS_TOKEN} unigram")));
    }
    vocab.push(BOS_TOKEN.to_string());
    let ids: HashMap<&str, TokenId> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i as TokenId)).collect();

    let order = declared.len();
    let mut probs: Vec<HashMap<NGram, f64>> = vec![HashMap::new(); order];
    let mut backoffs: Vec<HashMap<NGram, f64>> = vec![HashMap::new(); order - 1];
    for (k, es) in entries.iter().enumerate() {
        for (toks, p, b, line) in es {
            let key: NGram = toks
                .iter()
                .map(|t| ids.get(t).copied().ok_or_else(|| Error::parse(*line, format!("token {t:?} has no unigram"))))
                .collect::<Result<_>>()?;
            if *p > NO_PROB + 1e-9 || *key.last().expect("k >= 1") != ids[BOS_TOKEN] {
                probs[k].insert(key.clone(), p / LOG10_2);
            }
            if let Some(b) = b {
                backoffs[k].insert(key, b / LOG10_2);
            }
        }
    }
    if !probs[0].keys().any(|g| vocab[g[0] as usize] == UNK_TOKEN) {
        log::debug!("ARPA model has no {UNK_TOKEN} unigram");
    }
    Ok(NGramModel::from_tables(order, vocab, probs, backoffs))
}
