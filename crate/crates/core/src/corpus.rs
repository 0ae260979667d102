//! Corpus ingestion: cleaning, sequential splits, concatenation and statistics.
//!
//! A corpus is a list of lines, one sentence per line. No sentence splitting
//! is performed; input files are expected to be pre-segmented.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCorpus {
    pub lines: Vec<String>,
    pub source_name: String,
}

impl RawCorpus {
    pub fn new(source_name: impl Into<String>, lines: Vec<String>) -> Self {
        RawCorpus {
            lines,
            source_name: source_name.into(),
        }
    }

    /// Decodes UTF-8 text into lines. A trailing newline does not create an
    /// extra empty line; `\r\n` endings are accepted.
    pub fn from_bytes(source_name: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let source_name = source_name.into();
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Decode {
            source_name: source_name.clone(),
            offset: e.valid_up_to(),
        })?;
        let lines = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Ok(RawCorpus { lines, source_name })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_bytes(name, &bytes)
    }

    /// Writes the lines LF-terminated.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// Which line filters [`clean_text`] applies.
#[derive(Clone, Debug, PartialEq)]
pub struct CleaningConfig {
    pub drop_empty: bool,
    pub drop_html: bool,
    pub drop_script: bool,
    pub drop_duplicates: bool,
    /// A line is HTML-dominant when more than this fraction of its characters
    /// sit inside `<...>` tags.
    pub html_ratio: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            drop_empty: true,
            drop_html: true,
            drop_script: true,
            drop_duplicates: true,
            html_ratio: 0.1,
        }
    }
}

impl CleaningConfig {
    /// Only whitespace normalisation, no line is dropped.
    pub fn disabled() -> Self {
        CleaningConfig {
            drop_empty: false,
            drop_html: false,
            drop_script: false,
            drop_duplicates: false,
            html_ratio: 0.1,
        }
    }
}

/// Trims the line and collapses internal whitespace runs to one space.
pub fn normalize_whitespace(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    for word in line.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Fraction of characters that belong to `<...>` tags.
pub fn tag_char_ratio(line: &str) -> f64 {
    let total = line.chars().count();
    if total == 0 {
        return 0.0;
    }
    let mut in_tag = 0usize;
    let mut pending = 0usize;
    let mut open = false;
    for ch in line.chars() {
        if open {
            pending += 1;
            if ch == '>' {
                in_tag += pending;
                pending = 0;
                open = false;
            }
        } else if ch == '<' {
            open = true;
            pending = 1;
        }
    }
    in_tag as f64 / total as f64
}

const SCRIPT_MARKERS: &[&str] = &[
    "function(",
    "function (",
    "document.",
    "window.",
    "var ",
    "let ",
    "const ",
    "=>",
    "</script",
    "<script",
    "jQuery",
    "$(",
    "();",
    "});",
];

/// Heuristic detector for JavaScript-like lines.
pub fn looks_like_script(line: &str) -> bool {
    let markers = SCRIPT_MARKERS.iter().filter(|m| line.contains(*m)).count();
    let braces = line.chars().filter(|c| matches!(c, '{' | '}' | ';')).count();
    markers >= 2 || (markers >= 1 && braces >= 1) || braces >= 3
}

/// Normalises whitespace and drops lines matching any enabled rule.
/// Order of surviving lines is preserved.
pub fn clean_text(raw: &RawCorpus, rules: &CleaningConfig) -> RawCorpus {
    let mut seen: HashSet<String> = HashSet::new();
    let mut lines = Vec::with_capacity(raw.lines.len());
    for line in &raw.lines {
        let line = normalize_whitespace(line);
        if rules.drop_empty && line.is_empty() {
            continue;
        }
        if rules.drop_html && tag_char_ratio(&line) > rules.html_ratio {
            continue;
        }
        if rules.drop_script && looks_like_script(&line) {
            continue;
        }
        if rules.drop_duplicates && !seen.insert(line.clone()) {
            continue;
        }
        lines.push(line);
    }
    RawCorpus {
        lines,
        source_name: raw.source_name.clone(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub train: RawCorpus,
    pub valid: RawCorpus,
    pub test: RawCorpus,
    pub ratios: (f64, f64, f64),
}

/// Line counts for a sequential split; flooring remainders go to test.
pub fn split_sizes(total: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // guard against 0.29 * 100 = 28.999999999999996
    let floor = |r: f64| (r * total as f64 + 1e-9).floor() as usize;
    let train = floor(ratios.0).min(total);
    let valid = floor(ratios.1).min(total - train);
    (train, valid, total - train - valid)
}

/// Splits into contiguous train/valid/test blocks without shuffling.
pub fn split_corpus(corpus: &RawCorpus, ratios: (f64, f64, f64)) -> Result<CorpusSplit> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {a}, {b}, {c}"
        )));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    let total = corpus.len();
    if total < 10 {
        return Err(Error::Size(format!(
            "{} has {total} lines, at least 10 are needed to split",
            corpus.source_name
        )));
    }
    let (n_train, n_valid, n_test) = split_sizes(total, ratios);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::Size(format!(
            "{total} lines give an empty split ({n_train}/{n_valid}/{n_test})"
        )));
    }
    let part = |range: std::ops::Range<usize>, suffix: &str| {
        RawCorpus::new(
            format!("{}.{suffix}", corpus.source_name),
            corpus.lines[range].to_vec(),
        )
    };
    Ok(CorpusSplit {
        train: part(0..n_train, "train"),
        valid: part(n_train..n_train + n_valid, "valid"),
        test: part(n_train + n_valid..total, "test"),
        ratios,
    })
}

/// Concatenates corpora in order; the source name joins the labels with `+`.
pub fn concat_corpora(corpora: &[RawCorpus]) -> Result<RawCorpus> {
    if corpora.is_empty() {
        return Err(Error::Usage("cannot concatenate an empty list of corpora".into()));
    }
    if corpora.len() == 1 {
        return Ok(corpora[0].clone());
    }
    let lines = corpora.iter().flat_map(|c| c.lines.iter().cloned()).collect();
    let name = corpora
        .iter()
        .map(|c| c.source_name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(RawCorpus::new(name, lines))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub line_count: usize,
    pub word_count: usize,
    /// Unicode scalar values, plus one per line terminator.
    pub char_count: usize,
}

pub fn corpus_stats(corpus: &RawCorpus) -> CorpusStats {
    corpus
        .lines
        .iter()
        .fold(CorpusStats::default(), |acc, line| CorpusStats {
            line_count: acc.line_count + 1,
            word_count: acc.word_count + line.split_whitespace().count(),
            char_count: acc.char_count + line.chars().count() + 1,
        })
}
