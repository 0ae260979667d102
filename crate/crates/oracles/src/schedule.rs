//! Reference versions of the batching and stopping rules.

use std::collections::BTreeMap;

/// Early stopping by comparing windows: stop when none of the last
/// `patience` losses beats the minimum of everything before them by more
/// than `tol`.
pub fn should_stop(history: &[f64], patience: usize, tol: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let cut = history.len() - patience;
    let before = history[..cut].iter().copied().fold(f64::INFINITY, f64::min);
    history[cut..].iter().all(|&l| l >= before - tol)
}

/// Multiset of `(input, target)` pairs for every adjacent position inside
/// each of `batch` equal rows of `stream`.
pub fn adjacent_pairs(stream: &[u32], batch: usize) -> BTreeMap<(u32, u32), usize> {
    let width = stream.len() / batch;
    let mut out = BTreeMap::new();
    for b in 0..batch {
        let row = &stream[b * width..(b + 1) * width];
        for p in row.windows(2) {
            *out.entry((p[0], p[1])).or_insert(0) += 1;
        }
    }
    out
}

/// How often each position of an `n`-token stream is scored by windows
/// given as `(scored_start, scored_end)` pairs.
pub fn coverage(n: usize, scored: &[(usize, usize)]) -> Vec<usize> {
    let mut hits = vec![0; n];
    for &(s, e) in scored {
        for h in hits.iter_mut().take(e).skip(s) {
            *h += 1;
        }
    }
    hits
}
