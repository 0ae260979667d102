//! Interpolated modified Kneser-Ney evaluated recursively from counts.
//!
//! Sentences are id sequences ending in their end token; `bos` is a
//! context-only id. Every probability is recomputed from the count tables
//! on demand, with no backoff-form storage.

use std::collections::{HashMap, HashSet};

pub struct KneserNey {
    order: usize,
    vocab: usize,
    /// Adjusted counts per order: raw at the top, continuation below.
    counts: Vec<HashMap<Vec<u32>, u64>>,
    discounts: Vec<[f64; 3]>,
    bos: u32,
}

fn discounts(counts: &HashMap<Vec<u32>, u64>) -> [f64; 3] {
    let n = |k: u64| counts.values().filter(|&&c| c == k).count() as f64;
    let (n1, n2, n3, n4) = (n(1), n(2), n(3), n(4));
    if n1 == 0.0 || n2 == 0.0 || n3 == 0.0 || n4 == 0.0 {
        return [0.75; 3];
    }
    let y = n1 / (n1 + 2.0 * n2);
    [
        (1.0 - 2.0 * y * n2 / n1).clamp(0.0, 1.0),
        (2.0 - 3.0 * y * n3 / n2).clamp(0.0, 2.0),
        (3.0 - 4.0 * y * n4 / n3).clamp(0.0, 3.0),
    ]
}

impl KneserNey {
    /// `vocab` is the number of predictable ids; `bos` must lie outside them.
    pub fn new(sentences: &[Vec<u32>], vocab: usize, order: usize, bos: u32) -> Self {
        let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order + 1];
        for s in sentences {
            let mut padded = vec![bos; order - 1];
            padded.extend_from_slice(s);
            for end in order - 1..padded.len() {
                for k in 1..=order {
                    let gram = padded[end + 1 - k..=end].to_vec();
                    *raw[k].entry(gram).or_insert(0) += 1;
                }
            }
        }
        let mut counts = vec![HashMap::new(); order + 1];
        counts[order] = raw[order].clone();
        for k in 1..order {
            let mut left: HashMap<Vec<u32>, HashSet<u32>> = HashMap::new();
            for gram in raw[k + 1].keys() {
                left.entry(gram[1..].to_vec()).or_default().insert(gram[0]);
            }
            counts[k] = left.into_iter().map(|(g, s)| (g, s.len() as u64)).collect();
        }
        let discounts = (0..=order).map(|k| if k == 0 { [0.0; 3] } else { discounts(&counts[k]) }).collect();
        KneserNey {
            order,
            vocab,
            counts,
            discounts,
            bos,
        }
    }

    fn d(&self, k: usize, c: u64) -> f64 {
        match c {
            0 => 0.0,
            1 => self.discounts[k][0],
            2 => self.discounts[k][1],
            _ => self.discounts[k][2],
        }
    }

    /// P(w | h) at order `h.len() + 1`.
    pub fn prob(&self, h: &[u32], w: u32) -> f64 {
        let k = h.len() + 1;
        let table = &self.counts[k];
        let mut total = 0u64;
        let mut mass = 0.0;
        for (g, &c) in table {
            if &g[..k - 1] == h {
                total += c;
                mass += self.d(k, c);
            }
        }
        let mut key = h.to_vec();
        key.push(w);
        let c = table.get(&key).copied().unwrap_or(0);
        if k == 1 {
            let total = total as f64;
            return (c as f64 - self.d(1, c)) / total + mass / total / self.vocab as f64;
        }
        let lower = self.prob(&h[1..], w);
        if total == 0 {
            return lower;
        }
        let total = total as f64;
        (c as f64 - self.d(k, c)) / total + mass / total * lower
    }

    /// log2 probability of each token of a sentence.
    pub fn sentence_log2probs(&self, s: &[u32]) -> Vec<f64> {
        let mut ctx = vec![self.bos; self.order - 1];
        s.iter()
            .map(|&w| {
                let p = self.prob(&ctx[ctx.len() - (self.order - 1)..], w).log2();
                ctx.push(w);
                p
            })
            .collect()
    }
}
