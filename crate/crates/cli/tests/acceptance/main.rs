//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p salm-cli --test acceptance`; pass criterion
//! numbers (`-- 3 7`) to run a subset. A criterion fails if its check fails,
//! panics, or exceeds its time budget.

mod desk;
mod exactness;
mod models;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

pub type Check = Result<String, String>;

/// Turns a condition into a check result.
pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "BPE merges equal brute-force oracle; round-trip",
        budget: Duration::from_secs(30),
        run: exactness::bpe_oracle,
    },
    Criterion {
        id: 2,
        name: "Kneser-Ney normalisation, oracle scores, ARPA round-trip",
        budget: Duration::from_secs(60),
        run: exactness::kneser_ney,
    },
    Criterion {
        id: 3,
        name: "finite-difference gradients, layers and architectures",
        budget: Duration::from_secs(180),
        run: models::gradients,
    },
    Criterion {
        id: 4,
        name: "architecture invariants",
        budget: Duration::from_secs(60),
        run: models::invariants,
    },
    Criterion {
        id: 5,
        name: "metric identities and uniform 8-bit fixture",
        budget: Duration::from_secs(5),
        run: exactness::metrics,
    },
    Criterion {
        id: 6,
        name: "evaluation windows score every token once",
        budget: Duration::from_secs(5),
        run: exactness::windows,
    },
    Criterion {
        id: 7,
        name: "desk-scale behaviour on the bundled corpus",
        budget: Duration::from_secs(900),
        run: desk::behaviour,
    },
    Criterion {
        id: 8,
        name: "equal seeds give byte-identical artifacts",
        budget: Duration::from_secs(300),
        run: desk::determinism,
    },
    Criterion {
        id: 9,
        name: "multilingual training, single-corpus evaluation",
        budget: Duration::from_secs(300),
        run: desk::multilingual,
    },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > c.budget => Err(format!("{d}; over the {} s budget", c.budget.as_secs())),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {} ({}): {detail} [{:.1} s]", c.id, c.name, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
