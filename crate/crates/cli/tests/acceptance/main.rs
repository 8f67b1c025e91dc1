//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 2 4`.

mod determinism;
mod geometry;
mod losses;
mod metrics;
mod ordering;
mod visual;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Result of one criterion: pass flag plus a one-line summary of the evidence.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Check = fn() -> Verdict;

const CRITERIA: [(u32, &str, Check); 9] = [
    (1, "correspondence exactness", geometry::correspondence),
    (2, "loss oracle equivalence", losses::oracle_equivalence),
    (3, "gradient checks", losses::gradient_checks),
    (4, "mvee", geometry::mvee_checks),
    (5, "chro-map rotation invariance", visual::rotation_invariance),
    (6, "latent-metric ordering", ordering::latent_ordering),
    (7, "fine-tuning ordering", ordering::finetune_ordering),
    (8, "metric oracles", metrics::metric_oracles),
    (9, "determinism", determinism::determinism),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        failed += !verdict.pass as usize;
        println!("{status} [{id}] {name}: {} ({:.1}s)", verdict.detail, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
