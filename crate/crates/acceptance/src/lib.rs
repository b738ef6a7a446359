//! Bookkeeping for the acceptance run: each criterion returns an
//! [`Outcome`], which is timed against its budget and printed as one line.

use std::time::{Duration, Instant};

/// Result of one criterion's checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    /// Short evidence line, e.g. worst observed error.
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    /// Folds several sub-checks; fails if any does, keeping the first
    /// failure's detail.
    pub fn all(parts: Vec<Outcome>) -> Self {
        match parts.iter().find(|o| !o.passed) {
            Some(f) => f.clone(),
            None => Outcome::new(
                true,
                parts
                    .iter()
                    .map(|o| o.detail.as_str())
                    .collect::<Vec<_>>()
                    .join("; "),
            ),
        }
    }
}

#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    /// Runs `check`, fails it if it exceeds `budget`, and prints the line.
    pub fn run(&mut self, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = outcome.passed && in_time;
        let timing = format!("{:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs());
        let line = format!(
            "{} {name}: {} [{timing}{}]",
            if passed { "PASS" } else { "FAIL" },
            outcome.detail,
            if in_time { "" } else { ", over budget" },
        );
        println!("{line}");
        self.lines.push((line, passed));
    }

    pub fn failures(&self) -> usize {
        self.lines.iter().filter(|(_, ok)| !ok).count()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}
