//! Bookkeeping for the acceptance run: verdicts, time budgets and the
//! one-line-per-criterion report format.

use std::fmt;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub verdict: Verdict,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Outcome { verdict: Verdict::Pass, detail: detail.into() }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Outcome { verdict: Verdict::Fail, detail: detail.into() }
    }

    pub fn skip(detail: impl Into<String>) -> Self {
        Outcome { verdict: Verdict::Skip, detail: detail.into() }
    }

    /// Pass when `ok`, fail otherwise, with the same detail either way.
    pub fn check(ok: bool, detail: impl Into<String>) -> Self {
        if ok {
            Self::pass(detail)
        } else {
            Self::fail(detail)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Line {
    pub id: String,
    pub title: String,
    pub outcome: Outcome,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{:>3}] {} ({:.1}s / {}s): {}",
            self.outcome.verdict,
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.outcome.detail
        )
    }
}

/// Runs one check and fails it if it overran its budget. A panic inside the
/// check is reported as a failure rather than aborting the run.
pub fn run_timed(id: &str, title: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(check)) {
        Ok(o) => o,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::fail(format!("panicked: {msg}"))
        }
    };
    let elapsed = start.elapsed();
    let outcome = if outcome.verdict == Verdict::Pass && elapsed > budget {
        Outcome::fail(format!("{} (over time budget)", outcome.detail))
    } else {
        outcome
    };
    Line {
        id: id.to_string(),
        title: title.to_string(),
        outcome,
        elapsed,
        budget,
    }
}
