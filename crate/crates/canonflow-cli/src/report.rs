//! Invariant check records and the report printer shared by `verify` and
//! `gauge-check`.

pub struct Check {
    pub name: &'static str,
    pub slack: f64,
    pub tol: f64,
    pub note: Option<String>,
}

impl Check {
    pub fn new(name: &'static str, slack: f64, tol: f64) -> Check {
        Check { name, slack, tol, note: None }
    }

    pub fn with_note(name: &'static str, slack: f64, tol: f64, note: String) -> Check {
        Check { name, slack, tol, note: Some(note) }
    }

    /// Boolean outcome encoded as slack 0 (ok) or 1 (violated).
    pub fn boolean(name: &'static str, ok: bool, note: String) -> Check {
        Check { name, slack: if ok { 0.0 } else { 1.0 }, tol: 0.5, note: Some(note) }
    }

    pub fn pass(&self) -> bool {
        self.slack.is_finite() && self.slack <= self.tol
    }
}

pub fn print_section(title: &str, checks: &[Check]) {
    println!("[{title}]");
    for c in checks {
        let verdict = if c.pass() { "PASS" } else { "FAIL" };
        let note = c.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default();
        println!(
            "  {verdict}  {:<38} slack {:>10.3e}  tol {:>8.1e}{note}",
            c.name, c.slack, c.tol
        );
    }
}

pub fn summarize(all: &[Check]) -> bool {
    let failed = all.iter().filter(|c| !c.pass()).count();
    if failed == 0 {
        println!("all {} invariants hold", all.len());
        true
    } else {
        println!("{failed} of {} invariants FAILED", all.len());
        false
    }
}
