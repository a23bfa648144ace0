//! Acceptance bands evaluated by `--check`.

use std::fmt;

use qzkp_core::analysis::spearman;

use crate::config::{CheckSection, Expectation};
use crate::sim::{SessionReport, SweepReport};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}: {}", self.name, self.detail)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail }
}

fn band(name: &str, value: f64, [lo, hi]: [f64; 2]) -> CheckOutcome {
    outcome(name, (lo..=hi).contains(&value), format!("{value:.5} in [{lo}, {hi}]"))
}

pub fn check_session(check: &CheckSection, report: &SessionReport) -> Vec<CheckOutcome> {
    let s = &report.stats;
    let mut out = vec![outcome(
        "transcript audit",
        report.audit_passed(),
        format!("{} of {} rounds leaked", report.audit_failures.len(), s.iterations()),
    )];
    if let Some(b) = check.qber_mean {
        out.push(band("mean QBER", s.mean_qber, b));
    }
    if let Some(b) = check.qber_sigma {
        out.push(band("QBER sigma", s.sigma_qber, b));
    }
    match check.expect {
        Some(Expectation::AcceptAll) => out.push(outcome(
            "all rounds accepted",
            s.accept_count == s.iterations(),
            format!("{} of {}", s.accept_count, s.iterations()),
        )),
        Some(Expectation::RejectAll) => out.push(outcome(
            "all rounds rejected",
            s.accept_count == 0,
            format!("{} false accepts of {}", s.accept_count, s.iterations()),
        )),
        None => {}
    }
    out
}

pub fn check_sweep(check: &CheckSection, report: &SweepReport) -> Vec<CheckOutcome> {
    let mut out = vec![outcome(
        "transcript audit",
        report.audit_passed(),
        format!("{} rows with leaks", report.sessions.iter().filter(|s| !s.audit_passed()).count()),
    )];
    if let Some(max) = check.max_row_qber {
        let worst = report.rows.iter().map(|r| r.mean_qber).fold(f64::NEG_INFINITY, f64::max);
        out.push(outcome("every row mean QBER", worst < max, format!("max {worst:.5} < {max}")));
    }
    if check.sigma_grows_with_loss {
        let loss: Vec<f64> = report.rows.iter().map(|r| r.losses_db).collect();
        let sigma: Vec<f64> = report.rows.iter().map(|r| r.sigma_qber).collect();
        let rho = spearman(&loss, &sigma);
        out.push(outcome(
            "sigma rank-correlates with loss",
            rho.is_some_and(|r| r > 0.0),
            format!("Spearman {}", rho.map_or("undefined".into(), |r| format!("{r:.3}"))),
        ));
    }
    out
}
