//! CSV, JSON and plain-text renderings of sessions and sweeps.

use std::io::Write;

use serde::Serialize;

use qzkp_core::analysis::SweepRow;
use qzkp_core::protocol::{RoundResult, Verdict};

use crate::sim::SessionReport;

pub const CSV_HEADER: [&str; 7] = [
    "distance_km",
    "losses_db",
    "L_delta",
    "iterations",
    "time_s_per_bit",
    "qber_mean",
    "qber_sigma",
];

#[derive(Serialize)]
struct CsvRow {
    distance_km: f64,
    losses_db: f64,
    #[serde(rename = "L_delta")]
    l_delta: usize,
    iterations: usize,
    time_s_per_bit: f64,
    qber_mean: f64,
    qber_sigma: f64,
}

impl From<&SweepRow> for CsvRow {
    fn from(r: &SweepRow) -> Self {
        Self {
            distance_km: r.distance_km,
            losses_db: r.losses_db,
            l_delta: r.l_delta,
            iterations: r.iterations,
            time_s_per_bit: r.time_s_per_bit,
            qber_mean: r.mean_qber,
            qber_sigma: r.sigma_qber,
        }
    }
}

pub fn write_csv(w: impl Write, rows: &[SweepRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(CSV_HEADER)?;
    }
    for r in rows {
        out.serialize(CsvRow::from(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

fn verdict_name(v: Verdict) -> String {
    match v {
        Verdict::Accept => "accept".into(),
        Verdict::Reject => "reject".into(),
        Verdict::Error(reason) => format!("error:{reason:?}"),
    }
}

#[derive(Debug, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub t0: u64,
    pub qber: f64,
    pub verdict: String,
    pub sifted_len: usize,
    pub fragment_len: usize,
    pub pulses_sent: u64,
    pub elapsed_model_s: f64,
}

impl RoundSummary {
    pub fn new(round: usize, r: &RoundResult) -> Self {
        Self {
            round,
            t0: r.t0,
            qber: r.qber_est,
            verdict: verdict_name(r.verdict),
            sifted_len: r.sifted_len,
            fragment_len: r.fragment_len,
            pulses_sent: r.pulses_sent,
            elapsed_model_s: r.elapsed_model_s,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SessionSummary {
    pub iterations: usize,
    pub qber_mean: f64,
    pub qber_sigma: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub aborted: usize,
    pub time_s_per_bit: f64,
    pub audit_passed: bool,
    pub fragment_ones_fraction: f64,
    pub rounds: Vec<RoundSummary>,
}

impl SessionSummary {
    pub fn new(report: &SessionReport) -> Self {
        let s = &report.stats;
        Self {
            iterations: s.iterations(),
            qber_mean: s.mean_qber,
            qber_sigma: s.sigma_qber,
            accepted: s.accept_count,
            rejected: s.reject_count(),
            aborted: s.aborted_count,
            time_s_per_bit: s.mean_time_per_bit_s(),
            audit_passed: report.audit_passed(),
            fragment_ones_fraction: report.balance.ones_fraction(),
            rounds: s.rounds.iter().enumerate().map(|(i, r)| RoundSummary::new(i, r)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub fn session_text(report: &SessionReport) -> String {
    let s = &report.stats;
    let sigma = if s.sigma_defined { format!("{:.4}", s.sigma_qber) } else { "n/a".into() };
    format!(
        "rounds {}  accepted {}  rejected {}  aborted {}\nQBER mean {:.4}  sigma {}\ntime per bit {:.4} s  audit {}",
        s.iterations(),
        s.accept_count,
        s.reject_count(),
        s.aborted_count,
        s.mean_qber,
        sigma,
        s.mean_time_per_bit_s(),
        if report.audit_passed() { "passed" } else { "FAILED" },
    )
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("| Distance (km) | Losses (dB) | L_delta | Iterations | Time (s) | QBER | sigma |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let distance = if r.losses_db == 0.0 { "B2B".to_string() } else { format!("{:.2}", r.distance_km) };
        out.push_str(&format!(
            "| {} | {:.2} | {} | {} | {:.3} | {:.3} | {:.3} |\n",
            distance, r.losses_db, r.l_delta, r.iterations, r.time_s_per_bit, r.mean_qber, r.sigma_qber
        ));
    }
    out
}
