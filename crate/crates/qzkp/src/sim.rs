//! Parallel, audited sessions and sweeps over the in-process driver.
//!
//! Rounds are independent: each draws from streams keyed by
//! `(seed, row, round)`, so results do not depend on thread scheduling.

use rayon::prelude::*;

use qzkp_core::analysis::{real_vs_estimated, RealVsEstimated, SweepPoint, SweepRow};
use qzkp_core::protocol::{run_round, Parties, ProtocolConfig, RoundId, RoundResult, SessionStats};
use qzkp_core::wire::{transcript_audit, AuditReport, FragmentBalance};

/// What is kept of a round after its transcript has been audited.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditedRound {
    pub result: RoundResult,
    pub audit: AuditReport,
    pub balance: FragmentBalance,
    /// `None` when the round aborted before the sifted strings were complete.
    pub real_vs_estimated: Option<RealVsEstimated>,
}

pub fn audited_round(cfg: &ProtocolConfig, parties: &Parties, id: RoundId) -> AuditedRound {
    let rec = run_round(cfg, parties, id);
    let audit = transcript_audit(&rec.transcript, &rec.secrets);
    let mut balance = FragmentBalance::default();
    balance.add_transcript(&rec.transcript);
    let complete = !rec.result.aborted() && rec.delta_a.len() == cfg.target_sifted_len;
    let real_vs_estimated = complete
        .then(|| real_vs_estimated(&rec.delta_a, &rec.delta_b, cfg.fragment_len()).ok())
        .flatten();
    AuditedRound {
        result: rec.result,
        audit,
        balance,
        real_vs_estimated,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub stats: SessionStats,
    /// `(round, report)` for every round whose transcript leaked.
    pub audit_failures: Vec<(u32, AuditReport)>,
    pub balance: FragmentBalance,
    pub real_vs_estimated: Vec<RealVsEstimated>,
}

impl SessionReport {
    pub fn from_rounds(rounds: Vec<AuditedRound>) -> Self {
        let mut balance = FragmentBalance::default();
        let mut audit_failures = Vec::new();
        let mut rve = Vec::new();
        let mut results = Vec::with_capacity(rounds.len());
        for (i, r) in rounds.into_iter().enumerate() {
            balance.ones += r.balance.ones;
            balance.bits += r.balance.bits;
            balance.fragments += r.balance.fragments;
            if !r.audit.passed() {
                audit_failures.push((i as u32, r.audit));
            }
            rve.extend(r.real_vs_estimated);
            results.push(r.result);
        }
        Self {
            stats: SessionStats::from_rounds(results),
            audit_failures,
            balance,
            real_vs_estimated: rve,
        }
    }

    pub fn audit_passed(&self) -> bool {
        self.audit_failures.is_empty()
    }
}

/// `cfg.iterations` rounds of row `row`, in parallel.
pub fn run_session(cfg: &ProtocolConfig, parties: &Parties, seed: u64, row: u32) -> SessionReport {
    let rounds = (0..cfg.iterations as u32)
        .into_par_iter()
        .map(|round| audited_round(cfg, parties, RoundId { seed, row, round }))
        .collect();
    SessionReport::from_rounds(rounds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub sessions: Vec<SessionReport>,
}

impl SweepReport {
    pub fn audit_passed(&self) -> bool {
        self.sessions.iter().all(SessionReport::audit_passed)
    }
}

/// Every round of every row in one parallel pass; row `i` uses stream row `i`.
pub fn run_sweep(base: &ProtocolConfig, points: &[SweepPoint], parties: &Parties, seed: u64) -> SweepReport {
    let configs: Vec<ProtocolConfig> = points.iter().map(|p| p.apply(base)).collect();
    let jobs: Vec<(usize, u32)> = configs
        .iter()
        .enumerate()
        .flat_map(|(row, c)| (0..c.iterations as u32).map(move |round| (row, round)))
        .collect();
    let mut done: Vec<(usize, AuditedRound)> = jobs
        .into_par_iter()
        .map(|(row, round)| {
            let id = RoundId { seed, row: row as u32, round };
            (row, audited_round(&configs[row], parties, id))
        })
        .collect();
    let mut sessions = Vec::with_capacity(points.len());
    let mut rows = Vec::with_capacity(points.len());
    for (row, point) in points.iter().enumerate().rev() {
        let split = done.partition_point(|(r, _)| *r < row);
        let rounds = done.split_off(split).into_iter().map(|(_, r)| r).collect();
        let report = SessionReport::from_rounds(rounds);
        rows.push(SweepRow::from_stats(point, &report.stats));
        sessions.push(report);
    }
    rows.reverse();
    sessions.reverse();
    SweepReport { rows, sessions }
}
