//! Bisection of one detector constant until the simulated honest error
//! floor matches a target QBER.
//!
//! Every evaluation replays the same rounds (same seed, same streams), so
//! the simulated mean is a monotone step function of the parameter and
//! bisection is well defined.

use rayon::prelude::*;

use qzkp_core::photonics::{expected_honest_qber, DetectorModel};
use qzkp_core::protocol::{run_round, Parties, ProtocolConfig, RoundId};

/// Rows of the stream layout reserved for calibration runs.
const CALIBRATION_ROW: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CalibrationParam {
    /// Polarization misalignment ahead of the analyzer.
    Misalignment,
    /// Per-gate dark-click probability.
    DarkProb,
}

impl CalibrationParam {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationParam::Misalignment => "misalignment",
            CalibrationParam::DarkProb => "dark_prob",
        }
    }

    /// Largest value searched.
    pub fn upper(self) -> f64 {
        0.5
    }

    pub fn apply(self, det: &DetectorModel, value: f64) -> DetectorModel {
        match self {
            CalibrationParam::Misalignment => DetectorModel { misalignment: value, ..*det },
            CalibrationParam::DarkProb => DetectorModel { dark_prob: value, ..*det },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRequest {
    pub target: f64,
    pub param: CalibrationParam,
    pub rounds: usize,
    pub seed: u64,
    /// Accepted distance between the simulated mean and the target.
    pub tolerance: f64,
}

impl CalibrationRequest {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            param: CalibrationParam::Misalignment,
            rounds: 50,
            seed: 1,
            tolerance: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub param: CalibrationParam,
    pub value: f64,
    pub achieved_qber: f64,
    pub detector: DetectorModel,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error(
        "target QBER {target} is unreachable by varying {}: achievable range is ({floor:.5}, {ceiling:.5})",
        param.name()
    )]
    Unreachable { target: f64, param: CalibrationParam, floor: f64, ceiling: f64 },
    #[error("calibration needs at least 50 rounds per evaluation, got {0}")]
    TooFewRounds(usize),
    #[error("closest simulated mean {achieved:.5} at {value} misses target {target} by more than {tolerance}")]
    NotConverged { target: f64, value: f64, achieved: f64, tolerance: f64 },
    #[error(transparent)]
    Config(#[from] qzkp_core::protocol::ConfigError),
}

/// Analytic honest QBER over the search range: `(floor, ceiling)`.
pub fn achievable_range(base: &ProtocolConfig, param: CalibrationParam) -> (f64, f64) {
    let at = |v: f64| expected_honest_qber(&base.intensity, &base.channel, &param.apply(&base.detector, v));
    (at(0.0), at(param.upper()))
}

/// Mean estimated QBER of `rounds` honest rounds with `det`.
pub fn simulated_floor(base: &ProtocolConfig, det: &DetectorModel, rounds: usize, seed: u64) -> f64 {
    let cfg = ProtocolConfig { detector: *det, ..base.clone() };
    let parties = Parties::honest(b"calibration");
    let sum: f64 = (0..rounds as u32)
        .into_par_iter()
        .map(|round| run_round(&cfg, &parties, RoundId { seed, row: CALIBRATION_ROW, round }).result.qber_est)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / rounds as f64
}

fn bisect(mut lo: f64, mut hi: f64, steps: usize, mut below: impl FnMut(f64) -> bool) -> (f64, f64) {
    for _ in 0..steps {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

pub fn calibrate(base: &ProtocolConfig, req: &CalibrationRequest) -> Result<Calibration, CalibrationError> {
    base.validate()?;
    if req.rounds < 50 {
        return Err(CalibrationError::TooFewRounds(req.rounds));
    }
    let (floor, ceiling) = achievable_range(base, req.param);
    if !(req.target > floor && req.target < ceiling) {
        return Err(CalibrationError::Unreachable { target: req.target, param: req.param, floor, ceiling });
    }

    // analytic estimate first, then narrow the simulated search around it
    let analytic = |v| expected_honest_qber(&base.intensity, &base.channel, &req.param.apply(&base.detector, v));
    let (guess, _) = bisect(0.0, req.param.upper(), 60, |v| analytic(v) < req.target);

    let mut evaluations = 0;
    let mut sim = |v: f64| {
        evaluations += 1;
        simulated_floor(base, &req.param.apply(&base.detector, v), req.rounds, req.seed)
    };
    let mut hi = (2.0 * guess).min(req.param.upper());
    if sim(hi) < req.target {
        hi = req.param.upper();
    }
    let mut samples = Vec::new();
    let (lo, hi) = bisect(0.0, hi, 32, |v| {
        let q = sim(v);
        samples.push((v, q));
        q < req.target
    });
    let (value, achieved) = samples
        .iter()
        .copied()
        .chain([(lo, sim(lo)), (hi, sim(hi))])
        .min_by(|a, b| (a.1 - req.target).abs().total_cmp(&(b.1 - req.target).abs()))
        .expect("at least two samples");
    if (achieved - req.target).abs() > req.tolerance {
        return Err(CalibrationError::NotConverged {
            target: req.target,
            value,
            achieved,
            tolerance: req.tolerance,
        });
    }
    Ok(Calibration {
        param: req.param,
        value,
        achieved_qber: achieved,
        detector: req.param.apply(&base.detector, value),
        evaluations,
    })
}
