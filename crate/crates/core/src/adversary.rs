//! Dishonest-party strategies.
//!
//! A prover who does not know the basis schedule can only guess bases; a
//! verifier who does not know the secret can prepare in random bases and
//! try to guess the OTP mask.

use crate::bits::BitString;
use crate::photonics::Basis;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ProverStrategy {
    /// Measures every slot in the basis given by its own schedule.
    #[default]
    Honest,
    /// Ignores the schedule and measures in Z with probability `p_z`.
    RandomBasis { p_z: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VerifierStrategy {
    #[default]
    Honest,
    /// Prepares every pulse in a uniformly random basis.
    Guessing,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    #[error("honest prover needs a basis schedule covering slot {0}")]
    MissingSchedule(usize),
    #[error("Z-basis probability {0} outside [0, 1]")]
    Probability(f64),
}


impl ProverStrategy {
    pub fn random_basis(p_z: f64) -> Result<Self, StrategyError> {
        if !(0.0..=1.0).contains(&p_z) {
            return Err(StrategyError::Probability(p_z));
        }
        Ok(ProverStrategy::RandomBasis { p_z })
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        match *self {
            ProverStrategy::RandomBasis { p_z } if !(0.0..=1.0).contains(&p_z) => {
                Err(StrategyError::Probability(p_z))
            }
            _ => Ok(()),
        }
    }

    pub fn is_honest(&self) -> bool {
        matches!(self, ProverStrategy::Honest)
    }
}

/// Basis the prover measures `slot` in.
///
/// The random strategy draws one uniform per slot; the honest one draws none.
pub fn prover_basis(
    strategy: &ProverStrategy,
    slot: usize,
    schedule: Option<&BitString>,
    rng: &mut RngStream,
) -> Result<Basis, StrategyError> {
    match *strategy {
        ProverStrategy::Honest => schedule
            .and_then(|s| s.get(slot))
            .map(Basis::from_bit)
            .ok_or(StrategyError::MissingSchedule(slot)),
        ProverStrategy::RandomBasis { p_z } => Ok(if rng.uniform() < p_z {
            Basis::Z
        } else {
            Basis::X
        }),
    }
}

/// Probability of guessing an `n`-bit OTP mask outright: `2^-n`.
///
/// Returned as an exact power of two; it underflows to zero only past
/// `n = 1074`.
pub fn otp_guess_success_prob(n: u32) -> f64 {
    libm::ldexp(1.0, -(n as i32))
}

/// `log2` of [`otp_guess_success_prob`], exact for every `n`.
pub fn otp_guess_log2_prob(n: u32) -> f64 {
    -(n as f64)
}
