//! Closed-form QBER expressions, estimator statistics and loss sweeps.

use alloc::vec::Vec;

use crate::bits::{hamming_fraction, BitError, BitString};
use crate::photonics::{ChannelModel, FIBER_ALPHA_DB_PER_KM};
use crate::protocol::{fragment_len_for, run_session, Parties, ProtocolConfig, SessionStats};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("X-basis fraction r={0} must lie in (0, 0.5]")]
    BasisFraction(f64),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("fragment length {n} exceeds sifted length {len}")]
    FragmentLen { n: usize, len: usize },
    #[error(transparent)]
    Bits(#[from] BitError),
}

/// An attacked biased-basis session: Alice and the legitimate receiver both
/// pick X with probability `r`, the attacker measures in Z with
/// probability `p_b_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberTheoryInputs {
    pub r: f64,
    pub p_b_z: f64,
    /// Signal-class probability; scales both bases alike and cancels.
    pub p_mu: f64,
}

impl QberTheoryInputs {
    pub fn new(r: f64, p_b_z: f64) -> Result<Self, AnalysisError> {
        let inp = Self { r, p_b_z, p_mu: 0.7 };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.r > 0.0 && self.r <= 0.5) {
            return Err(AnalysisError::BasisFraction(self.r));
        }
        for p in [self.p_b_z, self.p_mu] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AnalysisError::Probability(p));
            }
        }
        Ok(())
    }

    pub fn p_b_x(&self) -> f64 {
        1.0 - self.p_b_z
    }

    /// Error rate on Z-prepared sifted slots.
    pub fn e_b_z(&self) -> f64 {
        self.p_b_x() / 2.0
    }

    /// Error rate on X-prepared sifted slots.
    pub fn e_b_x(&self) -> f64 {
        self.p_b_z / 2.0
    }

    pub fn p_a_z(&self) -> f64 {
        (1.0 - self.r) * self.p_mu
    }

    pub fn p_a_x(&self) -> f64 {
        self.r * self.p_mu
    }
}

/// `((1-r)^2 p_B^X + r^2 p_B^Z) / (2((1-r)^2 + r^2))`.
pub fn theoretical_qber(inp: &QberTheoryInputs) -> f64 {
    let wz = (1.0 - inp.r) * (1.0 - inp.r);
    let wx = inp.r * inp.r;
    let q = (wz * inp.p_b_x() + wx * inp.p_b_z) / (2.0 * (wz + wx));
    debug_assert!((q - theoretical_qber_weighted(inp)).abs() < 1e-12);
    q
}

/// Same quantity as the `p_A`-squared-weighted average of `e_B^Z`, `e_B^X`.
pub fn theoretical_qber_weighted(inp: &QberTheoryInputs) -> f64 {
    let (az, ax) = (inp.p_a_z(), inp.p_a_x());
    (az * az * inp.e_b_z() + ax * ax * inp.e_b_x()) / (az * az + ax * ax)
}

/// Attacker-optimal `(qber, p_B^Z)`.
///
/// The expression is affine in `p_B^Z` with slope `(r^2 - (1-r)^2) / (2(...))`,
/// which is negative for `r < 1/2`, so the minimum sits at `p_B^Z = 1`. At
/// `r = 1/2` every `p_B^Z` gives 1/4; the reported argmin is then 1/2.
pub fn optimal_attack_qber(r: f64) -> Result<(f64, f64), AnalysisError> {
    let p = if r == 0.5 { 0.5 } else { 1.0 };
    let inp = QberTheoryInputs::new(r, p)?;
    Ok((theoretical_qber(&inp), p))
}

/// Expected QBER of a prover who ignores the schedule in this protocol.
///
/// Every detected slot is sifted, so the two preparation bases enter
/// linearly: `(1-r) p_B^X / 2 + r p_B^Z / 2`, on top of the optical error
/// `e` of the channel: `e + (1 - 2e) * attack`.
pub fn protocol_attack_qber(r: f64, p_b_z: f64, optical_error: f64) -> f64 {
    let attack = (1.0 - r) * (1.0 - p_b_z) / 2.0 + r * p_b_z / 2.0;
    optical_error + (1.0 - 2.0 * optical_error) * attack
}

/// Binomial standard error `sqrt(q(1-q)/n)` of a fragment estimate.
pub fn qber_sampling_sigma(q: f64, n_bits: usize) -> f64 {
    assert!(n_bits >= 1, "sampling sigma needs at least one bit");
    libm::sqrt(q * (1.0 - q) / n_bits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealVsEstimated {
    pub qber_full: f64,
    pub qber_fragment: f64,
    pub abs_diff: f64,
}

/// QBER of the full sifted strings against the estimate from their `n`-bit prefix.
pub fn real_vs_estimated(
    delta_a: &BitString,
    delta_b: &BitString,
    n: usize,
) -> Result<RealVsEstimated, AnalysisError> {
    let qber_full = hamming_fraction(delta_a, delta_b)?;
    if n > delta_a.len() {
        return Err(AnalysisError::FragmentLen { n, len: delta_a.len() });
    }
    let qber_fragment = hamming_fraction(
        &delta_a.slice(0, n).expect("n <= len"),
        &delta_b.slice(0, n).expect("n <= len"),
    )?;
    Ok(RealVsEstimated {
        qber_full,
        qber_fragment,
        abs_diff: libm::fabs(qber_full - qber_fragment),
    })
}

/// Settings of one measured configuration: `(distance_km, losses_db, L_delta, iterations)`.
/// Distance 0 stands for back-to-back.
pub const TABLE1_HONEST: [(f64, f64, usize, usize); 15] = [
    (0.0, 0.0, 2048, 173),
    (11.90, 2.50, 1024, 189),
    (13.62, 2.86, 1024, 858),
    (16.14, 3.39, 1024, 165),
    (17.48, 3.67, 1024, 171),
    (20.19, 4.24, 1024, 612),
    (22.62, 4.75, 512, 229),
    (27.81, 5.84, 512, 10),
    (32.48, 6.82, 512, 10),
    (37.38, 7.85, 512, 10),
    (44.00, 9.24, 512, 11),
    (49.00, 10.29, 256, 11),
    (51.14, 10.74, 256, 11),
    (56.33, 11.83, 256, 10),
    (60.62, 12.73, 256, 26),
];

/// Back-to-back dishonest configuration: `(L_delta, iterations)`.
pub const TABLE1_DISHONEST: (usize, usize) = (2048, 190);

/// One row of a sweep plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub losses_db: f64,
    pub target_sifted_len: usize,
    pub iterations: usize,
}

impl SweepPoint {
    pub fn table1() -> Vec<SweepPoint> {
        TABLE1_HONEST
            .iter()
            .map(|&(_, losses_db, target_sifted_len, iterations)| SweepPoint {
                losses_db,
                target_sifted_len,
                iterations,
            })
            .collect()
    }

    /// `base` with this row's link loss, sifted length and iteration count.
    /// The receiver-side loss and detector of `base` are kept.
    pub fn apply(&self, base: &ProtocolConfig) -> ProtocolConfig {
        let mut cfg = base.clone();
        cfg.channel = ChannelModel {
            alpha_db_per_km: FIBER_ALPHA_DB_PER_KM,
            length_km: self.losses_db / FIBER_ALPHA_DB_PER_KM,
            extra_loss_db: 0.0,
            ..base.channel
        };
        cfg.target_sifted_len = self.target_sifted_len;
        cfg.iterations = self.iterations;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub distance_km: f64,
    pub losses_db: f64,
    pub l_delta: usize,
    pub iterations: usize,
    pub time_s_per_bit: f64,
    pub mean_qber: f64,
    pub sigma_qber: f64,
}

impl SweepRow {
    pub fn from_stats(point: &SweepPoint, stats: &SessionStats) -> Self {
        Self {
            distance_km: point.losses_db / FIBER_ALPHA_DB_PER_KM,
            losses_db: point.losses_db,
            l_delta: point.target_sifted_len,
            iterations: stats.iterations(),
            time_s_per_bit: stats.mean_time_per_bit_s(),
            mean_qber: stats.mean_qber,
            sigma_qber: stats.sigma_qber,
        }
    }
}

/// Runs every point in order; row `i` uses random streams of row `i`.
pub fn build_sweep(base: &ProtocolConfig, points: &[SweepPoint], parties: &Parties, seed: u64) -> Vec<SweepRow> {
    points
        .iter()
        .enumerate()
        .map(|(row, p)| {
            let stats = run_session(&p.apply(base), parties, seed, row as u32);
            SweepRow::from_stats(p, &stats)
        })
        .collect()
}

/// Fragment length a point will use.
pub fn sweep_fragment_len(base: &ProtocolConfig, point: &SweepPoint) -> usize {
    fragment_len_for(base.fragment_fraction, point.target_sifted_len)
}

/// Ranks starting at 1; tied values share their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
/// `None` for fewer than two points or constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(r: f64, p: f64) -> f64 {
        theoretical_qber(&QberTheoryInputs::new(r, p).unwrap())
    }

    #[test]
    fn eq_examples() {
        assert_eq!(q(0.5, 0.5), 0.25);
        assert_eq!(q(0.5, 1.0), 0.25);
        assert!((q(0.3, 1.0) - 0.09 / 1.16).abs() < 1e-15);
    }

    #[test]
    fn forms_agree_on_grid() {
        for i in 1..=100 {
            let r = 0.5 * i as f64 / 100.0;
            for j in 0..100 {
                let inp = QberTheoryInputs::new(r, j as f64 / 99.0).unwrap();
                assert!((theoretical_qber(&inp) - theoretical_qber_weighted(&inp)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balanced_bases_pin_a_quarter() {
        for j in 0..=1000 {
            assert_eq!(q(0.5, j as f64 / 1000.0), 0.25);
        }
    }

    #[test]
    fn input_validation() {
        assert_eq!(QberTheoryInputs::new(0.0, 0.5), Err(AnalysisError::BasisFraction(0.0)));
        assert_eq!(QberTheoryInputs::new(0.6, 0.5), Err(AnalysisError::BasisFraction(0.6)));
        assert_eq!(QberTheoryInputs::new(0.3, 1.1), Err(AnalysisError::Probability(1.1)));
        assert!(optimal_attack_qber(0.0).is_err());
        assert!(optimal_attack_qber(0.51).is_err());
    }

    #[test]
    fn optimal_attack_examples() {
        assert_eq!(optimal_attack_qber(0.5).unwrap().0, 0.25);
        let (rate, p) = optimal_attack_qber(0.3).unwrap();
        assert_eq!(p, 1.0);
        assert!((rate - 0.0776).abs() < 1e-4);
        assert!(optimal_attack_qber(1e-6).unwrap().0 < 1e-11);
    }

    #[test]
    fn protocol_attack_form() {
        assert_eq!(protocol_attack_qber(0.5, 0.5, 0.0), 0.25);
        assert_eq!(protocol_attack_qber(0.3, 1.0, 0.0), 0.15);
        assert_eq!(protocol_attack_qber(0.5, 0.0, 0.0), 0.25);
        // coincides with the squared-weight form where either factor is balanced
        assert!((protocol_attack_qber(0.2, 0.5, 0.0) - q(0.2, 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sampling_sigma_examples() {
        assert!((qber_sampling_sigma(0.25, 307) - 0.0247).abs() < 1e-4);
        assert_eq!(qber_sampling_sigma(0.0, 307), 0.0);
        assert_eq!(qber_sampling_sigma(0.5, 1), 0.5);
    }

    #[test]
    fn real_vs_estimated_examples() {
        let a: BitString = "110010111".parse().unwrap();
        let z = real_vs_estimated(&a, &a, 4).unwrap();
        assert_eq!((z.qber_full, z.qber_fragment, z.abs_diff), (0.0, 0.0, 0.0));
        let b: BitString = "010010110".parse().unwrap();
        let full = real_vs_estimated(&a, &b, 9).unwrap();
        assert_eq!(full.abs_diff, 0.0);
        let part = real_vs_estimated(&a, &b, 3).unwrap();
        assert!((part.qber_fragment - 1.0 / 3.0).abs() < 1e-15);
        assert!((part.qber_full - 2.0 / 9.0).abs() < 1e-15);
        assert!(real_vs_estimated(&a, &b, 10).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[2.0, 4.0, 6.0, 8.0, 100.0]), Some(1.0));
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0; 5]), None);
        // textbook case with ties: ranks 1.5, 1.5, 3 against 1, 2, 3
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn table_rows_convert_losses_to_distance() {
        for &(d, l, _, _) in &TABLE1_HONEST[1..] {
            assert!((l / FIBER_ALPHA_DB_PER_KM - d).abs() < 0.02, "{d} {l}");
        }
    }

    #[test]
    fn noiseless_sweep_is_all_zero() {
        let base = ProtocolConfig {
            block_len: 512,
            channel: ChannelModel::ideal(),
            detector: crate::photonics::DetectorModel::ideal(),
            ..ProtocolConfig::default()
        };
        let points = [
            SweepPoint { losses_db: 0.0, target_sifted_len: 256, iterations: 3 },
            SweepPoint { losses_db: 0.0, target_sifted_len: 128, iterations: 2 },
        ];
        let mut base = base;
        base.channel.rx_loss_db = 0.0;
        let rows = build_sweep(&base, &points, &Parties::honest(b"k"), 1);
        assert!(rows.iter().all(|r| r.mean_qber == 0.0 && r.sigma_qber == 0.0));
        assert_eq!(rows[1].iterations, 2);
    }

    proptest! {
        #[test]
        fn qber_is_affine_between_extremes(r in 0.001f64..=0.5, p in 0.0f64..=1.0) {
            let lo = q(r, 1.0);
            let hi = q(r, 0.0);
            let mid = (1.0 - p) * hi + p * lo;
            prop_assert!((q(r, p) - mid).abs() < 1e-12);
            prop_assert!(lo <= hi + 1e-15);
        }

        #[test]
        fn spearman_is_bounded(xs in proptest::collection::vec(-1e3f64..1e3, 2..30), seed in any::<u64>()) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * ((seed >> (i % 64)) & 1) as f64 - i as f64).collect();
            if let Some(rho) = spearman(&xs, &ys) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            }
        }
    }
}
