//! Stochastic model of the quantum stage.
//!
//! Weak coherent pulses of mean photon number `mu` (signal), `nu` (decoy) or
//! zero (vacuum) cross a fiber with attenuation and a lossy receiver, then hit
//! a two-detector polarization analyser. A photon click occurs with
//! probability `1 - exp(-mu_eff * eta * efficiency)`. When the bases match the
//! click lands on the wrong detector with the optical error probability
//! (finite extinction ratio plus misalignment); when they differ either
//! detector is equally likely. Each detector also dark-clicks independently
//! in every gate. Two detectors firing is a double click and is discarded.

use crate::rng::RngStream;

/// Fiber attenuation of standard single-mode fiber at 1310 nm, in dB/km.
pub const FIBER_ALPHA_DB_PER_KM: f64 = 0.21;
pub const RECEIVER_LOSS_DB: f64 = 5.0;
pub const EXTINCTION_RATIO_DB: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhysicsError {
    #[error("{field} must be {constraint}, got {value}")]
    OutOfRange {
        field: &'static str,
        constraint: &'static str,
        value: f64,
    },
    #[error("intensity probabilities sum to {0}, expected 1")]
    ProbabilitySum(f64),
}

fn check(
    ok: bool,
    field: &'static str,
    constraint: &'static str,
    value: f64,
) -> Result<(), PhysicsError> {
    if ok {
        Ok(())
    } else {
        Err(PhysicsError::OutOfRange {
            field,
            constraint,
            value,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    /// Schedule bit 0 selects Z, 1 selects X.
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Basis::X
        } else {
            Basis::Z
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub alpha_db_per_km: f64,
    pub length_km: f64,
    pub extra_loss_db: f64,
    pub rx_loss_db: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::back_to_back()
    }
}

impl ChannelModel {
    /// Transmitter patched straight into the receiver.
    pub fn back_to_back() -> Self {
        Self {
            alpha_db_per_km: FIBER_ALPHA_DB_PER_KM,
            length_km: 0.0,
            extra_loss_db: 0.0,
            rx_loss_db: RECEIVER_LOSS_DB,
        }
    }

    /// Fiber link emulating `link_loss_db` of attenuation at 0.21 dB/km.
    pub fn with_link_loss(link_loss_db: f64) -> Self {
        Self {
            length_km: link_loss_db / FIBER_ALPHA_DB_PER_KM,
            ..Self::back_to_back()
        }
    }

    pub fn ideal() -> Self {
        Self {
            alpha_db_per_km: 0.0,
            length_km: 0.0,
            extra_loss_db: 0.0,
            rx_loss_db: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (field, v) in [
            ("alpha_db_per_km", self.alpha_db_per_km),
            ("length_km", self.length_km),
            ("extra_loss_db", self.extra_loss_db),
            ("rx_loss_db", self.rx_loss_db),
        ] {
            check(v >= 0.0 && v.is_finite(), field, "finite and >= 0", v)?;
        }
        Ok(())
    }

    /// Link attenuation between the devices, excluding the receiver module.
    pub fn link_loss_db(&self) -> f64 {
        self.alpha_db_per_km * self.length_km + self.extra_loss_db
    }

    pub fn total_loss_db(&self) -> f64 {
        self.link_loss_db() + self.rx_loss_db
    }

    /// Fiber length that would produce the same link loss at 0.21 dB/km.
    pub fn emulated_distance_km(&self) -> f64 {
        self.link_loss_db() / FIBER_ALPHA_DB_PER_KM
    }
}

/// Power transmittance of fiber plus receiver.
pub fn transmittance(ch: &ChannelModel) -> f64 {
    libm::pow(10.0, -ch.total_loss_db() / 10.0)
}

/// Probability that a photon hits the orthogonal detector of a
/// polarization beam splitter with extinction ratio `er_db`.
pub fn misalignment_error(er_db: f64) -> f64 {
    1.0 / (1.0 + libm::pow(10.0, er_db / 10.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorModel {
    pub efficiency: f64,
    /// Dark-click probability per gate, per detector.
    pub dark_prob: f64,
    pub extinction_ratio_db: f64,
    /// Polarization flip probability ahead of the beam splitter.
    pub misalignment: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            efficiency: 0.20,
            dark_prob: 1e-5,
            extinction_ratio_db: EXTINCTION_RATIO_DB,
            misalignment: 0.0,
        }
    }
}

impl DetectorModel {
    pub fn ideal() -> Self {
        Self {
            efficiency: 1.0,
            dark_prob: 0.0,
            extinction_ratio_db: f64::INFINITY,
            misalignment: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        let e = self.efficiency;
        check(e > 0.0 && e <= 1.0, "efficiency", "in (0, 1]", e)?;
        let d = self.dark_prob;
        check((0.0..1.0).contains(&d), "dark_prob", "in [0, 1)", d)?;
        let er = self.extinction_ratio_db;
        check(er >= 0.0, "extinction_ratio_db", ">= 0", er)?;
        let m = self.misalignment;
        check((0.0..=0.5).contains(&m), "misalignment", "in [0, 0.5]", m)
    }

    /// Wrong-detector probability for a photon measured in its own basis:
    /// a misalignment flip and a beam-splitter leak cancel each other.
    pub fn optical_error(&self) -> f64 {
        let leak = misalignment_error(self.extinction_ratio_db);
        let flip = self.misalignment;
        leak * (1.0 - flip) + flip * (1.0 - leak)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityPlan {
    pub mu: f64,
    pub nu: f64,
    pub p_mu: f64,
    pub p_nu: f64,
    pub p_0: f64,
}

impl Default for IntensityPlan {
    fn default() -> Self {
        Self {
            mu: 0.5,
            nu: 0.1,
            p_mu: 0.7,
            p_nu: 0.2,
            p_0: 0.1,
        }
    }
}

impl IntensityPlan {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        check(self.nu > 0.0, "nu", "> 0", self.nu)?;
        check(self.mu > self.nu, "mu", "> nu", self.mu)?;
        for (field, p) in [("p_mu", self.p_mu), ("p_nu", self.p_nu), ("p_0", self.p_0)] {
            check((0.0..=1.0).contains(&p), field, "in [0, 1]", p)?;
        }
        let sum = self.p_mu + self.p_nu + self.p_0;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PhysicsError::ProbabilitySum(sum));
        }
        Ok(())
    }

    pub fn mean_photons(&self, class: Intensity) -> f64 {
        match class {
            Intensity::Signal => self.mu,
            Intensity::Decoy => self.nu,
            Intensity::Vacuum => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Intensity {
        let u = rng.uniform();
        if u < self.p_mu {
            Intensity::Signal
        } else if u < self.p_mu + self.p_nu {
            Intensity::Decoy
        } else {
            Intensity::Vacuum
        }
    }
}

/// What the transmitter put on the fiber for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmittedSymbol {
    pub slot: u32,
    pub basis: Basis,
    pub bit: bool,
    pub intensity: Intensity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    NoClick,
    Single(bool),
    DoubleClick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub slot: u32,
    pub outcome: Outcome,
    pub measured_basis: Basis,
}

/// Receiver with per-intensity click probabilities precomputed.
///
/// Every call to [`Receiver::detect`] consumes exactly four uniform draws,
/// so two receivers that differ only in error parameters see the same
/// photons and dark counts under the same stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Receiver {
    click: [f64; 3],
    optical_error: f64,
    dark_prob: f64,
}

fn class_index(class: Intensity) -> usize {
    match class {
        Intensity::Signal => 0,
        Intensity::Decoy => 1,
        Intensity::Vacuum => 2,
    }
}

/// Probability that a pulse of mean photon number `mean` makes a detector
/// click (before routing), for transmittance `eta`.
pub fn photon_click_probability(mean: f64, eta: f64, efficiency: f64) -> f64 {
    -libm::expm1(-mean * eta * efficiency)
}

impl Receiver {
    pub fn new(plan: &IntensityPlan, ch: &ChannelModel, det: &DetectorModel) -> Self {
        let eta = transmittance(ch);
        let p = |class| photon_click_probability(plan.mean_photons(class), eta, det.efficiency);
        Self {
            click: [p(Intensity::Signal), p(Intensity::Decoy), 0.0],
            optical_error: det.optical_error(),
            dark_prob: det.dark_prob,
        }
    }

    pub fn click_probability(&self, class: Intensity) -> f64 {
        self.click[class_index(class)]
    }

    pub fn optical_error(&self) -> f64 {
        self.optical_error
    }

    pub fn dark_prob(&self) -> f64 {
        self.dark_prob
    }

    pub fn detect(&self, sym: &EmittedSymbol, basis: Basis, rng: &mut RngStream) -> DetectionEvent {
        let u_click = rng.uniform();
        let u_route = rng.uniform();
        let u_dark0 = rng.uniform();
        let u_dark1 = rng.uniform();

        let mut fired = [u_dark0 < self.dark_prob, u_dark1 < self.dark_prob];
        if u_click < self.click[class_index(sym.intensity)] {
            let target = if basis == sym.basis {
                sym.bit ^ (u_route < self.optical_error)
            } else {
                u_route < 0.5
            };
            fired[target as usize] = true;
        }
        let outcome = match fired {
            [false, false] => Outcome::NoClick,
            [true, false] => Outcome::Single(false),
            [false, true] => Outcome::Single(true),
            [true, true] => Outcome::DoubleClick,
        };
        DetectionEvent {
            slot: sym.slot,
            outcome,
            measured_basis: basis,
        }
    }
}

/// One-shot slot simulation. Use a [`Receiver`] for whole blocks.
pub fn simulate_slot(
    sym: &EmittedSymbol,
    bob_basis: Basis,
    plan: &IntensityPlan,
    ch: &ChannelModel,
    det: &DetectorModel,
    rng: &mut RngStream,
) -> DetectionEvent {
    Receiver::new(plan, ch, det).detect(sym, bob_basis, rng)
}

/// Exact `(no click, single, double)` probabilities of one gate given the
/// photon click probability and the per-detector dark probability.
pub fn outcome_probabilities(click: f64, dark: f64) -> (f64, f64, f64) {
    let quiet = 1.0 - dark;
    let none = (1.0 - click) * quiet * quiet;
    let single = click * quiet + (1.0 - click) * 2.0 * dark * quiet;
    let double = click * dark + (1.0 - click) * dark * dark;
    (none, single, double)
}

/// Probability that a signal pulse yields exactly one detector click.
pub fn single_click_probability(plan: &IntensityPlan, ch: &ChannelModel, det: &DetectorModel) -> f64 {
    let rx = Receiver::new(plan, ch, det);
    outcome_probabilities(rx.click_probability(Intensity::Signal), det.dark_prob).1
}

/// Mean acquisition time per detected signal bit at `rep_rate_hz`.
pub fn expected_time_per_sifted_bit(
    plan: &IntensityPlan,
    ch: &ChannelModel,
    det: &DetectorModel,
    rep_rate_hz: f64,
) -> f64 {
    1.0 / (rep_rate_hz * single_click_probability(plan, ch, det))
}

/// Expected error rate of signal-class single clicks when both sides use
/// the same basis: optical errors plus dark clicks landing on the wrong
/// detector, conditioned on exactly one detector firing.
pub fn expected_honest_qber(plan: &IntensityPlan, ch: &ChannelModel, det: &DetectorModel) -> f64 {
    let rx = Receiver::new(plan, ch, det);
    let p = rx.click_probability(Intensity::Signal);
    let e = rx.optical_error;
    let d = det.dark_prob;
    // the (1 - d) factor of the silent second detector cancels
    let wrong = p * e + (1.0 - p) * d;
    let single = p + (1.0 - p) * 2.0 * d;
    wrong / single
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn transmittance_examples() {
        assert_eq!(transmittance(&ChannelModel::ideal()), 1.0);
        let ch = ChannelModel {
            alpha_db_per_km: 0.21,
            length_km: 11.9,
            extra_loss_db: 0.0,
            rx_loss_db: 0.0,
        };
        assert!(close(ch.total_loss_db(), 2.5, 0.01));
        let ch = ChannelModel {
            extra_loss_db: 2.5,
            ..ChannelModel::ideal()
        };
        assert!(close(transmittance(&ch), 0.562_341_325, 1e-9));
    }

    #[test]
    fn transmittance_decreases_in_each_loss() {
        let base = ChannelModel::with_link_loss(3.0);
        let eta = transmittance(&base);
        let bumped = [
            ChannelModel { alpha_db_per_km: 0.3, ..base },
            ChannelModel { length_km: base.length_km + 1.0, ..base },
            ChannelModel { extra_loss_db: 0.5, ..base },
            ChannelModel { rx_loss_db: 5.5, ..base },
        ];
        for ch in bumped {
            assert!(transmittance(&ch) < eta);
        }
    }

    #[test]
    fn misalignment_error_examples() {
        assert_eq!(misalignment_error(f64::INFINITY), 0.0);
        assert_eq!(misalignment_error(0.0), 0.5);
        assert!(close(misalignment_error(20.0), 1.0 / 101.0, 1e-15));
        assert!(close(misalignment_error(20.0), 0.0099, 1e-4));
    }

    #[test]
    fn validation() {
        assert!(ChannelModel { length_km: -1.0, ..ChannelModel::default() }.validate().is_err());
        assert!(DetectorModel { efficiency: 0.0, ..DetectorModel::default() }.validate().is_err());
        assert!(DetectorModel { dark_prob: 1.0, ..DetectorModel::default() }.validate().is_err());
        assert!(IntensityPlan { p_0: 0.2, ..IntensityPlan::default() }.validate().is_err());
        assert!(IntensityPlan { nu: 0.6, ..IntensityPlan::default() }.validate().is_err());
        IntensityPlan::default().validate().unwrap();
        DetectorModel::ideal().validate().unwrap();
    }

    #[test]
    fn vacuum_without_dark_counts_never_clicks() {
        let rx = Receiver::new(&IntensityPlan::default(), &ChannelModel::ideal(), &DetectorModel::ideal());
        let mut rng = RngStream::new(3, 0);
        for slot in 0..10_000 {
            let sym = EmittedSymbol { slot, basis: Basis::Z, bit: true, intensity: Intensity::Vacuum };
            assert_eq!(rx.detect(&sym, Basis::Z, &mut rng).outcome, Outcome::NoClick);
        }
    }

    #[test]
    fn noiseless_limit_is_exact() {
        let plan = IntensityPlan { mu: 1e3, nu: 0.1, ..IntensityPlan::default() };
        let rx = Receiver::new(&plan, &ChannelModel::ideal(), &DetectorModel::ideal());
        let mut rng = RngStream::new(4, 0);
        for slot in 0..10_000u32 {
            let bit = slot % 3 == 0;
            let basis = Basis::from_bit(slot % 2 == 0);
            let sym = EmittedSymbol { slot, basis, bit, intensity: Intensity::Signal };
            assert_eq!(rx.detect(&sym, basis, &mut rng).outcome, Outcome::Single(bit));
        }
    }

    #[test]
    fn mismatched_bases_give_coin_flips() {
        let det = DetectorModel { dark_prob: 0.0, ..DetectorModel::default() };
        let rx = Receiver::new(&IntensityPlan::default(), &ChannelModel::ideal(), &det);
        let mut rng = RngStream::new(5, 0);
        let (mut singles, mut agree) = (0u32, 0u32);
        for slot in 0..100_000 {
            let sym = EmittedSymbol { slot, basis: Basis::Z, bit: true, intensity: Intensity::Signal };
            if let Outcome::Single(b) = rx.detect(&sym, Basis::X, &mut rng).outcome {
                singles += 1;
                agree += b as u32;
            }
        }
        let n = singles as f64;
        let sigma = (0.25 / n).sqrt();
        assert!(((agree as f64 / n) - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn matched_basis_error_rate_tracks_optical_error() {
        let det = DetectorModel { dark_prob: 0.0, extinction_ratio_db: 20.0, ..DetectorModel::default() };
        let rx = Receiver::new(&IntensityPlan::default(), &ChannelModel::ideal(), &det);
        let mut rng = RngStream::new(6, 0);
        let (mut singles, mut wrong) = (0u32, 0u32);
        for slot in 0..400_000 {
            let bit = slot % 2 == 1;
            let sym = EmittedSymbol { slot, basis: Basis::X, bit, intensity: Intensity::Signal };
            if let Outcome::Single(b) = rx.detect(&sym, Basis::X, &mut rng).outcome {
                singles += 1;
                wrong += (b != bit) as u32;
            }
        }
        assert!(singles >= 30_000);
        let e = det.optical_error();
        let n = singles as f64;
        let sigma = (e * (1.0 - e) / n).sqrt();
        assert!((wrong as f64 / n - e).abs() < 3.0 * sigma);
    }

    #[test]
    fn outcome_probabilities_partition_unity() {
        for &(c, d) in &[(0.0, 0.0), (0.3, 0.01), (1.0, 0.5), (0.03, 1e-5), (0.7, 0.99)] {
            let (a, b, e) = outcome_probabilities(c, d);
            assert!((a + b + e - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sampler_matches_outcome_tree() {
        let det = DetectorModel { dark_prob: 0.05, ..DetectorModel::default() };
        let ch = ChannelModel::ideal();
        let plan = IntensityPlan::default();
        let rx = Receiver::new(&plan, &ch, &det);
        let (p_none, p_single, p_double) =
            outcome_probabilities(rx.click_probability(Intensity::Signal), det.dark_prob);
        let mut rng = RngStream::new(7, 0);
        let trials = 1_000_000u32;
        let mut counts = [0u32; 3];
        for slot in 0..trials {
            let sym = EmittedSymbol { slot, basis: Basis::Z, bit: false, intensity: Intensity::Signal };
            let idx = match rx.detect(&sym, Basis::X, &mut rng).outcome {
                Outcome::NoClick => 0,
                Outcome::Single(_) => 1,
                Outcome::DoubleClick => 2,
            };
            counts[idx] += 1;
        }
        for (count, p) in counts.iter().zip([p_none, p_single, p_double]) {
            let n = trials as f64;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((*count as f64 / n - p).abs() < 3.0 * sigma, "{count} vs {p}");
        }
    }

    #[test]
    fn b2b_time_per_bit_near_calibration_target() {
        let t = expected_time_per_sifted_bit(
            &IntensityPlan::default(),
            &ChannelModel::back_to_back(),
            &DetectorModel::default(),
            1000.0,
        );
        assert!((t - 0.033).abs() / 0.033 < 0.05, "{t}");
    }

    #[test]
    fn time_per_bit_grows_with_loss() {
        let plan = IntensityPlan::default();
        let det = DetectorModel::default();
        let b2b = ChannelModel::back_to_back();
        let doubled = ChannelModel { rx_loss_db: 10.0, ..b2b };
        let t = |ch: &ChannelModel| expected_time_per_sifted_bit(&plan, ch, &det, 1000.0);
        assert!(t(&doubled) > t(&b2b));
        let ratio = t(&ChannelModel::with_link_loss(12.73)) / t(&b2b);
        assert!((7.0..=28.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn honest_qber_floor_is_optical_error_without_darks() {
        let det = DetectorModel { dark_prob: 0.0, ..DetectorModel::default() };
        let q = expected_honest_qber(&IntensityPlan::default(), &ChannelModel::back_to_back(), &det);
        assert!(close(q, misalignment_error(20.0), 1e-15));
    }
}
