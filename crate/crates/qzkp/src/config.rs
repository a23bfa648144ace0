//! Declarative run configuration (TOML) and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qzkp_core::adversary::{ProverStrategy, VerifierStrategy};
use qzkp_core::analysis::SweepPoint;
use qzkp_core::photonics::{ChannelModel, DetectorModel, IntensityPlan};
use qzkp_core::protocol::{self, Parties, ProtocolConfig};

/// Directory searched for `<name>.toml` before the built-in presets.
pub const CONFIG_DIR_ENV: &str = "QZKP_CONFIG_DIR";

pub const PRESETS: [(&str, &str); 3] = [
    ("honest-b2b", include_str!("../presets/honest-b2b.toml")),
    ("dishonest-b2b", include_str!("../presets/dishonest-b2b.toml")),
    ("table1-sweep", include_str!("../presets/table1-sweep.toml")),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(#[from] protocol::ConfigError),
    #[error("unknown preset {name:?}; available: {}", PRESETS.map(|p| p.0).join(", "))]
    UnknownPreset { name: String },
    #[error("the pre-shared secret must not be empty")]
    EmptySecret,
    #[error("sweep row {row}: {reason}")]
    Sweep { row: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Pre-shared secret (UTF-8).
    pub secret: String,
    pub protocol: ProtocolSection,
    pub channel: ChannelSection,
    pub detector: DetectorSection,
    pub intensity: IntensitySection,
    pub strategy: StrategySection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSection>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub block_len: usize,
    pub l_delta: usize,
    pub fragment_fraction: f64,
    pub threshold: f64,
    pub iterations: usize,
    pub rep_rate_hz: f64,
    pub max_blocks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_basis_fraction: Option<f64>,
    pub t0_epoch_ms: u64,
    pub verifier_id: String,
    pub prover_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub alpha_db_per_km: f64,
    pub length_km: f64,
    pub extra_loss_db: f64,
    pub rx_loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub efficiency: f64,
    pub dark_prob: f64,
    pub extinction_ratio_db: f64,
    pub misalignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensitySection {
    pub mu: f64,
    pub nu: f64,
    pub p_mu: f64,
    pub p_nu: f64,
    pub p_0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProverKind {
    Honest,
    RandomBasis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VerifierKind {
    Honest,
    Guessing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub prover: ProverKind,
    /// Z-measurement probability of the random-basis prover.
    pub p_b_z: f64,
    pub verifier: VerifierKind,
    /// Secret the prover holds, when it differs from `secret`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prover_secret: Option<String>,
}

/// Provenance of calibrated detector constants; informational only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub target_qber: f64,
    pub parameter: String,
    pub value: f64,
    pub achieved_qber: f64,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    AcceptAll,
    RejectAll,
}

/// Bands checked by `--check`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber_mean: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber_sigma: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
    /// Upper bound on every sweep row's mean QBER.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_row_qber: Option<f64>,
    /// Require a positive rank correlation between row loss and sigma.
    pub sigma_grows_with_loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub losses_db: f64,
    pub l_delta: usize,
    pub iterations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            secret: "qzkp-demo-secret".into(),
            protocol: ProtocolSection::default(),
            channel: ChannelSection::default(),
            detector: DetectorSection::default(),
            intensity: IntensitySection::default(),
            strategy: StrategySection::default(),
            calibration: None,
            check: None,
            sweep: Vec::new(),
        }
    }
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            block_len: p.block_len,
            l_delta: p.target_sifted_len,
            fragment_fraction: p.fragment_fraction,
            threshold: p.threshold,
            iterations: p.iterations,
            rep_rate_hz: p.rep_rate_hz,
            max_blocks: p.max_blocks,
            x_basis_fraction: p.x_basis_fraction,
            t0_epoch_ms: p.t0_epoch_ms,
            verifier_id: String::from_utf8(p.verifier_id).expect("ascii"),
            prover_id: String::from_utf8(p.prover_id).expect("ascii"),
        }
    }
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelModel::default().into()
    }
}

impl From<ChannelModel> for ChannelSection {
    fn from(c: ChannelModel) -> Self {
        Self {
            alpha_db_per_km: c.alpha_db_per_km,
            length_km: c.length_km,
            extra_loss_db: c.extra_loss_db,
            rx_loss_db: c.rx_loss_db,
        }
    }
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorModel::default().into()
    }
}

impl From<DetectorModel> for DetectorSection {
    fn from(d: DetectorModel) -> Self {
        Self {
            efficiency: d.efficiency,
            dark_prob: d.dark_prob,
            extinction_ratio_db: d.extinction_ratio_db,
            misalignment: d.misalignment,
        }
    }
}

impl Default for IntensitySection {
    fn default() -> Self {
        let i = IntensityPlan::default();
        Self {
            mu: i.mu,
            nu: i.nu,
            p_mu: i.p_mu,
            p_nu: i.p_nu,
            p_0: i.p_0,
        }
    }
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            prover: ProverKind::Honest,
            p_b_z: 0.5,
            verifier: VerifierKind::Honest,
            prover_secret: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// `$QZKP_CONFIG_DIR/<name>.toml` if present, else the built-in preset.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        if let Some(dir) = std::env::var_os(CONFIG_DIR_ENV) {
            let path = Path::new(&dir).join(format!("{name}.toml"));
            if path.is_file() {
                return Self::load(&path);
            }
        }
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset { name: name.into() })?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.secret.is_empty() || self.strategy.prover_secret.as_deref() == Some("") {
            return Err(ConfigError::EmptySecret);
        }
        self.protocol_config().validate()?;
        self.prover_strategy()
            .validate()
            .map_err(protocol::ConfigError::from)?;
        for (row, p) in self.sweep_points().iter().enumerate() {
            let cfg = p.apply(&self.protocol_config());
            if !(p.losses_db >= 0.0 && p.losses_db.is_finite()) {
                return Err(ConfigError::Sweep { row, reason: format!("losses_db {} must be >= 0", p.losses_db) });
            }
            cfg.validate().map_err(|e| ConfigError::Sweep { row, reason: e.to_string() })?;
        }
        Ok(())
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        let p = &self.protocol;
        ProtocolConfig {
            block_len: p.block_len,
            target_sifted_len: p.l_delta,
            fragment_fraction: p.fragment_fraction,
            threshold: p.threshold,
            iterations: p.iterations,
            rep_rate_hz: p.rep_rate_hz,
            max_blocks: p.max_blocks,
            x_basis_fraction: p.x_basis_fraction,
            t0_epoch_ms: p.t0_epoch_ms,
            verifier_id: p.verifier_id.as_bytes().to_vec(),
            prover_id: p.prover_id.as_bytes().to_vec(),
            intensity: IntensityPlan {
                mu: self.intensity.mu,
                nu: self.intensity.nu,
                p_mu: self.intensity.p_mu,
                p_nu: self.intensity.p_nu,
                p_0: self.intensity.p_0,
            },
            channel: ChannelModel {
                alpha_db_per_km: self.channel.alpha_db_per_km,
                length_km: self.channel.length_km,
                extra_loss_db: self.channel.extra_loss_db,
                rx_loss_db: self.channel.rx_loss_db,
            },
            detector: DetectorModel {
                efficiency: self.detector.efficiency,
                dark_prob: self.detector.dark_prob,
                extinction_ratio_db: self.detector.extinction_ratio_db,
                misalignment: self.detector.misalignment,
            },
        }
    }

    pub fn prover_strategy(&self) -> ProverStrategy {
        match self.strategy.prover {
            ProverKind::Honest => ProverStrategy::Honest,
            ProverKind::RandomBasis => ProverStrategy::RandomBasis { p_z: self.strategy.p_b_z },
        }
    }

    pub fn verifier_strategy(&self) -> VerifierStrategy {
        match self.strategy.verifier {
            VerifierKind::Honest => VerifierStrategy::Honest,
            VerifierKind::Guessing => VerifierStrategy::Guessing,
        }
    }

    pub fn parties(&self) -> Parties {
        let secret = self.secret.as_bytes().to_vec();
        Parties {
            prover_secret: self
                .strategy
                .prover_secret
                .as_ref()
                .map_or_else(|| secret.clone(), |s| s.as_bytes().to_vec()),
            verifier_secret: secret,
            verifier: self.verifier_strategy(),
            prover: self.prover_strategy(),
        }
    }

    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        self.sweep
            .iter()
            .map(|s| SweepPoint {
                losses_db: s.losses_db,
                target_sifted_len: s.l_delta,
                iterations: s.iterations,
            })
            .collect()
    }

    /// Ideal channel and detector: no loss, no optical error, no dark counts.
    pub fn make_noiseless(&mut self) {
        self.channel = ChannelModel::ideal().into();
        self.detector = DetectorModel::ideal().into();
        self.calibration = None;
    }

    pub fn set_detector(&mut self, det: DetectorModel) {
        self.detector = det.into();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for (name, _) in PRESETS {
            RunConfig::preset(name).unwrap();
        }
        assert!(matches!(RunConfig::preset("nope"), Err(ConfigError::UnknownPreset { .. })));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("seed = 1\nsecrt = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("secrt"), "{err}");
        let err = RunConfig::from_toml("[detector]\nefficency = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("efficency"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("[protocol]\nthreshold = 0.7\n"),
            Err(ConfigError::Invalid(protocol::ConfigError::Threshold(_)))
        ));
        assert!(matches!(RunConfig::from_toml("secret = \"\"\n"), Err(ConfigError::EmptySecret)));
        assert!(matches!(
            RunConfig::from_toml("[strategy]\nprover = \"random-basis\"\np_b_z = 2.0\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[[sweep]]\nlosses_db = -1.0\nl_delta = 256\niterations = 2\n"),
            Err(ConfigError::Sweep { row: 0, .. })
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::preset("table1-sweep").unwrap();
        cfg.strategy.prover_secret = Some("other".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let mut ideal = RunConfig::default();
        ideal.make_noiseless();
        assert_eq!(RunConfig::from_toml(&ideal.to_toml()).unwrap(), ideal);
    }

    #[test]
    fn defaults_mirror_core() {
        assert_eq!(RunConfig::default().protocol_config(), ProtocolConfig::default());
    }

    #[test]
    fn env_directory_overrides_presets() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("custom.toml"), "seed = 77\n").unwrap();
        // the variable is process-wide; only this test sets it
        std::env::set_var(CONFIG_DIR_ENV, dir.path());
        let cfg = RunConfig::preset("custom").unwrap();
        let builtin = RunConfig::preset("honest-b2b").unwrap();
        std::env::remove_var(CONFIG_DIR_ENV);
        assert_eq!(cfg.seed, 77);
        assert_eq!(builtin.protocol.iterations, 173);
    }
}
