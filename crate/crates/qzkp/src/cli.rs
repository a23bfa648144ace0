//! Subcommands of the `qzkp` binary.

use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use qzkp_core::analysis::SweepRow;
use qzkp_core::protocol::ProverOutcome;
use qzkp_core::wire::{transcript_audit, FragmentBalance, VerdictCode, PROTOCOL_VERSION};

use crate::calibrate::{calibrate, CalibrationError, CalibrationParam, CalibrationRequest};
use crate::check::{check_session, check_sweep, CheckOutcome};
use crate::config::{CalibrationSection, ConfigError, ProverKind, RunConfig, PRESETS};
use crate::report::{self, SessionSummary};
use crate::sim::{self, AuditedRound, SessionReport};
use crate::transport::{self, TransportError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("transcript audit failed: {0}")]
    Audit(String),
    #[error("{} acceptance check(s) failed", .0.iter().filter(|c| !c.passed).count())]
    Check(Vec<CheckOutcome>),
}

impl CliError {
    /// 1: configuration, 2: protocol violation, 3: failed `--check` band.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Calibration(_) | CliError::Output { .. } | CliError::Usage(_) => 1,
            CliError::Protocol(_) | CliError::Transport(_) | CliError::Audit(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "qzkp", version, about = "Quantum zero-knowledge authentication simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run honest or dishonest sessions in process.
    Run(RunArgs),
    /// Run a loss sweep and emit one CSV row per loss point.
    Sweep(SweepArgs),
    /// Fit a detector constant to a target honest error floor.
    Calibrate(CalibrateArgs),
    /// Act as the verifier over TCP.
    Serve(ServeArgs),
    /// Act as the prover over TCP.
    Connect(ConnectArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named preset (looked up in $QZKP_CONFIG_DIR first).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub iterations: Option<usize>,
    /// Prover strategy.
    #[arg(long, value_enum)]
    pub strategy: Option<ProverKind>,
    /// Shorthand for `--strategy honest`.
    #[arg(long, conflicts_with = "strategy")]
    pub honest: bool,
    /// Lossless channel, ideal detector, no dark counts.
    #[arg(long)]
    pub noiseless: bool,
    /// Pre-shared secret held by this party.
    #[arg(long)]
    pub secret: Option<String>,
}

impl ConfigArgs {
    pub fn load(&self, default_preset: &str) -> Result<RunConfig, CliError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::preset(default_preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.iterations {
            cfg.protocol.iterations = n;
        }
        if self.honest {
            cfg.strategy.prover = ProverKind::Honest;
        }
        if let Some(kind) = self.strategy {
            cfg.strategy.prover = kind;
        }
        if self.noiseless {
            cfg.make_noiseless();
        }
        if let Some(secret) = &self.secret {
            cfg.secret = secret.clone();
            cfg.strategy.prover_secret = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct OutputArgs {
    /// Write the result as CSV (one row in the sweep schema).
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// Write a per-round JSON summary.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Evaluate the configuration's [check] bands; exit 3 on failure.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Honest back-to-back QBER to reach.
    #[arg(long, default_value_t = 0.029)]
    pub target: f64,
    #[arg(long, value_enum, default_value_t = CalibrationParam::Misalignment)]
    pub param: CalibrationParam,
    /// Rounds per simulated evaluation.
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    /// Write the calibrated configuration here instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:7878")]
    pub listen: String,
    #[arg(long, hide = true, default_value_t = PROTOCOL_VERSION)]
    pub protocol_version: u16,
}

#[derive(Debug, Clone, Args)]
pub struct ConnectArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "ADDR", default_value = "127.0.0.1:7878")]
    pub connect: String,
    #[arg(long, hide = true, default_value_t = PROTOCOL_VERSION)]
    pub protocol_version: u16,
}

fn write_file(path: &PathBuf, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Output { path: path.clone(), source })
}

fn emit(out: &mut impl Write, text: &str) {
    // a closed stdout is not worth failing a finished run over
    let _ = writeln!(out, "{text}");
}

fn finish_checks(out: &mut impl Write, enabled: bool, outcomes: Vec<CheckOutcome>) -> Result<(), CliError> {
    if !enabled {
        return Ok(());
    }
    for c in &outcomes {
        emit(out, &c.to_string());
    }
    if outcomes.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(CliError::Check(outcomes))
    }
}

fn session_row(cfg: &RunConfig, report: &SessionReport) -> SweepRow {
    let channel = cfg.protocol_config().channel;
    let s = &report.stats;
    SweepRow {
        distance_km: channel.emulated_distance_km(),
        losses_db: channel.link_loss_db(),
        l_delta: cfg.protocol.l_delta,
        iterations: s.iterations(),
        time_s_per_bit: s.mean_time_per_bit_s(),
        mean_qber: s.mean_qber,
        sigma_qber: s.sigma_qber,
    }
}

fn finish_session(
    out: &mut impl Write,
    cfg: &RunConfig,
    report: &SessionReport,
    args: &OutputArgs,
) -> Result<(), CliError> {
    emit(out, &report::session_text(report));
    if let Some(path) = &args.csv {
        write_file(path, &report::csv_string(&[session_row(cfg, report)]))?;
    }
    if let Some(path) = &args.json {
        write_file(path, &SessionSummary::new(report).to_json())?;
    }
    if let Some((round, audit)) = report.audit_failures.first() {
        return Err(CliError::Audit(format!("round {round}: {:?}", audit.leaks)));
    }
    if let Some((i, r)) = report.stats.rounds.iter().enumerate().find(|(_, r)| r.aborted()) {
        return Err(CliError::Protocol(format!("round {i} ended with {:?}", r.verdict)));
    }
    let check = cfg.check.clone().unwrap_or_default();
    finish_checks(out, args.check, check_session(&check, report))
}

pub fn cmd_run(args: &RunArgs, out: &mut impl Write) -> Result<SessionReport, CliError> {
    let cfg = args.config.load("honest-b2b")?;
    let report = sim::run_session(&cfg.protocol_config(), &cfg.parties(), cfg.seed, 0);
    finish_session(out, &cfg, &report, &args.output)?;
    Ok(report)
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut impl Write) -> Result<Vec<SweepRow>, CliError> {
    let cfg = args.config.load("table1-sweep")?;
    let points = cfg.sweep_points();
    if points.is_empty() {
        return Err(CliError::Usage("configuration has no [[sweep]] rows".into()));
    }
    let report = sim::run_sweep(&cfg.protocol_config(), &points, &cfg.parties(), cfg.seed);
    emit(out, &report::sweep_table(&report.rows));
    if let Some(path) = &args.csv {
        write_file(path, &report::csv_string(&report.rows))?;
    }
    if !report.audit_passed() {
        return Err(CliError::Audit("sweep transcripts leaked secret material".into()));
    }
    let check = cfg.check.clone().unwrap_or_default();
    finish_checks(out, args.check, check_sweep(&check, &report))?;
    Ok(report.rows)
}

pub fn cmd_calibrate(args: &CalibrateArgs, out: &mut impl Write) -> Result<RunConfig, CliError> {
    let mut cfg = args.config.load("honest-b2b")?;
    let req = CalibrationRequest {
        target: args.target,
        param: args.param,
        rounds: args.rounds,
        seed: cfg.seed,
        tolerance: 0.001,
    };
    let cal = calibrate(&cfg.protocol_config(), &req)?;
    cfg.set_detector(cal.detector);
    cfg.calibration = Some(CalibrationSection {
        target_qber: args.target,
        parameter: cal.param.name().into(),
        value: cal.value,
        achieved_qber: cal.achieved_qber,
        rounds: args.rounds,
        seed: cfg.seed,
    });
    let text = cfg.to_toml();
    match &args.out {
        Some(path) => {
            write_file(path, &text)?;
            emit(
                out,
                &format!(
                    "{} = {} gives mean QBER {:.5} ({} evaluations)",
                    cal.param.name(),
                    cal.value,
                    cal.achieved_qber,
                    cal.evaluations
                ),
            );
        }
        None => emit(out, &text),
    }
    Ok(cfg)
}

pub fn cmd_serve(args: &ServeArgs, out: &mut impl Write) -> Result<SessionReport, CliError> {
    let cfg = args.config.load("honest-b2b")?;
    let listener = TcpListener::bind(&args.listen).map_err(TransportError::from)?;
    serve_on(&listener, &cfg, args.protocol_version, &args.output, out)
}

/// Verifier loop over an already bound listener.
pub fn serve_on(
    listener: &TcpListener,
    cfg: &RunConfig,
    version: u16,
    output: &OutputArgs,
    out: &mut impl Write,
) -> Result<SessionReport, CliError> {
    let rounds = transport::serve(listener, &cfg.protocol_config(), &cfg.parties(), cfg.seed, version)?;
    let audited = rounds
        .iter()
        .map(|r| {
            let mut balance = FragmentBalance::default();
            balance.add_transcript(&r.transcript);
            AuditedRound {
                result: r.result,
                audit: transcript_audit(&r.transcript, &r.secrets),
                balance,
                real_vs_estimated: None,
            }
        })
        .collect();
    let report = SessionReport::from_rounds(audited);
    finish_session(out, cfg, &report, output)?;
    Ok(report)
}

pub fn cmd_connect(args: &ConnectArgs, out: &mut impl Write) -> Result<Vec<ProverOutcome>, CliError> {
    let cfg = args.config.load("honest-b2b")?;
    let rounds = transport::connect(
        args.connect.as_str(),
        &cfg.protocol_config(),
        &cfg.parties(),
        cfg.seed,
        args.protocol_version,
    )?;
    let mut outcomes = Vec::new();
    for (i, r) in rounds.iter().enumerate() {
        if !transcript_audit(&r.transcript, &r.secrets).passed() {
            return Err(CliError::Audit(format!("round {i}")));
        }
        let outcome = r.outcome.clone().ok_or(TransportError::Closed)?;
        emit(out, &format!("round {i}: {outcome:?}"));
        outcomes.push(outcome);
    }
    for (i, o) in outcomes.iter().enumerate() {
        match o {
            ProverOutcome::Failed(e) => return Err(CliError::Protocol(format!("round {i}: {e}"))),
            ProverOutcome::Verdict(VerdictCode::Violation) => {
                return Err(CliError::Protocol(format!("round {i}: verifier reported a violation")))
            }
            ProverOutcome::Verdict(_) => {}
        }
    }
    Ok(outcomes)
}

pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, out).map(drop),
        Command::Sweep(a) => cmd_sweep(a, out).map(drop),
        Command::Calibrate(a) => cmd_calibrate(a, out).map(drop),
        Command::Serve(a) => cmd_serve(a, out).map(drop),
        Command::Connect(a) => cmd_connect(a, out).map(drop),
        Command::Presets => {
            for (name, _) in PRESETS {
                emit(out, name);
            }
            Ok(())
        }
    }
}
