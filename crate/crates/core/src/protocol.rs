//! Verifier (Alice) and prover (Bob) state machines.
//!
//! One round runs:
//!
//! 1. HELLO / HELLO_ACK: the verifier proposes `t0`, the prover echoes it.
//! 2. Both parties derive `h1 || h2` from the secret and `t0`.
//! 3. Per block: ROUND_BEGIN, then `m` pulses on the quantum link, prepared
//!    in the bases of the block schedule and measured by the prover.
//! 4. The prover announces its single-click slots (DETECTIONS); the verifier
//!    answers with the signal-intensity subset (DETECTIONS). No basis is
//!    ever disclosed. Blocks repeat with fresh schedule material until
//!    `L_delta` sifted bits are held.
//! 5. The prover sends `c' = delta_b XOR h2'` (FRAGMENT) over the first `n`
//!    sifted bits; the verifier unmasks it with `h2` and estimates the QBER.
//! 6. VERDICT: accept iff `QBER < T_v`.
//!
//! The machines are IO-free: feed them messages, send what they return.
//! [`run_round`] wires a pair together in memory.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::adversary::{prover_basis, ProverStrategy, StrategyError, VerifierStrategy};
use crate::bits::{hamming_fraction, xor, BitString};
use crate::kdf::{self, DerivedKeys, KdfError, Prk, SecretMaterial, LABEL, MAX_EXPAND_BITS};
use crate::photonics::{
    Basis, ChannelModel, DetectionEvent, DetectorModel, EmittedSymbol, Intensity, IntensityPlan,
    Outcome, PhysicsError, Receiver,
};
use crate::rng::RngStream;
use crate::wire::{
    AbortReason, ClassicalMessage, Direction, ForbiddenSet, MessageKind, SecretKind, Transcript,
    VerdictCode, PROTOCOL_VERSION,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("fragment fraction {0} must lie in (0, 1)")]
    FragmentFraction(f64),
    #[error("verification threshold {0} must lie in (0, 0.5)")]
    Threshold(f64),
    #[error("iterations must be at least 1")]
    Iterations,
    #[error("block length must be in 1..={MAX_EXPAND_BITS}, got {0}")]
    BlockLen(usize),
    #[error("fragment length n={n} must be >= 1 and < block length m={m}")]
    FragmentLen { n: usize, m: usize },
    #[error("repetition rate {0} Hz must be positive")]
    RepRate(f64),
    #[error("max_blocks must be at least 1")]
    MaxBlocks,
    #[error("X-basis fraction {0} must lie in (0, 1)")]
    BasisFraction(f64),
    #[error("biased schedules need 16 bits per pulse; block length {0} is too long")]
    BiasedBlockLen(usize),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// Parameters both parties agree on before a session.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Pulses per block, which is also the schedule length `m`.
    pub block_len: usize,
    /// Sifted bits `L_delta` gathered before the fragment exchange.
    pub target_sifted_len: usize,
    pub fragment_fraction: f64,
    /// Verification threshold `T_v`.
    pub threshold: f64,
    pub iterations: usize,
    pub rep_rate_hz: f64,
    pub max_blocks: usize,
    /// Analysis-only override biasing the schedule towards Z (`r` < 1/2).
    pub x_basis_fraction: Option<f64>,
    pub t0_epoch_ms: u64,
    pub verifier_id: Vec<u8>,
    pub prover_id: Vec<u8>,
    pub intensity: IntensityPlan,
    pub channel: ChannelModel,
    pub detector: DetectorModel,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            block_len: 2048,
            target_sifted_len: 2048,
            fragment_fraction: 0.15,
            threshold: 0.11,
            iterations: 1,
            rep_rate_hz: 1000.0,
            max_blocks: 100_000,
            x_basis_fraction: None,
            t0_epoch_ms: 1_700_000_000_000,
            verifier_id: b"verifier".to_vec(),
            prover_id: b"prover".to_vec(),
            intensity: IntensityPlan::default(),
            channel: ChannelModel::default(),
            detector: DetectorModel::default(),
        }
    }
}

/// `floor(fraction * sifted_len)`, computed with a small guard so that e.g.
/// `0.15 * 2048 = 307.2` gives 307 regardless of rounding in the product.
pub fn fragment_len_for(fraction: f64, sifted_len: usize) -> usize {
    libm::floor(fraction * sifted_len as f64 + 1e-9) as usize
}

impl ProtocolConfig {
    /// Fragment (and OTP mask) length `n`.
    pub fn fragment_len(&self) -> usize {
        fragment_len_for(self.fragment_fraction, self.target_sifted_len)
    }

    pub fn context(&self) -> Vec<u8> {
        kdf::session_context(&self.verifier_id, &self.prover_id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = self.fragment_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(ConfigError::FragmentFraction(f));
        }
        let t = self.threshold;
        if !(t > 0.0 && t < 0.5) {
            return Err(ConfigError::Threshold(t));
        }
        if self.iterations == 0 {
            return Err(ConfigError::Iterations);
        }
        let m = self.block_len;
        if m == 0 || m > MAX_EXPAND_BITS || m > u32::MAX as usize {
            return Err(ConfigError::BlockLen(m));
        }
        let n = self.fragment_len();
        if n == 0 || n >= m || m + n > MAX_EXPAND_BITS {
            return Err(ConfigError::FragmentLen { n, m });
        }
        if !(self.rep_rate_hz > 0.0 && self.rep_rate_hz.is_finite()) {
            return Err(ConfigError::RepRate(self.rep_rate_hz));
        }
        if self.max_blocks == 0 {
            return Err(ConfigError::MaxBlocks);
        }
        if let Some(r) = self.x_basis_fraction {
            if !(r > 0.0 && r < 1.0) {
                return Err(ConfigError::BasisFraction(r));
            }
            if 16 * m > MAX_EXPAND_BITS {
                return Err(ConfigError::BiasedBlockLen(m));
            }
        }
        self.intensity.validate()?;
        self.channel.validate()?;
        self.detector.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("expected {expected}, received {got}")]
    Unexpected { expected: &'static str, got: MessageKind },
    #[error("light arrived while waiting for {0}")]
    UnexpectedLight(&'static str),
    #[error("protocol version {theirs} does not match ours ({ours})")]
    VersionMismatch { ours: u16, theirs: u16 },
    #[error("handshake echoed t0={echoed}, proposed t0={proposed}")]
    HandshakeMismatch { proposed: u64, echoed: u64 },
    #[error("slot {slot} outside block of {pulses} pulses")]
    SlotOutOfRange { slot: u32, pulses: usize },
    #[error("slot list not strictly increasing at position {0}")]
    SlotOrder(usize),
    #[error("confirmed slot {0} was never announced")]
    NotAnnounced(u32),
    #[error("block {got} announced, expected block {expected} of {pulses} pulses")]
    BlockMismatch { expected: u32, got: u32, pulses: u32 },
    #[error("received {actual} pulses, block has {expected}")]
    LightLength { expected: usize, actual: usize },
    #[error("fragment has {actual} bits, expected {expected}")]
    FragmentLength { expected: usize, actual: usize },
    #[error("need {need} sifted bits for the fragment, have {have}")]
    ShortSifted { need: usize, have: usize },
    #[error("no {need} sifted bits after {blocks} blocks")]
    InsufficientDetections { need: usize, blocks: usize },
    #[error("peer aborted: {0:?}")]
    PeerAborted(AbortReason),
    #[error("key derivation: {0}")]
    Kdf(#[from] KdfError),
    #[error("strategy: {0}")]
    Strategy(#[from] StrategyError),
}

impl ProtocolError {
    /// Reason code sent in the ABORT frame for this failure.
    pub fn abort_reason(&self) -> AbortReason {
        match self {
            ProtocolError::VersionMismatch { .. } => AbortReason::VersionMismatch,
            ProtocolError::HandshakeMismatch { .. } => AbortReason::HandshakeMismatch,
            ProtocolError::InsufficientDetections { .. } => AbortReason::InsufficientDetections,
            ProtocolError::PeerAborted(r) => *r,
            _ => AbortReason::ProtocolViolation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accept,
    Reject,
    /// The round was aborted; never counts as acceptance.
    Error(AbortReason),
}

/// Accept iff `qber_est < t_v`.
pub fn verdict(qber_est: f64, t_v: f64) -> Verdict {
    if qber_est < t_v {
        Verdict::Accept
    } else {
        Verdict::Reject
    }
}

impl Verdict {
    pub fn code(self) -> VerdictCode {
        match self {
            Verdict::Accept => VerdictCode::Accept,
            Verdict::Reject => VerdictCode::Reject,
            Verdict::Error(_) => VerdictCode::Violation,
        }
    }
}

/// Source of handshake timestamps in milliseconds.
pub trait Clock {
    fn now_ms(&mut self) -> u64;
}

/// Deterministic clock ticking one millisecond per reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SteppingClock {
    next: u64,
}

impl SteppingClock {
    pub fn new(start_ms: u64) -> Self {
        Self { next: start_ms }
    }
}

impl Clock for SteppingClock {
    fn now_ms(&mut self) -> u64 {
        let t = self.next;
        self.next += 1;
        t
    }
}

/// Per-party key material: the session keys plus the ability to expand
/// fresh schedule bits for later blocks.
#[derive(Debug, Clone)]
pub struct KeySchedule {
    prk: Prk,
    context: Vec<u8>,
    keys: DerivedKeys,
    block_len: usize,
    x_fraction: Option<f64>,
}

impl KeySchedule {
    pub fn new(secret: &[u8], t0: u64, cfg: &ProtocolConfig) -> Result<Self, KdfError> {
        let material = SecretMaterial::new(secret, t0)?;
        let prk = kdf::extract(&material);
        let context = cfg.context();
        let keys = kdf::derive_session_keys_with_prk(&prk, &context, cfg.block_len, cfg.fragment_len())?;
        Ok(Self {
            prk,
            context,
            keys,
            block_len: cfg.block_len,
            x_fraction: cfg.x_basis_fraction,
        })
    }

    pub fn keys(&self) -> &DerivedKeys {
        &self.keys
    }

    pub fn mask(&self) -> &BitString {
        &self.keys.h2
    }

    fn block_context(&self, block: u32, suffix: &[u8]) -> Vec<u8> {
        let mut ctx = self.context.clone();
        ctx.extend_from_slice(&block.to_be_bytes());
        ctx.extend_from_slice(suffix);
        ctx
    }

    /// Basis bits (1 = X) for every pulse of `block`.
    ///
    /// Block 0 is `h1` itself. Later blocks expand fresh bits with the block
    /// counter appended to the context, so no schedule bit is reused. With a
    /// biased schedule each pulse consumes 16 expanded bits and is X when
    /// that word falls below `r * 2^16`.
    pub fn block_schedule(&self, block: u32) -> Result<BitString, KdfError> {
        match self.x_fraction {
            None if block == 0 => Ok(self.keys.h1.clone()),
            None => kdf::expand(&self.prk, LABEL, &self.block_context(block, b""), self.block_len),
            Some(r) => {
                let raw = kdf::expand(
                    &self.prk,
                    LABEL,
                    &self.block_context(block, b"bias"),
                    16 * self.block_len,
                )?;
                let cut = libm::round(r * 65536.0) as u32;
                Ok(raw
                    .as_bytes()
                    .chunks_exact(2)
                    .map(|w| (u16::from_be_bytes([w[0], w[1]]) as u32) < cut)
                    .collect())
            }
        }
    }
}

/// Prepares one block: basis from the schedule bit (0 = Z, 1 = X), a
/// uniform bit value, and an intensity class drawn from the plan.
pub fn alice_prepare_block(
    schedule: &BitString,
    plan: &IntensityPlan,
    rng: &mut RngStream,
) -> Vec<EmittedSymbol> {
    prepare_with_bases(schedule.iter().map(Basis::from_bit), plan, rng)
}

fn prepare_with_bases(
    bases: impl Iterator<Item = Basis>,
    plan: &IntensityPlan,
    rng: &mut RngStream,
) -> Vec<EmittedSymbol> {
    bases
        .enumerate()
        .map(|(slot, basis)| {
            let bit = rng.bit();
            let intensity = plan.sample(rng);
            EmittedSymbol {
                slot: slot as u32,
                basis,
                bit,
                intensity,
            }
        })
        .collect()
}

/// Measures a block. Slot `i` is measured in the basis chosen by the
/// strategy (honest: `schedule[i]`); physics draws come from `physics_rng`.
pub fn bob_measure_block(
    symbols: &[EmittedSymbol],
    strategy: &ProverStrategy,
    schedule: Option<&BitString>,
    receiver: &Receiver,
    strategy_rng: &mut RngStream,
    physics_rng: &mut RngStream,
) -> Result<Vec<DetectionEvent>, StrategyError> {
    symbols
        .iter()
        .map(|sym| {
            let basis = prover_basis(strategy, sym.slot as usize, schedule, strategy_rng)?;
            Ok(receiver.detect(sym, basis, physics_rng))
        })
        .collect()
}

fn check_slots(slots: &[u32], pulses: usize) -> Result<(), ProtocolError> {
    if let Some(i) = slots.windows(2).position(|w| w[0] >= w[1]) {
        return Err(ProtocolError::SlotOrder(i + 1));
    }
    match slots.last() {
        Some(&s) if s as usize >= pulses => Err(ProtocolError::SlotOutOfRange { slot: s, pulses }),
        _ => Ok(()),
    }
}

/// Alice's prepared bits at the announced slots, in order.
pub fn sift(alice_record: &[EmittedSymbol], announced: &[u32]) -> Result<BitString, ProtocolError> {
    check_slots(announced, alice_record.len())?;
    Ok(announced.iter().map(|&s| alice_record[s as usize].bit).collect())
}

/// The subset of announced slots that carried a signal-intensity pulse.
pub fn confirm_signal_slots(
    alice_record: &[EmittedSymbol],
    announced: &[u32],
) -> Result<Vec<u32>, ProtocolError> {
    check_slots(announced, alice_record.len())?;
    Ok(announced
        .iter()
        .copied()
        .filter(|&s| alice_record[s as usize].intensity == Intensity::Signal)
        .collect())
}

/// Splits the sifted string into the leading `n`-bit fragment and the rest.
pub fn select_fragment(sifted: &BitString, n: usize) -> Result<(BitString, BitString), ProtocolError> {
    if sifted.len() < n {
        return Err(ProtocolError::ShortSifted {
            need: n,
            have: sifted.len(),
        });
    }
    Ok((
        sifted.slice(0, n).expect("n <= len"),
        sifted.slice(n, sifted.len()).expect("n <= len"),
    ))
}

/// `c' = delta_b XOR h2'`.
pub fn mask_fragment(fragment: &BitString, mask: &BitString) -> Result<BitString, ProtocolError> {
    if fragment.len() != mask.len() {
        return Err(ProtocolError::FragmentLength {
            expected: mask.len(),
            actual: fragment.len(),
        });
    }
    Ok(xor(fragment, mask).expect("lengths checked"))
}

/// Verifier side of the fragment exchange: `c' XOR h2`.
pub fn unmask_fragment(ciphertext: &BitString, mask: &BitString) -> Result<BitString, ProtocolError> {
    mask_fragment(ciphertext, mask)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    Classical(ClassicalMessage),
    /// Pulses on the quantum link. Never part of the classical transcript.
    Light(Vec<EmittedSymbol>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundResult {
    pub t0: u64,
    pub qber_est: f64,
    pub accepted: bool,
    pub verdict: Verdict,
    pub sifted_len: usize,
    pub fragment_len: usize,
    /// Pulses up to and including the slot that completed `L_delta`.
    pub pulses_sent: u64,
    pub blocks: u32,
    /// `pulses_sent / rep_rate_hz`, simulation-model time.
    pub elapsed_model_s: f64,
}

impl RoundResult {
    pub fn aborted(&self) -> bool {
        matches!(self.verdict, Verdict::Error(_))
    }

    pub fn time_per_bit_s(&self) -> f64 {
        if self.sifted_len == 0 {
            f64::INFINITY
        } else {
            self.elapsed_model_s / self.sifted_len as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VerifierState {
    Idle,
    AwaitAck,
    AwaitDetections,
    AwaitFragment,
    Done,
}

/// Alice.
#[derive(Debug, Clone)]
pub struct Verifier {
    cfg: ProtocolConfig,
    secret: Vec<u8>,
    strategy: VerifierStrategy,
    rng: RngStream,
    version: u16,
    state: VerifierState,
    t0: u64,
    keys: Option<KeySchedule>,
    block: u32,
    record: Vec<EmittedSymbol>,
    sifted: BitString,
    pulses_sent: u64,
    schedules: Vec<BitString>,
    transcript: Transcript,
    result: Option<RoundResult>,
    error: Option<ProtocolError>,
}

impl Verifier {
    pub fn new(cfg: ProtocolConfig, secret: &[u8], strategy: VerifierStrategy, rng: RngStream) -> Self {
        Self {
            cfg,
            secret: secret.to_vec(),
            strategy,
            rng,
            version: PROTOCOL_VERSION,
            state: VerifierState::Idle,
            t0: 0,
            keys: None,
            block: 0,
            record: Vec::new(),
            sifted: BitString::new(),
            pulses_sent: 0,
            schedules: Vec::new(),
            transcript: Transcript::new(),
            result: None,
            error: None,
        }
    }

    pub fn with_version(mut self, version: u16) -> Self {
        self.version = version;
        self
    }

    pub fn is_done(&self) -> bool {
        self.state == VerifierState::Done
    }

    pub fn result(&self) -> Option<&RoundResult> {
        self.result.as_ref()
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Sifted string `Delta_a`, truncated to `L_delta` once complete.
    pub fn sifted(&self) -> &BitString {
        &self.sifted
    }

    /// Every schedule string used for preparation, plus `h2`.
    pub fn secrets(&self) -> ForbiddenSet {
        let mut set = ForbiddenSet::new();
        for s in &self.schedules {
            set.add(SecretKind::BasisSchedule, s.clone());
        }
        if let Some(k) = &self.keys {
            set.add(SecretKind::BasisSchedule, k.keys().h1.clone());
            set.add(SecretKind::Mask, k.mask().clone());
        }
        set
    }

    /// Proposes `t0` and returns the HELLO.
    pub fn start(&mut self, t0: u64) -> Vec<Outbound> {
        assert_eq!(self.state, VerifierState::Idle, "round already started");
        self.t0 = t0;
        self.state = VerifierState::AwaitAck;
        let hello = ClassicalMessage::Hello { version: self.version, t0 };
        self.send(Vec::new(), hello)
    }

    pub fn handle(&mut self, msg: ClassicalMessage) -> Vec<Outbound> {
        if self.is_done() {
            return Vec::new();
        }
        self.transcript.record(Direction::ProverToVerifier, msg.clone());
        match self.step(msg) {
            Ok(out) => out,
            Err(e) => self.fail(e),
        }
    }

    fn send(&mut self, mut out: Vec<Outbound>, msg: ClassicalMessage) -> Vec<Outbound> {
        self.transcript.record(Direction::VerifierToProver, msg.clone());
        out.push(Outbound::Classical(msg));
        out
    }

    fn fail(&mut self, e: ProtocolError) -> Vec<Outbound> {
        let reason = e.abort_reason();
        let peer_aborted = matches!(e, ProtocolError::PeerAborted(_));
        self.finish(1.0, Verdict::Error(reason));
        self.error = Some(e);
        if peer_aborted {
            Vec::new()
        } else {
            self.send(Vec::new(), ClassicalMessage::Abort(reason))
        }
    }

    fn finish(&mut self, qber_est: f64, verdict: Verdict) {
        self.state = VerifierState::Done;
        self.result = Some(RoundResult {
            t0: self.t0,
            qber_est,
            accepted: verdict == Verdict::Accept,
            verdict,
            sifted_len: self.sifted.len(),
            fragment_len: self.cfg.fragment_len(),
            pulses_sent: self.pulses_sent,
            blocks: self.block + 1,
            elapsed_model_s: self.pulses_sent as f64 / self.cfg.rep_rate_hz,
        });
    }

    fn emit_block(&mut self, out: Vec<Outbound>) -> Result<Vec<Outbound>, ProtocolError> {
        let keys = self.keys.as_ref().expect("keys derived before the first block");
        let schedule = keys.block_schedule(self.block)?;
        self.record = match self.strategy {
            VerifierStrategy::Honest => alice_prepare_block(&schedule, &self.cfg.intensity, &mut self.rng),
            VerifierStrategy::Guessing => {
                let rng = &mut self.rng;
                let bases: Vec<Basis> = (0..self.cfg.block_len).map(|_| Basis::from_bit(rng.bit())).collect();
                prepare_with_bases(bases.into_iter(), &self.cfg.intensity, &mut self.rng)
            }
        };
        self.schedules.push(schedule);
        let begin = ClassicalMessage::RoundBegin {
            block: self.block,
            pulses: self.cfg.block_len as u32,
        };
        let mut out = self.send(out, begin);
        out.push(Outbound::Light(self.record.clone()));
        Ok(out)
    }

    fn step(&mut self, msg: ClassicalMessage) -> Result<Vec<Outbound>, ProtocolError> {
        if let ClassicalMessage::Abort(reason) = msg {
            return Err(ProtocolError::PeerAborted(reason));
        }
        match (self.state, msg) {
            (VerifierState::AwaitAck, ClassicalMessage::HelloAck { version, t0 }) => {
                if version != self.version {
                    return Err(ProtocolError::VersionMismatch { ours: self.version, theirs: version });
                }
                if t0 != self.t0 {
                    return Err(ProtocolError::HandshakeMismatch { proposed: self.t0, echoed: t0 });
                }
                self.keys = Some(KeySchedule::new(&self.secret, self.t0, &self.cfg)?);
                self.state = VerifierState::AwaitDetections;
                self.emit_block(Vec::new())
            }
            (VerifierState::AwaitDetections, ClassicalMessage::Detections { slots }) => {
                let confirmed = confirm_signal_slots(&self.record, &slots)?;
                let target = self.cfg.target_sifted_len;
                let m = self.cfg.block_len as u64;
                for &slot in &confirmed {
                    if self.sifted.len() == target {
                        break;
                    }
                    self.sifted.push(self.record[slot as usize].bit);
                    self.pulses_sent = self.block as u64 * m + slot as u64 + 1;
                }
                let out = self.send(Vec::new(), ClassicalMessage::Detections { slots: confirmed });
                if self.sifted.len() == target {
                    self.state = VerifierState::AwaitFragment;
                    return Ok(out);
                }
                self.pulses_sent = (self.block as u64 + 1) * m;
                if self.block as usize + 1 >= self.cfg.max_blocks {
                    return Err(ProtocolError::InsufficientDetections {
                        need: target,
                        blocks: self.block as usize + 1,
                    });
                }
                self.block += 1;
                self.emit_block(out)
            }
            (VerifierState::AwaitFragment, ClassicalMessage::Fragment { bits }) => {
                let keys = self.keys.as_ref().expect("keys derived");
                let n = self.cfg.fragment_len();
                if bits.len() != n {
                    return Err(ProtocolError::FragmentLength { expected: n, actual: bits.len() });
                }
                let recovered = unmask_fragment(&bits, keys.mask())?;
                let (own, _) = select_fragment(&self.sifted, n)?;
                let qber = hamming_fraction(&own, &recovered).expect("n >= 1");
                let v = verdict(qber, self.cfg.threshold);
                self.finish(qber, v);
                Ok(self.send(Vec::new(), ClassicalMessage::Verdict(v.code())))
            }
            (VerifierState::AwaitAck, other) => Err(unexpected("HELLO_ACK", &other)),
            (VerifierState::AwaitDetections, other) => Err(unexpected("DETECTIONS", &other)),
            (VerifierState::AwaitFragment, other) => Err(unexpected("FRAGMENT", &other)),
            (VerifierState::Idle | VerifierState::Done, other) => Err(unexpected("nothing", &other)),
        }
    }
}

fn unexpected(expected: &'static str, got: &ClassicalMessage) -> ProtocolError {
    ProtocolError::Unexpected { expected, got: got.kind() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProverState {
    AwaitHello,
    AwaitBlock,
    AwaitLight { block: u32 },
    AwaitConfirm,
    AwaitVerdict,
    Done,
}

/// How the prover's side of a round ended.
#[derive(Debug, Clone, PartialEq)]
pub enum ProverOutcome {
    Verdict(VerdictCode),
    Failed(ProtocolError),
}

/// Bob, together with his receiver.
#[derive(Debug, Clone)]
pub struct Prover {
    cfg: ProtocolConfig,
    secret: Vec<u8>,
    strategy: ProverStrategy,
    strategy_rng: RngStream,
    physics_rng: RngStream,
    receiver: Receiver,
    version: u16,
    state: ProverState,
    keys: Option<KeySchedule>,
    block: u32,
    announced: Vec<(u32, bool)>,
    sifted: BitString,
    fragment: Option<BitString>,
    transcript: Transcript,
    outcome: Option<ProverOutcome>,
}

impl Prover {
    pub fn new(
        cfg: ProtocolConfig,
        secret: &[u8],
        strategy: ProverStrategy,
        strategy_rng: RngStream,
        physics_rng: RngStream,
    ) -> Self {
        let receiver = Receiver::new(&cfg.intensity, &cfg.channel, &cfg.detector);
        Self {
            cfg,
            secret: secret.to_vec(),
            strategy,
            strategy_rng,
            physics_rng,
            receiver,
            version: PROTOCOL_VERSION,
            state: ProverState::AwaitHello,
            keys: None,
            block: 0,
            announced: Vec::new(),
            sifted: BitString::new(),
            fragment: None,
            transcript: Transcript::new(),
            outcome: None,
        }
    }

    pub fn with_version(mut self, version: u16) -> Self {
        self.version = version;
        self
    }

    pub fn is_done(&self) -> bool {
        self.state == ProverState::Done
    }

    /// True between a ROUND_BEGIN and the pulses of that block.
    pub fn expects_light(&self) -> bool {
        matches!(self.state, ProverState::AwaitLight { .. })
    }

    pub fn outcome(&self) -> Option<&ProverOutcome> {
        self.outcome.as_ref()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Sifted string `Delta_b`, truncated to `L_delta` once complete.
    pub fn sifted(&self) -> &BitString {
        &self.sifted
    }

    /// The plaintext fragment `delta_b`, once it has been masked and sent.
    pub fn plain_fragment(&self) -> Option<&BitString> {
        self.fragment.as_ref()
    }

    pub fn secrets(&self) -> ForbiddenSet {
        let mut set = ForbiddenSet::new();
        if let Some(k) = &self.keys {
            set.add(SecretKind::BasisSchedule, k.keys().h1.clone());
            set.add(SecretKind::Mask, k.mask().clone());
        }
        if let Some(f) = &self.fragment {
            set.add(SecretKind::PlainFragment, f.clone());
        }
        set
    }

    pub fn handle(&mut self, msg: ClassicalMessage) -> Vec<Outbound> {
        if self.is_done() {
            return Vec::new();
        }
        self.transcript.record(Direction::VerifierToProver, msg.clone());
        match self.step(msg) {
            Ok(out) => out,
            Err(e) => self.fail(e),
        }
    }

    pub fn handle_light(&mut self, symbols: Vec<EmittedSymbol>) -> Vec<Outbound> {
        if self.is_done() {
            return Vec::new();
        }
        match self.measure(symbols) {
            Ok(out) => out,
            Err(e) => self.fail(e),
        }
    }

    fn send(&mut self, msg: ClassicalMessage) -> Vec<Outbound> {
        self.transcript.record(Direction::ProverToVerifier, msg.clone());
        alloc::vec![Outbound::Classical(msg)]
    }

    fn fail(&mut self, e: ProtocolError) -> Vec<Outbound> {
        let reason = e.abort_reason();
        let peer_aborted = matches!(e, ProtocolError::PeerAborted(_));
        self.state = ProverState::Done;
        self.outcome = Some(ProverOutcome::Failed(e));
        if peer_aborted {
            Vec::new()
        } else {
            self.send(ClassicalMessage::Abort(reason))
        }
    }

    fn measure(&mut self, symbols: Vec<EmittedSymbol>) -> Result<Vec<Outbound>, ProtocolError> {
        let ProverState::AwaitLight { block } = self.state else {
            return Err(ProtocolError::UnexpectedLight(self.waiting_for()));
        };
        if symbols.len() != self.cfg.block_len {
            return Err(ProtocolError::LightLength {
                expected: self.cfg.block_len,
                actual: symbols.len(),
            });
        }
        let schedule = match (&self.strategy, &self.keys) {
            (ProverStrategy::Honest, Some(k)) => Some(k.block_schedule(block)?),
            _ => None,
        };
        let events = bob_measure_block(
            &symbols,
            &self.strategy,
            schedule.as_ref(),
            &self.receiver,
            &mut self.strategy_rng,
            &mut self.physics_rng,
        )?;
        self.announced = events
            .iter()
            .filter_map(|e| match e.outcome {
                Outcome::Single(bit) => Some((e.slot, bit)),
                Outcome::NoClick | Outcome::DoubleClick => None,
            })
            .collect();
        let slots = self.announced.iter().map(|&(s, _)| s).collect();
        self.state = ProverState::AwaitConfirm;
        Ok(self.send(ClassicalMessage::Detections { slots }))
    }

    fn waiting_for(&self) -> &'static str {
        match self.state {
            ProverState::AwaitHello => "HELLO",
            ProverState::AwaitBlock => "ROUND_BEGIN",
            ProverState::AwaitLight { .. } => "light",
            ProverState::AwaitConfirm => "DETECTIONS",
            ProverState::AwaitVerdict => "VERDICT",
            ProverState::Done => "nothing",
        }
    }

    fn step(&mut self, msg: ClassicalMessage) -> Result<Vec<Outbound>, ProtocolError> {
        if let ClassicalMessage::Abort(reason) = msg {
            return Err(ProtocolError::PeerAborted(reason));
        }
        match (self.state, msg) {
            (ProverState::AwaitHello, ClassicalMessage::Hello { version, t0 }) => {
                if version != self.version {
                    return Err(ProtocolError::VersionMismatch { ours: self.version, theirs: version });
                }
                self.keys = Some(KeySchedule::new(&self.secret, t0, &self.cfg)?);
                self.state = ProverState::AwaitBlock;
                Ok(self.send(ClassicalMessage::HelloAck { version: self.version, t0 }))
            }
            (ProverState::AwaitBlock, ClassicalMessage::RoundBegin { block, pulses }) => {
                if block != self.block || pulses as usize != self.cfg.block_len {
                    return Err(ProtocolError::BlockMismatch {
                        expected: self.block,
                        got: block,
                        pulses,
                    });
                }
                self.state = ProverState::AwaitLight { block };
                Ok(Vec::new())
            }
            (ProverState::AwaitConfirm, ClassicalMessage::Detections { slots }) => {
                check_slots(&slots, self.cfg.block_len)?;
                let target = self.cfg.target_sifted_len;
                let mut announced = self.announced.iter();
                for &slot in &slots {
                    let bit = announced
                        .by_ref()
                        .find(|&&(s, _)| s >= slot)
                        .filter(|&&(s, _)| s == slot)
                        .map(|&(_, b)| b)
                        .ok_or(ProtocolError::NotAnnounced(slot))?;
                    if self.sifted.len() < target {
                        self.sifted.push(bit);
                    }
                }
                if self.sifted.len() < target {
                    self.block += 1;
                    self.state = ProverState::AwaitBlock;
                    return Ok(Vec::new());
                }
                let keys = self.keys.as_ref().expect("keys derived");
                let (fragment, _) = select_fragment(&self.sifted, self.cfg.fragment_len())?;
                let cipher = mask_fragment(&fragment, keys.mask())?;
                self.fragment = Some(fragment);
                self.state = ProverState::AwaitVerdict;
                Ok(self.send(ClassicalMessage::Fragment { bits: cipher }))
            }
            (ProverState::AwaitVerdict, ClassicalMessage::Verdict(code)) => {
                self.state = ProverState::Done;
                self.outcome = Some(ProverOutcome::Verdict(code));
                Ok(Vec::new())
            }
            (_, other) => Err(unexpected(self.waiting_for(), &other)),
        }
    }
}

/// Stream layout: `row << 32 | round << 2 | role`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Verifier = 0,
    ProverStrategy = 1,
    Physics = 2,
}

pub fn stream_id(row: u32, round: u32, role: Role) -> u64 {
    ((row as u64) << 32) | ((round as u64) << 2) | role as u64
}

/// Who plays the round and with which secrets.
#[derive(Debug, Clone, PartialEq)]
pub struct Parties {
    pub verifier_secret: Vec<u8>,
    pub prover_secret: Vec<u8>,
    pub verifier: VerifierStrategy,
    pub prover: ProverStrategy,
}

impl Parties {
    pub fn honest(secret: &[u8]) -> Self {
        Self {
            verifier_secret: secret.to_vec(),
            prover_secret: secret.to_vec(),
            verifier: VerifierStrategy::Honest,
            prover: ProverStrategy::Honest,
        }
    }
}

/// Identifies one round within a seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundId {
    pub seed: u64,
    pub row: u32,
    pub round: u32,
}

impl RoundId {
    pub fn rng(&self, role: Role) -> RngStream {
        RngStream::new(self.seed, stream_id(self.row, self.round, role))
    }
}

pub fn new_verifier(cfg: &ProtocolConfig, parties: &Parties, id: RoundId) -> Verifier {
    Verifier::new(cfg.clone(), &parties.verifier_secret, parties.verifier, id.rng(Role::Verifier))
}

pub fn new_prover(cfg: &ProtocolConfig, parties: &Parties, id: RoundId) -> Prover {
    Prover::new(
        cfg.clone(),
        &parties.prover_secret,
        parties.prover,
        id.rng(Role::ProverStrategy),
        id.rng(Role::Physics),
    )
}

/// Handshake timestamp of round `round`: the epoch plus one millisecond per round.
pub fn round_t0(cfg: &ProtocolConfig, round: u32) -> u64 {
    let mut clock = SteppingClock::new(cfg.t0_epoch_ms + round as u64);
    clock.now_ms()
}

/// Everything one in-process round produced.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub result: RoundResult,
    pub transcript: Transcript,
    /// Union of both parties' secret strings, for leakage audits.
    pub secrets: ForbiddenSet,
    pub delta_a: BitString,
    pub delta_b: BitString,
    pub prover_outcome: Option<ProverOutcome>,
}

/// Drives a verifier/prover pair to completion in memory.
pub fn drive(verifier: &mut Verifier, prover: &mut Prover, t0: u64) {
    let mut to_prover: VecDeque<Outbound> = verifier.start(t0).into();
    let mut to_verifier: VecDeque<ClassicalMessage> = VecDeque::new();
    loop {
        while let Some(out) = to_prover.pop_front() {
            let replies = match out {
                Outbound::Classical(m) => prover.handle(m),
                Outbound::Light(s) => prover.handle_light(s),
            };
            to_verifier.extend(replies.into_iter().filter_map(|o| match o {
                Outbound::Classical(m) => Some(m),
                Outbound::Light(_) => None,
            }));
        }
        if to_verifier.is_empty() {
            break;
        }
        while let Some(m) = to_verifier.pop_front() {
            to_prover.extend(verifier.handle(m));
        }
    }
}

pub fn run_round(cfg: &ProtocolConfig, parties: &Parties, id: RoundId) -> RoundRecord {
    let mut verifier = new_verifier(cfg, parties, id);
    let mut prover = new_prover(cfg, parties, id);
    drive(&mut verifier, &mut prover, round_t0(cfg, id.round));

    let result = *verifier.result().expect("verifier always finishes a driven round");
    let mut secrets = verifier.secrets();
    secrets.extend(prover.secrets());
    RoundRecord {
        result,
        transcript: verifier.transcript.clone(),
        secrets,
        delta_a: verifier.sifted.clone(),
        delta_b: prover.sifted.clone(),
        prover_outcome: prover.outcome().cloned(),
    }
}

/// Aggregate over a session's rounds. Mean and sample standard deviation
/// use completed rounds; aborted rounds only count towards `aborted_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStats {
    pub mean_qber: f64,
    pub sigma_qber: f64,
    /// False for fewer than two completed rounds, where sigma is reported as 0.
    pub sigma_defined: bool,
    pub accept_count: usize,
    pub aborted_count: usize,
    pub rounds: Vec<RoundResult>,
}

impl SessionStats {
    pub fn from_rounds(rounds: Vec<RoundResult>) -> Self {
        let completed: Vec<f64> = rounds.iter().filter(|r| !r.aborted()).map(|r| r.qber_est).collect();
        let k = completed.len();
        let mean = if k == 0 { 0.0 } else { completed.iter().sum::<f64>() / k as f64 };
        let sigma = if k < 2 {
            0.0
        } else {
            libm::sqrt(completed.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (k - 1) as f64)
        };
        Self {
            mean_qber: mean,
            sigma_qber: sigma,
            sigma_defined: k >= 2,
            accept_count: rounds.iter().filter(|r| r.accepted).count(),
            aborted_count: rounds.len() - k,
            rounds,
        }
    }

    pub fn iterations(&self) -> usize {
        self.rounds.len()
    }

    pub fn reject_count(&self) -> usize {
        self.rounds.len() - self.accept_count - self.aborted_count
    }

    /// Mean over rounds of model time per sifted bit.
    pub fn mean_time_per_bit_s(&self) -> f64 {
        let times: Vec<f64> = self.rounds.iter().filter(|r| !r.aborted()).map(|r| r.time_per_bit_s()).collect();
        if times.is_empty() {
            return 0.0;
        }
        times.iter().sum::<f64>() / times.len() as f64
    }
}

/// Runs `cfg.iterations` independent rounds, each with its own handshake
/// and random streams.
pub fn run_session(cfg: &ProtocolConfig, parties: &Parties, seed: u64, row: u32) -> SessionStats {
    let rounds = (0..cfg.iterations as u32)
        .map(|round| run_round(cfg, parties, RoundId { seed, row, round }).result)
        .collect();
    SessionStats::from_rounds(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ideal_cfg(target: usize) -> ProtocolConfig {
        ProtocolConfig {
            block_len: 512,
            target_sifted_len: target,
            channel: ChannelModel::ideal(),
            detector: DetectorModel::ideal(),
            ..ProtocolConfig::default()
        }
    }

    fn id(round: u32) -> RoundId {
        RoundId { seed: 5, row: 0, round }
    }

    #[test]
    fn fragment_length_rule() {
        assert_eq!(fragment_len_for(0.15, 2048), 307);
        assert_eq!(fragment_len_for(0.15, 1024), 153);
        assert_eq!(fragment_len_for(0.15, 512), 76);
        assert_eq!(fragment_len_for(0.15, 256), 38);
        assert_eq!(fragment_len_for(0.5, 10), 5);
    }

    #[test]
    fn config_validation() {
        ProtocolConfig::default().validate().unwrap();
        let bad = |f: fn(&mut ProtocolConfig)| {
            let mut c = ProtocolConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert_eq!(bad(|c| c.fragment_fraction = 1.0), ConfigError::FragmentFraction(1.0));
        assert_eq!(bad(|c| c.threshold = 0.5), ConfigError::Threshold(0.5));
        assert_eq!(bad(|c| c.iterations = 0), ConfigError::Iterations);
        assert_eq!(bad(|c| c.block_len = 200), ConfigError::FragmentLen { n: 307, m: 200 });
        assert_eq!(bad(|c| c.x_basis_fraction = Some(0.0)), ConfigError::BasisFraction(0.0));
        assert!(matches!(bad(|c| c.detector.efficiency = 2.0), ConfigError::Physics(_)));
    }

    #[test]
    fn verdict_boundary() {
        assert_eq!(verdict(0.029, 0.11), Verdict::Accept);
        assert_eq!(verdict(0.266, 0.11), Verdict::Reject);
        assert_eq!(verdict(0.11, 0.11), Verdict::Reject);
    }

    #[test]
    fn prepare_follows_schedule() {
        let plan = IntensityPlan::default();
        let mut rng = RngStream::new(1, 1);
        let zeros = BitString::zeros(64);
        assert!(alice_prepare_block(&zeros, &plan, &mut rng).iter().all(|s| s.basis == Basis::Z));
        let ones: BitString = core::iter::repeat_n(true, 64).collect();
        assert!(alice_prepare_block(&ones, &plan, &mut rng).iter().all(|s| s.basis == Basis::X));
    }

    #[test]
    fn sift_projects_announced_slots() {
        let plan = IntensityPlan::default();
        let record = alice_prepare_block(&BitString::zeros(10), &plan, &mut RngStream::new(2, 0));
        let d = sift(&record, &[2, 5, 7]).unwrap();
        let expect: BitString = [2, 5, 7].iter().map(|&i| record[i].bit).collect();
        assert_eq!(d, expect);
        assert_eq!(sift(&record, &[]).unwrap(), BitString::new());
        assert_eq!(sift(&record, &[5, 2]), Err(ProtocolError::SlotOrder(1)));
        assert_eq!(sift(&record, &[3, 3]), Err(ProtocolError::SlotOrder(1)));
        assert_eq!(sift(&record, &[10]), Err(ProtocolError::SlotOutOfRange { slot: 10, pulses: 10 }));
    }

    #[test]
    fn fragment_selection() {
        let d: BitString = "10110".parse().unwrap();
        let (frag, rest) = select_fragment(&d, 3).unwrap();
        assert_eq!(frag, "101".parse().unwrap());
        assert_eq!(rest, "10".parse().unwrap());
        let (frag, rest) = select_fragment(&d, 5).unwrap();
        assert_eq!(frag, d);
        assert!(rest.is_empty());
        assert_eq!(select_fragment(&d, 6), Err(ProtocolError::ShortSifted { need: 6, have: 5 }));
    }

    #[test]
    fn fragment_masking() {
        let delta: BitString = "1100101".parse().unwrap();
        let mask: BitString = "0110110".parse().unwrap();
        let c = mask_fragment(&delta, &mask).unwrap();
        assert_eq!(unmask_fragment(&c, &mask).unwrap(), delta);
        assert_eq!(mask_fragment(&BitString::zeros(7), &mask).unwrap(), mask);
        assert!(mask_fragment(&delta, &BitString::zeros(6)).is_err());
    }

    #[test]
    fn noiseless_honest_round_is_exact() {
        let cfg = ideal_cfg(256);
        let rec = run_round(&cfg, &Parties::honest(b"pre-shared"), id(0));
        assert_eq!(rec.result.qber_est, 0.0);
        assert!(rec.result.accepted);
        assert_eq!(rec.delta_a, rec.delta_b);
        assert_eq!(rec.delta_a.len(), 256);
        assert_eq!(rec.result.fragment_len, 38);
        assert_eq!(rec.prover_outcome, Some(ProverOutcome::Verdict(VerdictCode::Accept)));
    }

    #[test]
    fn multi_block_rounds_use_fresh_schedules() {
        let cfg = ProtocolConfig { target_sifted_len: 1024, ..ideal_cfg(0) };
        let rec = run_round(&cfg, &Parties::honest(b"pre-shared"), id(1));
        assert!(rec.result.blocks >= 3, "{:?}", rec.result);
        assert_eq!(rec.result.qber_est, 0.0);
        let keys = KeySchedule::new(b"pre-shared", rec.result.t0, &cfg).unwrap();
        let b0 = keys.block_schedule(0).unwrap();
        let b1 = keys.block_schedule(1).unwrap();
        assert_eq!(b0, keys.keys().h1);
        assert_ne!(b0, b1);
        assert!(rec.result.pulses_sent > 2 * 512);
        assert!(rec.result.pulses_sent <= rec.result.blocks as u64 * 512);
    }

    #[test]
    fn transcript_shape() {
        let cfg = ideal_cfg(256);
        let rec = run_round(&cfg, &Parties::honest(b"pre-shared"), id(2));
        let kinds: Vec<MessageKind> = rec.transcript.entries().iter().map(|(_, m)| m.kind()).collect();
        assert_eq!(&kinds[..3], &[MessageKind::Hello, MessageKind::HelloAck, MessageKind::RoundBegin]);
        assert_eq!(&kinds[kinds.len() - 2..], &[MessageKind::Fragment, MessageKind::Verdict]);
        assert!(kinds.iter().all(|k| *k != MessageKind::Abort));
    }

    #[test]
    fn handshake_echo_and_mismatch() {
        let cfg = ideal_cfg(256);
        let parties = Parties::honest(b"s");
        let mut v = new_verifier(&cfg, &parties, id(0));
        let mut p = new_prover(&cfg, &parties, id(0));
        let hello = v.start(1_700_000_000_000);
        let Outbound::Classical(hello) = hello[0].clone() else { panic!() };
        let ack = p.handle(hello);
        assert_eq!(
            ack,
            vec![Outbound::Classical(ClassicalMessage::HelloAck { version: PROTOCOL_VERSION, t0: 1_700_000_000_000 })]
        );

        let mut v = new_verifier(&cfg, &parties, id(0));
        v.start(1_700_000_000_000);
        let out = v.handle(ClassicalMessage::HelloAck { version: PROTOCOL_VERSION, t0: 1_700_000_000_001 });
        assert_eq!(out, vec![Outbound::Classical(ClassicalMessage::Abort(AbortReason::HandshakeMismatch))]);
        assert!(v.is_done());
        assert_eq!(v.result().unwrap().verdict, Verdict::Error(AbortReason::HandshakeMismatch));
        assert!(!v.result().unwrap().accepted);
    }

    #[test]
    fn version_mismatch_aborts() {
        let cfg = ideal_cfg(256);
        let parties = Parties::honest(b"s");
        let mut v = new_verifier(&cfg, &parties, id(0));
        let mut p = new_prover(&cfg, &parties, id(0)).with_version(9);
        drive(&mut v, &mut p, 77);
        assert_eq!(v.result().unwrap().verdict, Verdict::Error(AbortReason::VersionMismatch));
        assert!(v.transcript().contains_kind(MessageKind::Abort));
        assert!(matches!(p.outcome(), Some(ProverOutcome::Failed(ProtocolError::VersionMismatch { .. }))));
    }

    #[test]
    fn malformed_detections_fail_closed() {
        let cfg = ideal_cfg(256);
        let parties = Parties::honest(b"s");
        let mut v = new_verifier(&cfg, &parties, id(0));
        v.start(5);
        v.handle(ClassicalMessage::HelloAck { version: PROTOCOL_VERSION, t0: 5 });
        let out = v.handle(ClassicalMessage::Detections { slots: vec![1, 9999] });
        assert_eq!(out, vec![Outbound::Classical(ClassicalMessage::Abort(AbortReason::ProtocolViolation))]);
        let r = v.result().unwrap();
        assert!(!r.accepted);
        assert_eq!(r.verdict, Verdict::Error(AbortReason::ProtocolViolation));
    }

    #[test]
    fn wrong_fragment_length_fails_closed() {
        let cfg = ideal_cfg(256);
        let parties = Parties::honest(b"s");
        let mut v = new_verifier(&cfg, &parties, id(0));
        let mut p = new_prover(&cfg, &parties, id(0));
        // run honestly up to the fragment, then substitute a short one
        let mut to_p: VecDeque<Outbound> = v.start(5).into();
        loop {
            let mut replies = Vec::new();
            while let Some(o) = to_p.pop_front() {
                replies.extend(match o {
                    Outbound::Classical(m) => p.handle(m),
                    Outbound::Light(s) => p.handle_light(s),
                });
            }
            let mut done = false;
            for r in replies {
                let Outbound::Classical(mut m) = r else { continue };
                if let ClassicalMessage::Fragment { .. } = m {
                    m = ClassicalMessage::Fragment { bits: BitString::zeros(10) };
                    done = true;
                }
                to_p.extend(v.handle(m));
            }
            if done {
                break;
            }
        }
        let r = v.result().unwrap();
        assert_eq!(r.verdict, Verdict::Error(AbortReason::ProtocolViolation));
        assert!(!r.accepted);
    }

    #[test]
    fn unannounced_confirmation_is_a_violation() {
        let cfg = ideal_cfg(256);
        let parties = Parties::honest(b"s");
        let mut p = new_prover(&cfg, &parties, id(0));
        p.handle(ClassicalMessage::Hello { version: PROTOCOL_VERSION, t0: 5 });
        p.handle(ClassicalMessage::RoundBegin { block: 0, pulses: 512 });
        let light = alice_prepare_block(&BitString::zeros(512), &cfg.intensity, &mut RngStream::new(0, 0));
        let out = p.handle_light(light);
        let Outbound::Classical(ClassicalMessage::Detections { slots }) = &out[0] else { panic!() };
        let missing = (0..512).find(|s| !slots.contains(s)).unwrap();
        let out = p.handle(ClassicalMessage::Detections { slots: vec![missing] });
        assert_eq!(out, vec![Outbound::Classical(ClassicalMessage::Abort(AbortReason::ProtocolViolation))]);
        assert!(matches!(p.outcome(), Some(ProverOutcome::Failed(ProtocolError::NotAnnounced(_)))));
    }

    #[test]
    fn unreachable_target_aborts_after_max_blocks() {
        let cfg = ProtocolConfig {
            max_blocks: 2,
            ..ideal_cfg(50_000)
        };
        let cfg = ProtocolConfig { target_sifted_len: 4000, block_len: 1024, ..cfg };
        let rec = run_round(&cfg, &Parties::honest(b"s"), id(0));
        assert_eq!(rec.result.verdict, Verdict::Error(AbortReason::InsufficientDetections));
        assert!(!rec.result.accepted);
    }

    #[test]
    fn distinct_t0_gives_distinct_keys() {
        let cfg = ProtocolConfig::default();
        let a = KeySchedule::new(b"secret", round_t0(&cfg, 0), &cfg).unwrap();
        let b = KeySchedule::new(b"secret", round_t0(&cfg, 1), &cfg).unwrap();
        assert_eq!(round_t0(&cfg, 1) - round_t0(&cfg, 0), 1);
        assert_ne!(a.keys().h1, b.keys().h1);
        assert_ne!(a.keys().h2, b.keys().h2);
    }

    #[test]
    fn biased_schedule_hits_fraction() {
        let cfg = ProtocolConfig { x_basis_fraction: Some(0.3), ..ProtocolConfig::default() };
        let keys = KeySchedule::new(b"secret", 3, &cfg).unwrap();
        let s = keys.block_schedule(0).unwrap();
        assert_eq!(s.len(), 2048);
        let r = s.count_ones() as f64 / 2048.0;
        let sigma = (0.3f64 * 0.7 / 2048.0).sqrt();
        assert!((r - 0.3).abs() < 4.0 * sigma, "{r}");
    }

    #[test]
    fn session_statistics() {
        let mk = |q: f64| RoundResult {
            t0: 1,
            qber_est: q,
            accepted: q < 0.11,
            verdict: verdict(q, 0.11),
            sifted_len: 100,
            fragment_len: 15,
            pulses_sent: 1000,
            blocks: 1,
            elapsed_model_s: 1.0,
        };
        let one = SessionStats::from_rounds(vec![mk(0.03)]);
        assert_eq!(one.sigma_qber, 0.0);
        assert!(!one.sigma_defined);
        let s = SessionStats::from_rounds(vec![mk(0.02), mk(0.04), mk(0.3)]);
        assert!((s.mean_qber - 0.12).abs() < 1e-15);
        let var = (0.01f64 + 0.0064 + 0.0324) / 2.0;
        assert!((s.sigma_qber - var.sqrt()).abs() < 1e-12);
        assert_eq!((s.accept_count, s.reject_count()), (2, 1));
        assert!((s.mean_time_per_bit_s() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn identical_seeds_repeat_transcripts() {
        let cfg = ProtocolConfig { channel: ChannelModel::back_to_back(), detector: DetectorModel::default(), ..ideal_cfg(256) };
        let parties = Parties::honest(b"pre-shared");
        let a = run_round(&cfg, &parties, id(3));
        let b = run_round(&cfg, &parties, id(3));
        assert_eq!(a.transcript.to_bytes(), b.transcript.to_bytes());
        let c = run_round(&cfg, &parties, id(4));
        assert_ne!(a.transcript.to_bytes(), c.transcript.to_bytes());
    }
}
