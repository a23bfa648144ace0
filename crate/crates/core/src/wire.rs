//! Classical-channel messages, their frame codec, round transcripts and the
//! leakage audit run over them.
//!
//! A frame is `payload length (u32 BE) || type (u8) || payload`. Payload
//! layouts, all integers big-endian:
//!
//! | type | message     | payload                                       |
//! |------|-------------|-----------------------------------------------|
//! | 0x01 | HELLO       | version u16, t0 u64                           |
//! | 0x02 | HELLO_ACK   | version u16, t0 u64                           |
//! | 0x03 | ROUND_BEGIN | block u32, pulses u32                         |
//! | 0x04 | DETECTIONS  | count u32, count x slot u32 (strictly rising) |
//! | 0x05 | FRAGMENT    | bit count u32, packed bits MSB-first          |
//! | 0x06 | VERDICT     | code u8                                       |
//! | 0x07 | ABORT       | reason u8                                     |
//!
//! The channel is assumed authenticated; frames carry no MAC.

use alloc::vec;
use alloc::vec::Vec;

use crate::bits::{byte_len, BitError, BitString};

pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 5;
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload of {0} bytes exceeds the 1 MiB frame limit")]
    Oversize(usize),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("{kind} payload has {actual} bytes, expected {expected}")]
    PayloadLength {
        kind: MessageKind,
        expected: usize,
        actual: usize,
    },
    #[error("detection slots not strictly increasing at position {0}")]
    SlotOrder(usize),
    #[error("unknown {field} code {code}")]
    UnknownCode { field: &'static str, code: u8 },
    #[error("fragment bits: {0}")]
    Bits(#[from] BitError),
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Hello,
    HelloAck,
    RoundBegin,
    Detections,
    Fragment,
    Verdict,
    Abort,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::Hello => 0x01,
            MessageKind::HelloAck => 0x02,
            MessageKind::RoundBegin => 0x03,
            MessageKind::Detections => 0x04,
            MessageKind::Fragment => 0x05,
            MessageKind::Verdict => 0x06,
            MessageKind::Abort => 0x07,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x01 => MessageKind::Hello,
            0x02 => MessageKind::HelloAck,
            0x03 => MessageKind::RoundBegin,
            0x04 => MessageKind::Detections,
            0x05 => MessageKind::Fragment,
            0x06 => MessageKind::Verdict,
            0x07 => MessageKind::Abort,
            _ => return None,
        })
    }
}

impl core::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            MessageKind::Hello => "HELLO",
            MessageKind::HelloAck => "HELLO_ACK",
            MessageKind::RoundBegin => "ROUND_BEGIN",
            MessageKind::Detections => "DETECTIONS",
            MessageKind::Fragment => "FRAGMENT",
            MessageKind::Verdict => "VERDICT",
            MessageKind::Abort => "ABORT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerdictCode {
    Reject = 0,
    Accept = 1,
    Violation = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    VersionMismatch = 1,
    HandshakeMismatch = 2,
    ProtocolViolation = 3,
    InsufficientDetections = 4,
}

impl VerdictCode {
    fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            0 => Ok(VerdictCode::Reject),
            1 => Ok(VerdictCode::Accept),
            2 => Ok(VerdictCode::Violation),
            _ => Err(DecodeError::UnknownCode { field: "verdict", code }),
        }
    }
}

impl AbortReason {
    fn from_code(code: u8) -> Result<Self, DecodeError> {
        match code {
            1 => Ok(AbortReason::VersionMismatch),
            2 => Ok(AbortReason::HandshakeMismatch),
            3 => Ok(AbortReason::ProtocolViolation),
            4 => Ok(AbortReason::InsufficientDetections),
            _ => Err(DecodeError::UnknownCode { field: "abort", code }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassicalMessage {
    Hello { version: u16, t0: u64 },
    HelloAck { version: u16, t0: u64 },
    RoundBegin { block: u32, pulses: u32 },
    Detections { slots: Vec<u32> },
    Fragment { bits: BitString },
    Verdict(VerdictCode),
    Abort(AbortReason),
}

impl ClassicalMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ClassicalMessage::Hello { .. } => MessageKind::Hello,
            ClassicalMessage::HelloAck { .. } => MessageKind::HelloAck,
            ClassicalMessage::RoundBegin { .. } => MessageKind::RoundBegin,
            ClassicalMessage::Detections { .. } => MessageKind::Detections,
            ClassicalMessage::Fragment { .. } => MessageKind::Fragment,
            ClassicalMessage::Verdict(_) => MessageKind::Verdict,
            ClassicalMessage::Abort(_) => MessageKind::Abort,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            ClassicalMessage::Hello { version, t0 } | ClassicalMessage::HelloAck { version, t0 } => {
                p.extend_from_slice(&version.to_be_bytes());
                p.extend_from_slice(&t0.to_be_bytes());
            }
            ClassicalMessage::RoundBegin { block, pulses } => {
                p.extend_from_slice(&block.to_be_bytes());
                p.extend_from_slice(&pulses.to_be_bytes());
            }
            ClassicalMessage::Detections { slots } => {
                p.reserve(4 + 4 * slots.len());
                p.extend_from_slice(&(slots.len() as u32).to_be_bytes());
                for s in slots {
                    p.extend_from_slice(&s.to_be_bytes());
                }
            }
            ClassicalMessage::Fragment { bits } => {
                p.extend_from_slice(&(bits.len() as u32).to_be_bytes());
                p.extend_from_slice(bits.as_bytes());
            }
            ClassicalMessage::Verdict(code) => p.push(*code as u8),
            ClassicalMessage::Abort(reason) => p.push(*reason as u8),
        }
        p
    }

    /// Validates the message invariants without encoding.
    pub fn check(&self) -> Result<(), DecodeError> {
        if let ClassicalMessage::Detections { slots } = self {
            check_increasing(slots)?;
        }
        Ok(())
    }
}

fn check_increasing(slots: &[u32]) -> Result<(), DecodeError> {
    match slots.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => Err(DecodeError::SlotOrder(i + 1)),
        None => Ok(()),
    }
}

pub fn encode(msg: &ClassicalMessage) -> Vec<u8> {
    let payload = msg.payload();
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.push(msg.kind().code());
    frame.extend_from_slice(&payload);
    frame
}

/// Parses the 5-byte header into `(payload length, raw type)`.
pub fn decode_header(header: &[u8; HEADER_LEN]) -> Result<(usize, u8), DecodeError> {
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError::Oversize(len));
    }
    Ok((len, header[4]))
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    u64::from_be_bytes(a)
}

fn expect_len(kind: MessageKind, p: &[u8], expected: usize) -> Result<(), DecodeError> {
    if p.len() == expected {
        Ok(())
    } else {
        Err(DecodeError::PayloadLength {
            kind,
            expected,
            actual: p.len(),
        })
    }
}

/// Decodes a payload already split off its header.
pub fn decode_payload(type_code: u8, p: &[u8]) -> Result<ClassicalMessage, DecodeError> {
    let kind = MessageKind::from_code(type_code).ok_or(DecodeError::UnknownType(type_code))?;
    Ok(match kind {
        MessageKind::Hello | MessageKind::HelloAck => {
            expect_len(kind, p, 10)?;
            let (version, t0) = (be_u16(p), be_u64(&p[2..]));
            if kind == MessageKind::Hello {
                ClassicalMessage::Hello { version, t0 }
            } else {
                ClassicalMessage::HelloAck { version, t0 }
            }
        }
        MessageKind::RoundBegin => {
            expect_len(kind, p, 8)?;
            ClassicalMessage::RoundBegin {
                block: be_u32(p),
                pulses: be_u32(&p[4..]),
            }
        }
        MessageKind::Detections => {
            if p.len() < 4 {
                return Err(DecodeError::PayloadLength { kind, expected: 4, actual: p.len() });
            }
            let count = be_u32(p) as usize;
            let expected = count.checked_mul(4).and_then(|c| c.checked_add(4)).unwrap_or(usize::MAX);
            expect_len(kind, p, expected)?;
            let slots: Vec<u32> = p[4..].chunks_exact(4).map(be_u32).collect();
            check_increasing(&slots)?;
            ClassicalMessage::Detections { slots }
        }
        MessageKind::Fragment => {
            if p.len() < 4 {
                return Err(DecodeError::PayloadLength { kind, expected: 4, actual: p.len() });
            }
            let count = be_u32(p) as usize;
            expect_len(kind, p, 4 + byte_len(count))?;
            ClassicalMessage::Fragment {
                bits: BitString::from_bytes(&p[4..], count)?,
            }
        }
        MessageKind::Verdict => {
            expect_len(kind, p, 1)?;
            ClassicalMessage::Verdict(VerdictCode::from_code(p[0])?)
        }
        MessageKind::Abort => {
            expect_len(kind, p, 1)?;
            ClassicalMessage::Abort(AbortReason::from_code(p[0])?)
        }
    })
}

/// Decodes one complete frame; trailing bytes are an error.
pub fn decode(frame: &[u8]) -> Result<ClassicalMessage, DecodeError> {
    let (msg, used) = decode_prefix(frame)?;
    if used != frame.len() {
        return Err(DecodeError::Trailing(frame.len() - used));
    }
    Ok(msg)
}

/// Decodes the first frame of `buf`, returning it with its byte length.
pub fn decode_prefix(buf: &[u8]) -> Result<(ClassicalMessage, usize), DecodeError> {
    let header: &[u8; HEADER_LEN] = buf
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(DecodeError::Truncated { needed: HEADER_LEN, have: buf.len() })?;
    let (len, code) = decode_header(header)?;
    let end = HEADER_LEN + len;
    if buf.len() < end {
        return Err(DecodeError::Truncated { needed: end, have: buf.len() });
    }
    Ok((decode_payload(code, &buf[HEADER_LEN..end])?, end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    VerifierToProver,
    ProverToVerifier,
}

/// Append-only log of one round's classical messages, in dialogue order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<(Direction, ClassicalMessage)>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, direction: Direction, msg: ClassicalMessage) {
        self.entries.push((direction, msg));
    }

    pub fn entries(&self) -> &[(Direction, ClassicalMessage)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_kind(&self, kind: MessageKind) -> bool {
        self.entries.iter().any(|(_, m)| m.kind() == kind)
    }

    /// Canonical byte form: per entry a direction byte (0 = verifier to
    /// prover, 1 = prover to verifier) followed by the encoded frame.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (dir, msg) in &self.entries {
            out.push(match dir {
                Direction::VerifierToProver => 0,
                Direction::ProverToVerifier => 1,
            });
            out.extend_from_slice(&encode(msg));
        }
        out
    }

    /// Ciphertext bits of every FRAGMENT frame.
    pub fn fragments(&self) -> impl Iterator<Item = &BitString> {
        self.entries.iter().filter_map(|(_, m)| match m {
            ClassicalMessage::Fragment { bits } => Some(bits),
            _ => None,
        })
    }
}

/// Longest window that is compared against frame payloads.
pub const AUDIT_WINDOW_BITS: usize = 64;
/// Forbidden strings shorter than this are not auditable and are skipped.
pub const MIN_AUDIT_BITS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecretKind {
    BasisSchedule,
    Mask,
    PlainFragment,
}

/// Secret-dependent strings that must never appear on the wire.
#[derive(Debug, Clone, Default)]
pub struct ForbiddenSet {
    items: Vec<(SecretKind, BitString)>,
}

impl ForbiddenSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: SecretKind, bits: BitString) {
        self.items.push((kind, bits));
    }

    pub fn extend(&mut self, other: ForbiddenSet) {
        self.items.extend(other.items);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Leak {
    pub entry: usize,
    pub kind: SecretKind,
    pub payload_bit_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub frames_checked: usize,
    pub windows_indexed: usize,
    pub leaks: Vec<Leak>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.leaks.is_empty()
    }
}

fn bit_at(bytes: &[u8], i: usize) -> u64 {
    ((bytes[i / 8] >> (7 - i % 8)) & 1) as u64
}

/// Rolling `width`-bit windows over a packed bit sequence of `len` bits.
fn windows(bytes: &[u8], len: usize, width: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
    let mask = if width == 64 { u64::MAX } else { (1u64 << width) - 1 };
    let mut acc = 0u64;
    (0..len).filter_map(move |i| {
        acc = ((acc << 1) | bit_at(bytes, i)) & mask;
        (i + 1 >= width).then(|| (i + 1 - width, acc))
    })
}

const FILTER_BITS: u32 = 20;

fn filter_slot(w: u64, width: usize) -> usize {
    (w.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(width as u64) >> (64 - FILTER_BITS)) as usize
}

/// Searches every frame payload, at every bit offset, for any window of a
/// forbidden string. Windows are 64 bits, or the whole string when it is
/// shorter than 64 but at least 32 bits.
pub fn transcript_audit(transcript: &Transcript, forbidden: &ForbiddenSet) -> AuditReport {
    let mut report = AuditReport::default();
    // (width, window value, kind) sorted for binary search, behind a bitmap prefilter
    let mut index: Vec<(usize, u64, u8)> = Vec::new();
    let mut filter = vec![0u64; (1usize << FILTER_BITS) / 64];
    let mut widths: Vec<usize> = Vec::new();
    for (kind, bits) in &forbidden.items {
        if bits.len() < MIN_AUDIT_BITS {
            continue;
        }
        let width = bits.len().min(AUDIT_WINDOW_BITS);
        if !widths.contains(&width) {
            widths.push(width);
        }
        for (_, w) in windows(bits.as_bytes(), bits.len(), width) {
            let slot = filter_slot(w, width);
            filter[slot / 64] |= 1 << (slot % 64);
            index.push((width, w, *kind as u8));
        }
    }
    index.sort_unstable();
    index.dedup();
    report.windows_indexed = index.len();

    for (entry, (_, msg)) in transcript.entries.iter().enumerate() {
        let payload = msg.payload();
        report.frames_checked += 1;
        for &width in &widths {
            for (offset, w) in windows(&payload, payload.len() * 8, width) {
                let slot = filter_slot(w, width);
                if filter[slot / 64] & (1 << (slot % 64)) == 0 {
                    continue;
                }
                let from = index.partition_point(|&(wd, v, _)| (wd, v) < (width, w));
                for &(_, _, kind) in index[from..].iter().take_while(|&&(wd, v, _)| (wd, v) == (width, w)) {
                    let kind = match kind {
                        0 => SecretKind::BasisSchedule,
                        1 => SecretKind::Mask,
                        _ => SecretKind::PlainFragment,
                    };
                    report.leaks.push(Leak { entry, kind, payload_bit_offset: offset });
                }
            }
        }
    }
    report
}

/// Pooled ones-fraction of FRAGMENT ciphertexts across many rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FragmentBalance {
    pub ones: u64,
    pub bits: u64,
    pub fragments: u64,
}

impl FragmentBalance {
    pub fn add_transcript(&mut self, t: &Transcript) {
        for f in t.fragments() {
            self.ones += f.count_ones() as u64;
            self.bits += f.len() as u64;
            self.fragments += 1;
        }
    }

    pub fn ones_fraction(&self) -> f64 {
        self.ones as f64 / self.bits as f64
    }

    /// Within `0.5 ± 3 sigma` of a fair coin, over at least 100 fragments.
    pub fn is_balanced(&self) -> bool {
        if self.fragments < 100 || self.bits == 0 {
            return false;
        }
        let sigma = libm::sqrt(0.25 / self.bits as f64);
        (self.ones_fraction() - 0.5).abs() <= 3.0 * sigma
    }
}
