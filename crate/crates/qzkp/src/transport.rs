//! Moving protocol traffic between the two parties.
//!
//! - Frame IO over any `Read`/`Write` for classical messages.
//! - An in-memory duplex: each party on its own thread, joined by bounded
//!   blocking queues.
//! - TCP: the verifier listens, the prover opens two connections per round,
//!   one for classical frames (tagged `C`) and one emulating the quantum
//!   link (tagged `Q`).
//!
//! The classical channel is assumed to be authenticated, as the protocol
//! requires; nothing here adds message authentication or encryption. Run
//! the TCP mode over a trusted network only.
//!
//! Light frames carry the prepared state of each pulse (`u32` count, then one
//! byte per pulse: bit 0 value, bit 1 X basis, bits 2..3 intensity class).
//! They stand in for photons and are never part of the classical transcript.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::Duration;

use qzkp_core::photonics::{Basis, EmittedSymbol, Intensity};
use qzkp_core::protocol::{
    new_prover, new_verifier, round_t0, Outbound, Parties, Prover, ProverOutcome, ProtocolConfig, RoundId,
    RoundResult, Verifier,
};
use qzkp_core::wire::{self, ClassicalMessage, DecodeError, ForbiddenSet, Transcript, HEADER_LEN, MAX_PAYLOAD};

pub const CLASSICAL_TAG: u8 = b'C';
pub const QUANTUM_TAG: u8 = b'Q';

/// Depth of each in-memory queue.
const QUEUE_DEPTH: usize = 16;

const IO_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed frame: {0}")]
    Decode(#[from] DecodeError),
    #[error("malformed light frame: {0}")]
    Light(&'static str),
    #[error("unexpected connection tag {0:#04x}")]
    Tag(u8),
    #[error("peer closed the connection mid-round")]
    Closed,
}

pub fn write_message(w: &mut impl Write, msg: &ClassicalMessage) -> io::Result<()> {
    w.write_all(&wire::encode(msg))?;
    w.flush()
}

fn read_exact_or_closed(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TransportError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => TransportError::Io(e),
    })
}

pub fn read_message(r: &mut impl Read) -> Result<ClassicalMessage, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    read_exact_or_closed(r, &mut header)?;
    let (len, code) = wire::decode_header(&header)?;
    let mut payload = vec![0u8; len];
    read_exact_or_closed(r, &mut payload)?;
    Ok(wire::decode_payload(code, &payload)?)
}

fn intensity_code(i: Intensity) -> u8 {
    match i {
        Intensity::Signal => 0,
        Intensity::Decoy => 1,
        Intensity::Vacuum => 2,
    }
}

pub fn encode_light(symbols: &[EmittedSymbol]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + symbols.len());
    out.extend_from_slice(&(symbols.len() as u32).to_be_bytes());
    out.extend(symbols.iter().map(|s| {
        s.bit as u8 | ((s.basis == Basis::X) as u8) << 1 | intensity_code(s.intensity) << 2
    }));
    out
}

fn decode_symbol(slot: u32, b: u8) -> Result<EmittedSymbol, TransportError> {
    let intensity = match b >> 2 {
        0 => Intensity::Signal,
        1 => Intensity::Decoy,
        2 => Intensity::Vacuum,
        _ => return Err(TransportError::Light("reserved bits set")),
    };
    Ok(EmittedSymbol {
        slot,
        bit: b & 1 == 1,
        basis: Basis::from_bit(b & 2 == 2),
        intensity,
    })
}

pub fn decode_light(bytes: &[u8]) -> Result<Vec<EmittedSymbol>, TransportError> {
    let (count, body) = bytes.split_at_checked(4).ok_or(TransportError::Light("truncated count"))?;
    let count = u32::from_be_bytes(count.try_into().expect("4 bytes")) as usize;
    if body.len() != count {
        return Err(TransportError::Light("length does not match count"));
    }
    body.iter().enumerate().map(|(i, &b)| decode_symbol(i as u32, b)).collect()
}

pub fn write_light(w: &mut impl Write, symbols: &[EmittedSymbol]) -> io::Result<()> {
    w.write_all(&encode_light(symbols))?;
    w.flush()
}

pub fn read_light(r: &mut impl Read) -> Result<Vec<EmittedSymbol>, TransportError> {
    let mut count = [0u8; 4];
    read_exact_or_closed(r, &mut count)?;
    let n = u32::from_be_bytes(count) as usize;
    if n > MAX_PAYLOAD {
        return Err(TransportError::Light("oversize block"));
    }
    let mut body = vec![0u8; n];
    read_exact_or_closed(r, &mut body)?;
    body.iter().enumerate().map(|(i, &b)| decode_symbol(i as u32, b)).collect()
}

/// The verifier's view of a finished round.
#[derive(Debug, Clone)]
pub struct VerifierRound {
    pub result: RoundResult,
    pub transcript: Transcript,
    pub secrets: ForbiddenSet,
}

impl VerifierRound {
    fn from_verifier(v: &Verifier) -> Result<Self, TransportError> {
        Ok(Self {
            result: *v.result().ok_or(TransportError::Closed)?,
            transcript: v.transcript().clone(),
            secrets: v.secrets(),
        })
    }
}

/// The prover's view of a finished round.
#[derive(Debug, Clone)]
pub struct ProverRound {
    pub outcome: Option<ProverOutcome>,
    pub transcript: Transcript,
    pub secrets: ForbiddenSet,
}

impl ProverRound {
    fn from_prover(p: &Prover) -> Self {
        Self {
            outcome: p.outcome().cloned(),
            transcript: p.transcript().clone(),
            secrets: p.secrets(),
        }
    }
}

fn verifier_loop(
    v: &mut Verifier,
    t0: u64,
    mut send: impl FnMut(Outbound) -> Result<(), TransportError>,
    mut recv: impl FnMut() -> Result<ClassicalMessage, TransportError>,
) -> Result<(), TransportError> {
    for out in v.start(t0) {
        send(out)?;
    }
    while !v.is_done() {
        let msg = recv()?;
        for out in v.handle(msg) {
            send(out)?;
        }
    }
    Ok(())
}

fn prover_loop(
    p: &mut Prover,
    mut send: impl FnMut(ClassicalMessage) -> Result<(), TransportError>,
    mut recv_classical: impl FnMut() -> Result<ClassicalMessage, TransportError>,
    mut recv_light: impl FnMut() -> Result<Vec<EmittedSymbol>, TransportError>,
) -> Result<(), TransportError> {
    while !p.is_done() {
        let outs = if p.expects_light() {
            p.handle_light(recv_light()?)
        } else {
            p.handle(recv_classical()?)
        };
        for out in outs {
            if let Outbound::Classical(m) = out {
                send(m)?;
            }
        }
    }
    Ok(())
}

/// One round with each party on its own thread, over bounded in-memory queues.
pub fn run_round_threaded(
    cfg: &ProtocolConfig,
    parties: &Parties,
    id: RoundId,
) -> Result<(VerifierRound, ProverRound), TransportError> {
    let (to_prover, from_verifier): (SyncSender<Outbound>, Receiver<Outbound>) = sync_channel(QUEUE_DEPTH);
    let (to_verifier, from_prover) = sync_channel::<ClassicalMessage>(QUEUE_DEPTH);
    let mut v = new_verifier(cfg, parties, id);
    let mut p = new_prover(cfg, parties, id);
    let t0 = round_t0(cfg, id.round);
    let prover_side = &mut p;
    std::thread::scope(|s| {
        let prover = s.spawn(move || {
            let recv = || from_verifier.recv().map_err(|_| TransportError::Closed);
            prover_loop(
                prover_side,
                |m| to_verifier.send(m).map_err(|_| TransportError::Closed),
                || match recv()? {
                    Outbound::Classical(m) => Ok(m),
                    Outbound::Light(_) => Err(TransportError::Light("light while a frame was expected")),
                },
                || match recv()? {
                    Outbound::Light(l) => Ok(l),
                    Outbound::Classical(_) => Err(TransportError::Light("frame while light was expected")),
                },
            )
        });
        let verifier = verifier_loop(
            &mut v,
            t0,
            |o| to_prover.send(o).map_err(|_| TransportError::Closed),
            || from_prover.recv().map_err(|_| TransportError::Closed),
        );
        drop(to_prover);
        let prover = prover.join().expect("prover thread");
        verifier.and(prover)
    })?;
    Ok((VerifierRound::from_verifier(&v)?, ProverRound::from_prover(&p)))
}

fn configure(stream: &TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))
}

/// Accepts the two connections of one round: `(classical, quantum)`.
fn accept_pair(listener: &TcpListener) -> Result<(TcpStream, TcpStream), TransportError> {
    let (mut classical, mut quantum) = (None, None);
    while classical.is_none() || quantum.is_none() {
        let (mut stream, _) = listener.accept()?;
        configure(&stream)?;
        let mut tag = [0u8; 1];
        read_exact_or_closed(&mut stream, &mut tag)?;
        match tag[0] {
            CLASSICAL_TAG if classical.is_none() => classical = Some(stream),
            QUANTUM_TAG if quantum.is_none() => quantum = Some(stream),
            other => return Err(TransportError::Tag(other)),
        }
    }
    Ok((classical.expect("set"), quantum.expect("set")))
}

/// Verifier side of one round over TCP.
pub fn serve_round(listener: &TcpListener, verifier: &mut Verifier, t0: u64) -> Result<VerifierRound, TransportError> {
    let (mut classical, mut quantum) = accept_pair(listener)?;
    let mut reader = classical.try_clone()?;
    verifier_loop(
        verifier,
        t0,
        |o| {
            match o {
                Outbound::Classical(m) => write_message(&mut classical, &m)?,
                Outbound::Light(l) => write_light(&mut quantum, &l)?,
            }
            Ok(())
        },
        || read_message(&mut reader),
    )?;
    VerifierRound::from_verifier(verifier)
}

fn connect_retrying(addr: impl ToSocketAddrs + Copy) -> io::Result<TcpStream> {
    let mut last = None;
    for _ in 0..100 {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    Err(last.expect("at least one attempt"))
}

/// Prover side of one round over TCP.
pub fn connect_round(addr: impl ToSocketAddrs + Copy, prover: &mut Prover) -> Result<ProverRound, TransportError> {
    let mut classical = connect_retrying(addr)?;
    configure(&classical)?;
    classical.write_all(&[CLASSICAL_TAG])?;
    let mut quantum = connect_retrying(addr)?;
    configure(&quantum)?;
    quantum.write_all(&[QUANTUM_TAG])?;
    let mut reader = classical.try_clone()?;
    prover_loop(
        prover,
        |m| Ok(write_message(&mut classical, &m)?),
        || read_message(&mut reader),
        || read_light(&mut quantum),
    )?;
    Ok(ProverRound::from_prover(prover))
}

/// Serves `cfg.iterations` rounds, one connection pair each.
pub fn serve(
    listener: &TcpListener,
    cfg: &ProtocolConfig,
    parties: &Parties,
    seed: u64,
    version: u16,
) -> Result<Vec<VerifierRound>, TransportError> {
    (0..cfg.iterations as u32)
        .map(|round| {
            let id = RoundId { seed, row: 0, round };
            let mut v = new_verifier(cfg, parties, id).with_version(version);
            serve_round(listener, &mut v, round_t0(cfg, round))
        })
        .collect()
}

/// Proves `cfg.iterations` rounds against a serving verifier.
pub fn connect(
    addr: impl ToSocketAddrs + Copy,
    cfg: &ProtocolConfig,
    parties: &Parties,
    seed: u64,
    version: u16,
) -> Result<Vec<ProverRound>, TransportError> {
    (0..cfg.iterations as u32)
        .map(|round| {
            let id = RoundId { seed, row: 0, round };
            let mut p = new_prover(cfg, parties, id).with_version(version);
            connect_round(addr, &mut p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use qzkp_core::protocol::run_round;
    use qzkp_core::wire::{AbortReason, MessageKind, PROTOCOL_VERSION};

    fn cfg() -> ProtocolConfig {
        ProtocolConfig {
            block_len: 1024,
            target_sifted_len: 256,
            iterations: 3,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn frame_io_round_trip() {
        let msgs = [
            ClassicalMessage::Hello { version: 1, t0: 42 },
            ClassicalMessage::Detections { slots: vec![1, 4, 9] },
            ClassicalMessage::Abort(AbortReason::VersionMismatch),
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut r = buf.as_slice();
        for m in &msgs {
            assert_eq!(&read_message(&mut r).unwrap(), m);
        }
        assert!(matches!(read_message(&mut r), Err(TransportError::Closed)));
        let mut short = &buf[..7];
        assert!(matches!(read_message(&mut short), Err(TransportError::Closed)));
    }

    #[test]
    fn oversize_header_is_rejected_before_allocation() {
        let mut frame = vec![0x7f, 0xff, 0xff, 0xff, 0x01];
        frame.extend_from_slice(&[0; 16]);
        assert!(matches!(read_message(&mut frame.as_slice()), Err(TransportError::Decode(_))));
    }

    #[test]
    fn light_rejects_reserved_bits() {
        assert!(decode_light(&[0, 0, 0, 1, 0b1100]).is_err());
        assert!(decode_light(&[0, 0, 0, 2, 0]).is_err());
        assert!(decode_light(&[0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn light_round_trip(raw in proptest::collection::vec((any::<bool>(), any::<bool>(), 0u8..3), 0..300)) {
            let symbols: Vec<EmittedSymbol> = raw
                .iter()
                .enumerate()
                .map(|(i, &(bit, x, k))| decode_symbol(i as u32, bit as u8 | (x as u8) << 1 | k << 2).unwrap())
                .collect();
            let bytes = encode_light(&symbols);
            prop_assert_eq!(decode_light(&bytes).unwrap(), symbols.clone());
            prop_assert_eq!(read_light(&mut bytes.as_slice()).unwrap(), symbols);
        }
    }

    #[test]
    fn threaded_matches_in_process() {
        let parties = Parties::honest(b"k");
        for round in 0..3 {
            let id = RoundId { seed: 5, row: 0, round };
            let (v, p) = run_round_threaded(&cfg(), &parties, id).unwrap();
            let direct = run_round(&cfg(), &parties, id);
            assert_eq!(v.transcript.to_bytes(), direct.transcript.to_bytes());
            assert_eq!(v.result, direct.result);
            assert_eq!(p.transcript.to_bytes(), direct.transcript.to_bytes());
        }
    }

    #[test]
    fn tcp_matches_in_process() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let parties = Parties::honest(b"k");
        let client = std::thread::spawn({
            let parties = parties.clone();
            move || connect(addr, &cfg(), &parties, 11, PROTOCOL_VERSION).unwrap()
        });
        let served = serve(&listener, &cfg(), &parties, 11, PROTOCOL_VERSION).unwrap();
        let proved = client.join().unwrap();
        for (round, (v, p)) in served.iter().zip(&proved).enumerate() {
            let direct = run_round(&cfg(), &parties, RoundId { seed: 11, row: 0, round: round as u32 });
            assert_eq!(v.transcript.to_bytes(), direct.transcript.to_bytes());
            assert_eq!(p.transcript.to_bytes(), direct.transcript.to_bytes());
            assert_eq!(v.result, direct.result);
        }
    }

    #[test]
    fn tcp_version_mismatch_aborts() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let one = ProtocolConfig { iterations: 1, ..cfg() };
        let parties = Parties::honest(b"k");
        let client = std::thread::spawn({
            let (one, parties) = (one.clone(), parties.clone());
            move || connect(addr, &one, &parties, 1, PROTOCOL_VERSION + 1).unwrap()
        });
        let served = serve(&listener, &one, &parties, 1, PROTOCOL_VERSION).unwrap();
        let proved = client.join().unwrap();
        assert!(served[0].transcript.contains_kind(MessageKind::Abort));
        assert!(!served[0].result.accepted);
        assert!(matches!(proved[0].outcome, Some(ProverOutcome::Failed(_))));
    }
}
