//! Protocol engine for an interactive quantum zero-knowledge authentication
//! proof over a simulated BB84-style polarization link.
//!
//! A verifier and a prover holding a pre-shared secret derive a basis
//! schedule and a one-time-pad mask from it, exchange weak coherent pulses
//! prepared and measured in the secret-derived bases, and compare an
//! OTP-masked fragment of the sifted strings. The proof is accepted when the
//! estimated quantum bit error rate stays under a threshold.
//!
//! The crate is `no_std` (with `alloc`). Everything that touches sockets,
//! threads, files or the command line lives in the `qzkp` companion crate.
//!
//! Module map:
//!
//! - [`bits`], [`rng`]: bit strings and deterministic random streams
//! - [`kdf`]: extract-then-expand key derivation of the basis schedule and mask
//! - [`photonics`]: loss, extinction ratio, dark counts and decoy intensities
//! - [`protocol`]: verifier/prover state machines and the in-process round driver
//! - [`adversary`]: dishonest prover and verifier strategies
//! - [`analysis`]: closed-form QBER formulas, statistics and sweep rows
//! - [`wire`]: classical frame codec, transcripts and leakage audits

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adversary;
pub mod analysis;
pub mod bits;
pub mod kdf;
pub mod photonics;
pub mod protocol;
pub mod rng;
pub mod wire;

pub use bits::{BitError, BitString};
pub use rng::RngStream;
