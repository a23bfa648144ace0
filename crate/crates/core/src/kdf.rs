//! Two-step key derivation of the basis schedule `h1` and the OTP mask `h2`.
//!
//! Extract: `K_IN = HMAC-SHA256(key = t0 as 8 big-endian bytes, msg = s)`.
//!
//! Expand (counter mode): block `i` (starting at 1) is
//! `HMAC-SHA256(K_IN, [i] || label || 0x00 || context || out_bits as u32 BE)`;
//! the blocks are concatenated and truncated to `out_bits`.

use alloc::vec::Vec;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::bits::BitString;

type HmacSha256 = Hmac<Sha256>;

/// Label fed to every expand call.
pub const LABEL: &[u8] = b"QZKP-v1";

pub const PRK_LEN: usize = 32;

/// Largest output of a single expand call: 255 counter blocks of 256 bits.
pub const MAX_EXPAND_BITS: usize = 255 * PRK_LEN * 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KdfError {
    #[error("pre-shared secret is empty")]
    EmptySecret,
    #[error("handshake timestamp must be positive")]
    ZeroTimestamp,
    #[error("requested {0} output bits; expand needs 1..={MAX_EXPAND_BITS}")]
    OutputLength(usize),
    #[error("mask length n={n} must be smaller than schedule length m={m}")]
    Lengths { m: usize, n: usize },
}

/// Pre-shared secret plus the handshake timestamp used as salt.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretMaterial {
    secret: Vec<u8>,
    t0: u64,
}

impl SecretMaterial {
    pub fn new(secret: &[u8], t0: u64) -> Result<Self, KdfError> {
        if secret.is_empty() {
            return Err(KdfError::EmptySecret);
        }
        if t0 == 0 {
            return Err(KdfError::ZeroTimestamp);
        }
        Ok(Self {
            secret: secret.to_vec(),
            t0,
        })
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }
}

impl core::fmt::Debug for SecretMaterial {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SecretMaterial")
            .field("secret", &"<redacted>")
            .field("t0", &self.t0)
            .finish()
    }
}

/// Pseudorandom key produced by [`extract`].
#[derive(Clone, PartialEq, Eq)]
pub struct Prk([u8; PRK_LEN]);

impl Prk {
    pub fn as_bytes(&self) -> &[u8; PRK_LEN] {
        &self.0
    }
}

impl core::fmt::Debug for Prk {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("Prk(<redacted>)")
    }
}

fn hmac(key: &[u8]) -> HmacSha256 {
    HmacSha256::new_from_slice(key).expect("HMAC accepts keys of any length")
}

pub fn extract(secret: &SecretMaterial) -> Prk {
    let mut mac = hmac(&secret.t0.to_be_bytes());
    mac.update(&secret.secret);
    Prk(mac.finalize().into_bytes().into())
}

pub fn expand(
    prk: &Prk,
    label: &[u8],
    context: &[u8],
    out_bits: usize,
) -> Result<BitString, KdfError> {
    if out_bits == 0 || out_bits > MAX_EXPAND_BITS {
        return Err(KdfError::OutputLength(out_bits));
    }
    let length = (out_bits as u32).to_be_bytes();
    let blocks = out_bits.div_ceil(PRK_LEN * 8);
    let mut okm = Vec::with_capacity(blocks * PRK_LEN);
    for counter in 1..=blocks {
        let mut mac = hmac(&prk.0);
        mac.update(&[counter as u8]);
        mac.update(label);
        mac.update(&[0x00]);
        mac.update(context);
        mac.update(&length);
        okm.extend_from_slice(&mac.finalize().into_bytes());
    }
    Ok(BitString::from_bytes_truncated(&okm, out_bits).expect("okm covers out_bits"))
}

/// The secret-derived strings for one session: `h1` (m bits) fixes the
/// preparation/measurement basis of every pulse in the first block, `h2`
/// (n bits) masks the error-estimation fragment.
#[derive(Clone, PartialEq, Eq)]
pub struct DerivedKeys {
    pub h1: BitString,
    pub h2: BitString,
}

impl DerivedKeys {
    pub fn m(&self) -> usize {
        self.h1.len()
    }

    pub fn n(&self) -> usize {
        self.h2.len()
    }
}

impl core::fmt::Debug for DerivedKeys {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("DerivedKeys")
            .field("m", &self.m())
            .field("n", &self.n())
            .finish_non_exhaustive()
    }
}

/// Context bytes binding the derivation to both parties.
pub fn session_context(verifier_id: &[u8], prover_id: &[u8]) -> Vec<u8> {
    let mut ctx = Vec::with_capacity(verifier_id.len() + prover_id.len());
    ctx.extend_from_slice(verifier_id);
    ctx.extend_from_slice(prover_id);
    ctx
}

/// One expand call of `m + n` bits split into `h1 = [0, m)` and `h2 = [m, m+n)`.
pub fn derive_session_keys_with_prk(
    prk: &Prk,
    context: &[u8],
    m: usize,
    n: usize,
) -> Result<DerivedKeys, KdfError> {
    if n >= m {
        return Err(KdfError::Lengths { m, n });
    }
    let okm = expand(prk, LABEL, context, m + n)?;
    Ok(DerivedKeys {
        h1: okm.slice(0, m).expect("in range"),
        h2: okm.slice(m, m + n).expect("in range"),
    })
}

pub fn derive_session_keys(
    secret: &SecretMaterial,
    context: &[u8],
    m: usize,
    n: usize,
) -> Result<DerivedKeys, KdfError> {
    derive_session_keys_with_prk(&extract(secret), context, m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn material(s: &str, t0: u64) -> SecretMaterial {
        SecretMaterial::new(s.as_bytes(), t0).unwrap()
    }

    #[test]
    fn rejects_bad_material() {
        assert_eq!(SecretMaterial::new(b"", 5), Err(KdfError::EmptySecret));
        assert_eq!(SecretMaterial::new(b"s", 0), Err(KdfError::ZeroTimestamp));
    }

    #[test]
    fn expand_bounds() {
        let prk = extract(&material("secret-A", 1));
        assert_eq!(
            expand(&prk, LABEL, b"", 0),
            Err(KdfError::OutputLength(0))
        );
        assert!(expand(&prk, LABEL, b"", MAX_EXPAND_BITS).is_ok());
        assert_eq!(
            expand(&prk, LABEL, b"", MAX_EXPAND_BITS + 1),
            Err(KdfError::OutputLength(MAX_EXPAND_BITS + 1))
        );
    }

    #[test]
    fn single_bit_output_is_stable() {
        let prk = extract(&material("secret-A", 1_700_000_000_000));
        let a = expand(&prk, LABEL, b"ctx", 1).unwrap();
        let b = expand(&prk, LABEL, b"ctx", 1).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn split_is_consistent_with_one_expand() {
        let secret = material("secret-A", 1_700_000_000_000);
        let keys = derive_session_keys(&secret, b"vp", 2048, 307).unwrap();
        let okm = expand(&extract(&secret), LABEL, b"vp", 2048 + 307).unwrap();
        assert_eq!(keys.h1, okm.slice(0, 2048).unwrap());
        assert_eq!(keys.h2, okm.slice(2048, 2355).unwrap());
        assert_eq!((keys.m(), keys.n()), (2048, 307));
    }

    #[test]
    fn n_must_be_below_m() {
        let secret = material("secret-A", 9);
        assert_eq!(
            derive_session_keys(&secret, b"", 10, 10),
            Err(KdfError::Lengths { m: 10, n: 10 })
        );
    }
}
