use qzkp_core::kdf::{self, derive_session_keys, SecretMaterial, LABEL};
use qzkp_core::BitString;

fn hex(s: &str) -> Vec<u8> {
    if s == "-" {
        return Vec::new();
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

#[test]
fn frozen_vectors() {
    let text = include_str!("fixtures/kdf_vectors.txt");
    let mut count = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (m, n): (usize, usize) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        let secret = SecretMaterial::new(&hex(f[0]), f[1].parse().unwrap()).unwrap();
        let ctx = kdf::session_context(&hex(f[4]), &hex(f[5]));
        let keys = derive_session_keys(&secret, &ctx, m, n).unwrap();
        assert_eq!(keys.h1, BitString::from_bytes(&hex(f[6]), m).unwrap(), "h1 of {line}");
        assert_eq!(keys.h2, BitString::from_bytes(&hex(f[7]), n).unwrap(), "h2 of {line}");
        count += 1;
    }
    assert_eq!(count, 9);
}

#[test]
fn deterministic_and_salted() {
    let ctx = kdf::session_context(b"verifier", b"prover");
    let a = derive_session_keys(&SecretMaterial::new(b"secret-A", 1_700_000_000_000).unwrap(), &ctx, 2048, 307).unwrap();
    let b = derive_session_keys(&SecretMaterial::new(b"secret-A", 1_700_000_000_000).unwrap(), &ctx, 2048, 307).unwrap();
    let c = derive_session_keys(&SecretMaterial::new(b"secret-A", 1_700_000_000_001).unwrap(), &ctx, 2048, 307).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.h1, c.h1);
    assert_ne!(a.h2, c.h2);
}

#[test]
fn context_binds_identities() {
    let s = SecretMaterial::new(b"secret-A", 7).unwrap();
    let a = derive_session_keys(&s, &kdf::session_context(b"verifier", b"prover"), 256, 38).unwrap();
    let b = derive_session_keys(&s, &kdf::session_context(b"verifier", b"other"), 256, 38).unwrap();
    assert_ne!(a.h1, b.h1);
}

#[test]
fn secret_bit_flips_avalanche() {
    // flipping any one secret bit changes about half of h1
    let base = b"a fixed pre-shared secret".to_vec();
    let prk = kdf::extract(&SecretMaterial::new(&base, 99).unwrap());
    let h = kdf::expand(&prk, LABEL, b"ctx", 2048).unwrap();
    let mut fractions = Vec::new();
    for bit in 0..base.len() * 8 {
        let mut s = base.clone();
        s[bit / 8] ^= 0x80 >> (bit % 8);
        let prk2 = kdf::extract(&SecretMaterial::new(&s, 99).unwrap());
        let h2 = kdf::expand(&prk2, LABEL, b"ctx", 2048).unwrap();
        fractions.push(h.hamming_distance(&h2).unwrap() as f64 / 2048.0);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let sigma = (0.25 / (2048.0 * fractions.len() as f64)).sqrt();
    assert!((mean - 0.5).abs() < 4.0 * sigma, "mean {mean}");
    assert!(fractions.iter().all(|f| (f - 0.5).abs() < 0.1));
}

#[test]
fn schedule_and_mask_are_uncorrelated() {
    let ctx = kdf::session_context(b"verifier", b"prover");
    let (mut agree, mut ones, mut total) = (0usize, 0usize, 0usize);
    for t0 in 1..=400u64 {
        let k = derive_session_keys(&SecretMaterial::new(b"secret-A", t0).unwrap(), &ctx, 2048, 307).unwrap();
        let prefix = k.h1.slice(0, 307).unwrap();
        agree += 307 - prefix.hamming_distance(&k.h2).unwrap();
        ones += k.h1.count_ones() + k.h2.count_ones();
        total += 307;
    }
    let sigma = (0.25 / total as f64).sqrt();
    assert!((agree as f64 / total as f64 - 0.5).abs() < 4.0 * sigma);
    let bits = 400.0 * (2048.0 + 307.0);
    assert!((ones as f64 / bits - 0.5).abs() < 4.0 * (0.25 / bits).sqrt());
}
