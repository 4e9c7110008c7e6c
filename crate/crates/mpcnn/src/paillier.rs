//! Threshold Paillier with a trusted-dealer key ceremony.
//!
//! Ciphertexts live in ℤ_{N²} with generator g = N+1, so Enc(m, r) =
//! (1 + mN) · r^N mod N². Decryption is shared: the dealer splits an exponent
//! d with d ≡ 0 (mod λ) and d ≡ 1 (mod N) additively over ℤ_{Nλ}; each party
//! broadcasts c^{d_i} and the product is (1 + mN), checked to be ≡ 1 mod N
//! before m is read off. No party subset smaller than n learns anything about
//! the factorization.

use crate::engine::PartyCtx;
use crate::modular::Modulus;
use crate::primes::derive_prime_pair;
use crate::wire::FrameKind;
use crate::{Error, Result};
use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct PaillierPublicKey {
    /// Plaintext modulus N.
    pub n: Modulus,
    /// Ciphertext modulus N².
    pub nn: Modulus,
}

impl PaillierPublicKey {
    pub fn from_modulus(n_value: BigUint) -> Self {
        let nn = Modulus::new(&n_value * &n_value);
        PaillierPublicKey { n: Modulus::new(n_value), nn }
    }

    /// The fixed generator N + 1.
    pub fn g(&self) -> BigUint {
        self.n.value() + BigUint::one()
    }

    /// Encrypt `m` with explicit randomness `r` (must be a unit mod N).
    pub fn encrypt_with(&self, m: &BigUint, r: &BigUint) -> BigUint {
        let m = self.n.reduce(m);
        // (N+1)^m = 1 + mN (mod N²)
        let gm = self.nn.reduce(&(BigUint::one() + m * self.n.value()));
        let rn = self.nn.pow(r, self.n.value());
        self.nn.mul(&gm, &rn)
    }

    pub fn encrypt<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> BigUint {
        let r = self.n.sample_invertible(rng);
        self.encrypt_with(m, &r)
    }

    /// Homomorphic addition of plaintexts.
    pub fn padd(&self, c1: &BigUint, c2: &BigUint) -> BigUint {
        self.nn.mul(c1, c2)
    }

    /// Homomorphic multiplication by a public scalar.
    pub fn pmult(&self, c: &BigUint, k: &BigUint) -> BigUint {
        self.nn.pow(c, k)
    }

    /// Homomorphic negation.
    pub fn pinv(&self, c: &BigUint) -> BigUint {
        self.nn.inv(c).expect("ciphertext is a unit")
    }

    pub fn psub(&self, c1: &BigUint, c2: &BigUint) -> BigUint {
        self.padd(c1, &self.pinv(c2))
    }
}

/// One party's share of the decryption exponent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaillierDecShare {
    pub party: usize,
    pub d_i: BigUint,
}

/// Full key material for one party as written to disk.
#[derive(Clone, Debug)]
pub struct PartyKeyFile {
    pub pk: PaillierPublicKey,
    pub share: PaillierDecShare,
}

/// Additively split `d` over ℤ_{nλ}.
pub fn deal_exponent_shares(
    d: &BigUint,
    n_lambda: &BigUint,
    parties: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<BigUint> {
    let m = Modulus::new(n_lambda.clone());
    crate::modular::split_additive(&m, d, parties, rng)
}

/// Trusted-dealer key ceremony: derives p, q deterministically from the seed,
/// requires gcd(N, λ) = 1, and deals the decryption exponent.
pub fn keygen_dealer(
    modulus_bits: u64,
    parties: usize,
    seed: u64,
) -> Result<(PaillierPublicKey, Vec<PaillierDecShare>)> {
    if modulus_bits < 4 {
        return Err(Error::Params("modulus too small".into()));
    }
    let prime_bits = modulus_bits.div_ceil(2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, lambda) = loop {
        let (p, q) = derive_prime_pair(prime_bits, &mut rng);
        let n = &p * &q;
        let lambda = (&p - 1u32) * (&q - 1u32);
        if n.gcd(&lambda).is_one() {
            break (n, lambda);
        }
    };
    let pk = PaillierPublicKey::from_modulus(n.clone());

    // d ≡ 0 (mod λ), d ≡ 1 (mod N): d = λ · (λ⁻¹ mod N)
    let n_mod = Modulus::new(n.clone());
    let lambda_inv = n_mod
        .inv(&(&lambda % &n))
        .ok_or_else(|| Error::Params("lambda not invertible mod N".into()))?;
    let d = &lambda * &lambda_inv;
    let n_lambda = &n * &lambda;
    debug_assert!((&d % &lambda).is_zero() && (&d % &n).is_one());

    let shares = deal_exponent_shares(&d, &n_lambda, parties, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(party, d_i)| PaillierDecShare { party, d_i })
        .collect();
    Ok((pk, shares))
}

/// This party's decryption contribution c^{d_i} mod N².
pub fn decrypt_share(pk: &PaillierPublicKey, share: &PaillierDecShare, c: &BigUint) -> BigUint {
    pk.nn.pow(c, &share.d_i)
}

/// Combine all contributions. The product must be 1 + mN; anything else fails
/// the validity check.
pub fn combine_decryption(pk: &PaillierPublicKey, contribs: &[BigUint]) -> Result<BigUint> {
    let mut v = BigUint::one();
    for s in contribs {
        v = pk.nn.mul(&v, s);
    }
    if !(&v % pk.n.value()).is_one() {
        return Err(Error::DecryptionCheckFailed);
    }
    Ok((v - BigUint::one()) / pk.n.value())
}

/// One broadcast round: every party contributes c^{d_i}, everyone combines.
pub fn joint_decrypt(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    share: &PaillierDecShare,
    c: &BigUint,
) -> Result<BigUint> {
    let out = joint_decrypt_many(ctx, pk, share, std::slice::from_ref(c))?;
    Ok(out.into_iter().next().unwrap())
}

/// Batched joint decryption (one round for any number of ciphertexts).
pub fn joint_decrypt_many(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    share: &PaillierDecShare,
    cs: &[BigUint],
) -> Result<Vec<BigUint>> {
    let mine: Vec<BigUint> = cs.iter().map(|c| decrypt_share(pk, share, c)).collect();
    let all = ctx.exchange(FrameKind::DecShare, "decrypt", mine)?;
    let mut out = Vec::with_capacity(cs.len());
    for k in 0..cs.len() {
        let contribs: Vec<BigUint> = all
            .iter()
            .map(|batch| {
                batch
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Codec("short decryption batch".into()))
            })
            .collect::<Result<_>>()?;
        out.push(combine_decryption(pk, &contribs)?);
    }
    Ok(out)
}

// ---- key files ------------------------------------------------------------
// `[4-byte entry count][entries: 4-byte length + magnitude]`, fields in order
// (N, g, party index, d_i).

pub fn write_key_file(path: &Path, key: &PartyKeyFile) -> Result<()> {
    let ints = vec![
        key.pk.n.value().clone(),
        key.pk.g(),
        BigUint::from(key.share.party),
        key.share.d_i.clone(),
    ];
    let mut f = std::fs::File::create(path)?;
    f.write_all(&crate::wire::encode_ints(&ints))?;
    Ok(())
}

pub fn read_key_file(path: &Path) -> Result<PartyKeyFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ints = crate::wire::decode_ints(&bytes)?;
    if ints.len() != 4 {
        return Err(Error::Codec(format!("key file with {} fields", ints.len())));
    }
    let pk = PaillierPublicKey::from_modulus(ints[0].clone());
    if ints[1] != pk.g() {
        return Err(Error::Codec("key file generator is not N+1".into()));
    }
    let party = u64::try_from(&ints[2])
        .map_err(|_| Error::Codec("oversized party index".into()))? as usize;
    Ok(PartyKeyFile { pk, share: PaillierDecShare { party, d_i: ints[3].clone() } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_simulated, unwrap_all};

    fn toy_key() -> (PaillierPublicKey, Vec<PaillierDecShare>) {
        // N = 35: λ = 24, d = λ·(λ⁻¹ mod N) = 456
        let pk = PaillierPublicKey::from_modulus(BigUint::from(35u32));
        let d = BigUint::from(456u32);
        let n_lambda = BigUint::from(35u32 * 24);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let shares = deal_exponent_shares(&d, &n_lambda, 3, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(party, d_i)| PaillierDecShare { party, d_i })
            .collect();
        (pk, shares)
    }

    fn local_decrypt(pk: &PaillierPublicKey, shares: &[PaillierDecShare], c: &BigUint) -> Result<BigUint> {
        let contribs: Vec<BigUint> = shares.iter().map(|s| decrypt_share(pk, s, c)).collect();
        combine_decryption(pk, &contribs)
    }

    #[test]
    fn worked_encryption_example() {
        // m = 4, r = 2 under N = 35 must equal 36^4 · 2^35 mod 1225
        let pk = PaillierPublicKey::from_modulus(BigUint::from(35u32));
        let c = pk.encrypt_with(&BigUint::from(4u32), &BigUint::from(2u32));
        let nn = Modulus::from_u64(1225);
        let oracle = nn.mul(
            &nn.pow(&BigUint::from(36u32), &BigUint::from(4u32)),
            &nn.pow(&BigUint::from(2u32), &BigUint::from(35u32)),
        );
        assert_eq!(c, oracle);
    }

    #[test]
    fn exhaustive_roundtrip_toy_modulus() {
        let (pk, shares) = toy_key();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for m in 0u32..35 {
            let c = pk.encrypt(&BigUint::from(m), &mut rng);
            assert_eq!(local_decrypt(&pk, &shares, &c).unwrap(), BigUint::from(m));
        }
    }

    #[test]
    fn homomorphic_laws() {
        let (pk, shares) = toy_key();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for (a, b, k) in [(3u32, 4u32, 2u32), (20, 30, 6), (34, 1, 34), (17, 17, 0)] {
            let ca = pk.encrypt(&a.into(), &mut rng);
            let cb = pk.encrypt(&b.into(), &mut rng);
            let sum = local_decrypt(&pk, &shares, &pk.padd(&ca, &cb)).unwrap();
            assert_eq!(sum, BigUint::from((a + b) % 35));
            let prod = local_decrypt(&pk, &shares, &pk.pmult(&ca, &k.into())).unwrap();
            assert_eq!(prod, BigUint::from((a * k) % 35));
            let diff = local_decrypt(&pk, &shares, &pk.psub(&ca, &cb)).unwrap();
            assert_eq!(diff, BigUint::from((35 + a - b) % 35));
        }
    }

    #[test]
    fn tampered_contribution_fails_validity() {
        let (pk, shares) = toy_key();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = pk.encrypt(&BigUint::from(7u32), &mut rng);
        let mut contribs: Vec<BigUint> =
            shares.iter().map(|s| decrypt_share(&pk, s, &c)).collect();
        contribs[1] = pk.nn.mul(&contribs[1], &BigUint::from(2u32)); // skews v by 2 ≢ 1 mod N
        assert!(matches!(
            combine_decryption(&pk, &contribs),
            Err(Error::DecryptionCheckFailed)
        ));
    }

    #[test]
    fn keygen_is_deterministic_with_sound_parameters() {
        let (pk1, sh1) = keygen_dealer(16, 2, 77).unwrap();
        let (pk2, sh2) = keygen_dealer(16, 2, 77).unwrap();
        assert_eq!(pk1.n.value(), pk2.n.value());
        assert_eq!(sh1, sh2);
        let (pk3, _) = keygen_dealer(16, 2, 78).unwrap();
        assert_ne!(pk1.n.value(), pk3.n.value());
        // primes of half the modulus bits, distinct, correct product
        assert!(pk1.n.value().bits() <= 16);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let m = BigUint::from(123u32) % pk1.n.value();
        let c = pk1.encrypt(&m, &mut rng);
        let contribs: Vec<BigUint> =
            sh1.iter().map(|s| decrypt_share(&pk1, s, &c)).collect();
        assert_eq!(combine_decryption(&pk1, &contribs).unwrap(), m);
    }

    #[test]
    fn exponent_share_distribution_is_unbiased() {
        // first-party share uniform over ℤ_{Nλ}; check mod 8 (8 | 840)
        let d = BigUint::from(456u32);
        let n_lambda = BigUint::from(840u32);
        let mut buckets = [0u64; 8];
        for seed in 0..2000u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let shares = deal_exponent_shares(&d, &n_lambda, 3, &mut rng);
            let b = (&shares[0] % 8u32).to_u64_digits();
            let idx = if b.is_empty() { 0 } else { b[0] as usize };
            buckets[idx] += 1;
        }
        let expected = 2000.0 / 8.0;
        let chi2: f64 = buckets
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 7 degrees of freedom; 99.9th percentile ≈ 24.3
        assert!(chi2 < 24.3, "chi2 = {chi2}, buckets {buckets:?}");
    }

    #[test]
    fn key_files_roundtrip_and_jointly_decrypt() {
        let dir = std::env::temp_dir().join(format!("mpcnn-keys-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (pk, shares) = keygen_dealer(24, 3, 11).unwrap();
        let mut paths = Vec::new();
        for s in &shares {
            let path = dir.join(format!("party{}.key", s.party));
            write_key_file(&path, &PartyKeyFile { pk: pk.clone(), share: s.clone() }).unwrap();
            paths.push(path);
        }
        let loaded: Vec<PartyKeyFile> =
            paths.iter().map(|p| read_key_file(p).unwrap()).collect();
        assert_eq!(loaded[2].share.d_i, shares[2].d_i);

        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let m = BigUint::from(1000u32) % pk.n.value();
        let c = pk.encrypt(&m, &mut rng);
        let contribs: Vec<BigUint> = loaded
            .iter()
            .map(|k| decrypt_share(&k.pk, &k.share, &c))
            .collect();
        assert_eq!(combine_decryption(&pk, &contribs).unwrap(), m);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn joint_decrypt_over_transport() {
        let (pk, shares) = toy_key();
        let outcomes = run_simulated(3, 21, 8, |_| {}, move |ctx| {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            let c = pk.encrypt(&BigUint::from(19u32), &mut rng);
            joint_decrypt(ctx, &pk, &shares[ctx.index], &c)
        });
        let (values, counters) = unwrap_all(outcomes);
        for v in values {
            assert_eq!(v, BigUint::from(19u32));
        }
        for c in counters {
            assert_eq!(c.total_rounds, 1);
        }
    }
}
