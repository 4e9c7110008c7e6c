//! Primality testing and deterministic prime walks used by key generation
//! and parameter selection.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const SMALL_PRIMES: [u32; 30] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113,
];

/// Miller-Rabin primality test. Deterministic for 64-bit inputs (fixed base
/// set), 40 pseudorandom rounds beyond that.
pub fn is_prime(n: &BigUint) -> bool {
    if n < &BigUint::from(2u32) {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if n.is_multiple_of(&p) {
            return false;
        }
    }
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;

    let witness = |a: &BigUint| -> bool {
        // returns true when `a` witnesses compositeness
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            return false;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                return false;
            }
        }
        true
    };

    if n.bits() <= 64 {
        // deterministic base set for the 64-bit range
        for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
            let a = BigUint::from(a);
            if &a >= n {
                continue;
            }
            if witness(&a) {
                return false;
            }
        }
        return true;
    }

    let mut rng = ChaCha20Rng::seed_from_u64(0x6d70_636e_6e5f_7072);
    for _ in 0..40 {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        if witness(&a) {
            return false;
        }
    }
    true
}

/// Smallest prime >= start (walks upward, skipping evens).
pub fn next_prime(start: &BigUint) -> BigUint {
    let mut candidate = start.clone();
    if candidate <= BigUint::from(2u32) {
        return BigUint::from(2u32);
    }
    if candidate.is_even() {
        candidate += 1u32;
    }
    loop {
        if is_prime(&candidate) {
            return candidate;
        }
        candidate += 2u32;
    }
}

/// Deterministic prime of exactly `bits` bits derived from a seeded walk:
/// draw a `bits`-bit odd starting point from the seed, then walk to the next
/// prime (re-drawing if the walk escapes the bit range).
pub fn derive_prime(bits: u64, rng: &mut ChaCha20Rng) -> BigUint {
    assert!(bits >= 2);
    loop {
        let mut start = rng.gen_biguint(bits);
        start.set_bit(bits - 1, true); // force exact bit length
        start.set_bit(0, true);
        let p = next_prime(&start);
        if p.bits() == bits {
            return p;
        }
    }
}

/// Distinct primes (p, q) of `bits` bits each, deterministic in the seed.
pub fn derive_prime_pair(bits: u64, rng: &mut ChaCha20Rng) -> (BigUint, BigUint) {
    let p = derive_prime(bits, rng);
    loop {
        let q = derive_prime(bits, rng);
        if q != p {
            return (p, q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifies_small_numbers() {
        let primes: Vec<u64> = (2..200).filter(|&n| is_prime(&BigUint::from(n))).collect();
        // independent sieve oracle
        let mut sieve = vec![true; 200];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..200 {
            if sieve[i] {
                let mut j = i * i;
                while j < 200 {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        let expected: Vec<u64> = (2..200u64).filter(|&n| sieve[n as usize]).collect();
        assert_eq!(primes, expected);
    }

    #[test]
    fn known_large_factorizations() {
        // 2^31 - 1 is prime; 2^32 + 1 = 641 * 6700417 is not.
        assert!(is_prime(&BigUint::from(2147483647u64)));
        assert!(!is_prime(&BigUint::from(4294967297u64)));
    }

    #[test]
    fn next_prime_walk() {
        assert_eq!(next_prime(&BigUint::from(35u32)), BigUint::from(37u32));
        assert_eq!(next_prime(&BigUint::from(90u32)), BigUint::from(97u32));
    }

    #[test]
    fn derived_primes_have_exact_bits_and_are_deterministic() {
        let mut r1 = ChaCha20Rng::seed_from_u64(42);
        let mut r2 = ChaCha20Rng::seed_from_u64(42);
        let (p1, q1) = derive_prime_pair(9, &mut r1);
        let (p2, q2) = derive_prime_pair(9, &mut r2);
        assert_eq!((p1.clone(), q1.clone()), (p2, q2));
        assert_eq!(p1.bits(), 9);
        assert_eq!(q1.bits(), 9);
        assert!(is_prime(&p1) && is_prime(&q1));
        assert_ne!(p1, q1);
    }
}
