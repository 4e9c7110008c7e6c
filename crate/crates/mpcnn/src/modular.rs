//! Residue arithmetic helpers shared by every protocol layer.
//!
//! All secret-shared values are kept as canonical residues in `[0, t)`.
//! Signed quantities use the centered lift: residues above `t/2` represent
//! negatives.

use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

/// A shared modulus handle. Cloning is a pointer copy, so shares can carry
/// their modulus without duplicating big integers.
#[derive(Clone)]
pub struct Modulus(Arc<ModulusInner>);

pub struct ModulusInner {
    value: BigUint,
    half: BigUint,
    bits: u64,
}

impl Modulus {
    pub fn new(value: BigUint) -> Self {
        assert!(value > BigUint::one(), "modulus must exceed 1");
        let half = &value >> 1;
        let bits = value.bits();
        Modulus(Arc::new(ModulusInner { value, half, bits }))
    }

    pub fn from_u64(v: u64) -> Self {
        Self::new(BigUint::from(v))
    }

    pub fn value(&self) -> &BigUint {
        &self.0.value
    }

    /// Bit length of the modulus.
    pub fn bits(&self) -> u64 {
        self.0.bits
    }

    pub fn same(&self, other: &Modulus) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0.value == other.0.value
    }

    /// Canonical residue of an arbitrary signed integer.
    pub fn reduce_int(&self, v: &BigInt) -> BigUint {
        let m = BigInt::from(self.0.value.clone());
        let r = v.mod_floor(&m);
        r.to_biguint().expect("mod_floor yields non-negative")
    }

    pub fn reduce(&self, v: &BigUint) -> BigUint {
        v % &self.0.value
    }

    pub fn add(&self, a: &BigUint, b: &BigUint) -> BigUint {
        let mut s = a + b;
        if s >= self.0.value {
            s -= &self.0.value;
        }
        s
    }

    pub fn sub(&self, a: &BigUint, b: &BigUint) -> BigUint {
        if a >= b {
            a - b
        } else {
            a + &self.0.value - b
        }
    }

    pub fn neg(&self, a: &BigUint) -> BigUint {
        if a.is_zero() {
            BigUint::zero()
        } else {
            &self.0.value - a
        }
    }

    pub fn mul(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.0.value
    }

    pub fn pow(&self, a: &BigUint, e: &BigUint) -> BigUint {
        a.modpow(e, &self.0.value)
    }

    /// Modular inverse; `None` when gcd(a, t) != 1.
    pub fn inv(&self, a: &BigUint) -> Option<BigUint> {
        let a = BigInt::from(a.clone());
        let m = BigInt::from(self.0.value.clone());
        let ext = a.extended_gcd(&m);
        if !ext.gcd.is_one() {
            return None;
        }
        let inv = ext.x.mod_floor(&m);
        Some(inv.to_biguint().unwrap())
    }

    /// Centered lift: map a residue to the signed representative in
    /// `(-t/2, t/2]`.
    pub fn lift_signed(&self, a: &BigUint) -> BigInt {
        if a > &self.0.half {
            BigInt::from(a.clone()) - BigInt::from(self.0.value.clone())
        } else {
            BigInt::from(a.clone())
        }
    }

    /// Uniform residue drawn from the supplied generator.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        rng.gen_biguint_below(&self.0.value)
    }

    /// Uniform invertible residue (rejection sampling).
    pub fn sample_invertible<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let v = self.sample(rng);
            if !v.is_zero() && self.inv(&v).is_some() {
                return v;
            }
        }
    }
}

impl Deref for Modulus {
    type Target = BigUint;
    fn deref(&self) -> &BigUint {
        &self.0.value
    }
}

impl PartialEq for Modulus {
    fn eq(&self, other: &Self) -> bool {
        self.same(other)
    }
}
impl Eq for Modulus {}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Modulus({})", self.0.value)
    }
}

/// Additively split `value` into `n` residues summing to it mod `t`.
pub fn split_additive<R: Rng + ?Sized>(
    t: &Modulus,
    value: &BigUint,
    n: usize,
    rng: &mut R,
) -> Vec<BigUint> {
    assert!(n >= 1);
    let mut shares = Vec::with_capacity(n);
    let mut acc = BigUint::zero();
    for _ in 0..n - 1 {
        let s = t.sample(rng);
        acc = t.add(&acc, &s);
        shares.push(s);
    }
    shares.push(t.sub(value, &acc));
    shares
}

/// Sum a slice of residues mod `t`.
pub fn sum_mod(t: &Modulus, vals: &[BigUint]) -> BigUint {
    let mut acc = BigUint::zero();
    for v in vals {
        acc = t.add(&acc, &t.reduce(v));
    }
    acc
}

/// `2^k` as a big integer.
pub fn pow2(k: u64) -> BigUint {
    BigUint::one() << k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sub_wraps_into_range() {
        let t = Modulus::from_u64(35);
        assert_eq!(t.sub(&3u32.into(), &5u32.into()), 33u32.into());
        assert_eq!(t.add(&30u32.into(), &10u32.into()), 5u32.into());
    }

    #[test]
    fn centered_lift_splits_at_half() {
        let t = Modulus::from_u64(11);
        assert_eq!(t.lift_signed(&5u32.into()), BigInt::from(5));
        assert_eq!(t.lift_signed(&6u32.into()), BigInt::from(-5));
        assert_eq!(t.lift_signed(&10u32.into()), BigInt::from(-1));
    }

    #[test]
    fn inverse_exists_iff_coprime() {
        let t = Modulus::from_u64(35);
        assert!(t.inv(&5u32.into()).is_none());
        assert!(t.inv(&7u32.into()).is_none());
        let i = t.inv(&2u32.into()).unwrap();
        assert_eq!(t.mul(&i, &2u32.into()), BigUint::one());
    }

    #[test]
    fn additive_split_reconstructs() {
        let t = Modulus::from_u64(35);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for v in 0u64..35 {
            let shares = split_additive(&t, &v.into(), 3, &mut rng);
            assert_eq!(sum_mod(&t, &shares), v.into());
        }
    }

    #[test]
    fn reduce_int_handles_negatives() {
        let t = Modulus::from_u64(35);
        assert_eq!(t.reduce_int(&BigInt::from(-1)), 34u32.into());
        assert_eq!(t.reduce_int(&BigInt::from(-36)), 34u32.into());
        assert_eq!(t.reduce_int(&BigInt::from(70)), BigUint::zero());
    }
}
