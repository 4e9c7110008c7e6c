//! Additive secret sharing with SPDZ-style authentication.
//!
//! A value x over ℤ_t is held as shares x_i with x = Σ x_i mod t. Linear
//! operations are local; public constants are absorbed by party 0 while every
//! party adjusts its MAC share by α_i·c. Openings broadcast value shares only;
//! MAC shares stay private and are validated in deferred batches: a public
//! random linear combination ρ is drawn, each party commits to
//! σ_i = Σ_j ρ_j·(m_ij − α_i·v_j), and the commitments must reveal shares of
//! zero. Multiplication consumes one Beaver triple per product and is a single
//! round for any batch size.

use crate::engine::PartyCtx;
use crate::modular::Modulus;
use crate::paillier::{joint_decrypt_many, PaillierDecShare, PaillierPublicKey};
use crate::store::TripleRec;
use crate::wire::FrameKind;
use crate::{Error, Result};
use num_bigint::BigUint;
use num_traits::Zero;

/// One party's additive share of a value mod t.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Share {
    /// Index of the party holding this share.
    pub owner: usize,
    pub value: BigUint,
    pub modulus: Modulus,
}

impl Share {
    pub fn new(owner: usize, value: BigUint, t: &Modulus) -> Self {
        Share { owner, value: t.reduce(&value), modulus: t.clone() }
    }

    pub fn zero(owner: usize, t: &Modulus) -> Self {
        Share { owner, value: BigUint::zero(), modulus: t.clone() }
    }

    fn check(&self, other: &Share) -> Result<()> {
        if !self.modulus.same(&other.modulus) {
            return Err(Error::ModulusMismatch(format!(
                "{}-bit vs {}-bit share",
                self.modulus.bits(),
                other.modulus.bits()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Share) -> Result<Share> {
        self.check(other)?;
        Ok(Share {
            owner: self.owner,
            value: self.modulus.add(&self.value, &other.value),
            modulus: self.modulus.clone(),
        })
    }

    pub fn sub(&self, other: &Share) -> Result<Share> {
        self.check(other)?;
        Ok(Share {
            owner: self.owner,
            value: self.modulus.sub(&self.value, &other.value),
            modulus: self.modulus.clone(),
        })
    }

    pub fn neg(&self) -> Share {
        Share {
            owner: self.owner,
            value: self.modulus.neg(&self.value),
            modulus: self.modulus.clone(),
        }
    }

    pub fn scale(&self, k: &BigUint) -> Share {
        Share {
            owner: self.owner,
            value: self.modulus.mul(&self.value, k),
            modulus: self.modulus.clone(),
        }
    }

    /// Add a public constant: only party 0 shifts its share.
    pub fn add_public(&self, c: &BigUint) -> Share {
        if self.owner == 0 {
            Share {
                owner: self.owner,
                value: self.modulus.add(&self.value, c),
                modulus: self.modulus.clone(),
            }
        } else {
            self.clone()
        }
    }
}

/// Share-wise Σ coeff·share + constant; no communication.
pub fn linear_combine(
    terms: &[(BigUint, Share)],
    constant: &BigUint,
    owner: usize,
    t: &Modulus,
) -> Result<Share> {
    let mut acc = Share::zero(owner, t);
    for (k, s) in terms {
        if !s.modulus.same(t) {
            return Err(Error::ModulusMismatch("mixed moduli in linear combination".into()));
        }
        acc = acc.add(&s.scale(k))?;
    }
    Ok(acc.add_public(constant))
}

/// Authenticated share: value and MAC share of α·x under one key epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthShare {
    pub value: Share,
    pub mac: Share,
    pub key_id: u32,
}

impl AuthShare {
    pub fn new(value: Share, mac: Share, key_id: u32) -> Self {
        AuthShare { value, mac, key_id }
    }

    pub fn modulus(&self) -> &Modulus {
        &self.value.modulus
    }

    fn check_epoch(&self, other: &AuthShare) -> Result<()> {
        if self.key_id != other.key_id {
            return Err(Error::Params("MAC key epoch mismatch".into()));
        }
        Ok(())
    }

    pub fn add(&self, other: &AuthShare) -> Result<AuthShare> {
        self.check_epoch(other)?;
        Ok(AuthShare {
            value: self.value.add(&other.value)?,
            mac: self.mac.add(&other.mac)?,
            key_id: self.key_id,
        })
    }

    pub fn sub(&self, other: &AuthShare) -> Result<AuthShare> {
        self.check_epoch(other)?;
        Ok(AuthShare {
            value: self.value.sub(&other.value)?,
            mac: self.mac.sub(&other.mac)?,
            key_id: self.key_id,
        })
    }

    pub fn neg(&self) -> AuthShare {
        AuthShare { value: self.value.neg(), mac: self.mac.neg(), key_id: self.key_id }
    }

    pub fn scale(&self, k: &BigUint) -> AuthShare {
        AuthShare { value: self.value.scale(k), mac: self.mac.scale(k), key_id: self.key_id }
    }

    /// Add a public constant: party 0 shifts the value share; every party
    /// shifts its MAC share by α_i·c.
    pub fn add_public(&self, c: &BigUint, alpha_share: &BigUint) -> AuthShare {
        let t = &self.value.modulus;
        AuthShare {
            value: self.value.add_public(c),
            mac: Share {
                owner: self.mac.owner,
                value: t.add(&self.mac.value, &t.mul(alpha_share, c)),
                modulus: t.clone(),
            },
            key_id: self.key_id,
        }
    }

    pub fn sub_public(&self, c: &BigUint, alpha_share: &BigUint) -> AuthShare {
        let t = self.value.modulus.clone();
        self.add_public(&t.neg(&t.reduce(c)), alpha_share)
    }

    /// Authenticated share of a public constant (party 0 holds the value).
    pub fn from_public(c: &BigUint, owner: usize, alpha_share: &BigUint, key_id: u32, t: &Modulus) -> Self {
        AuthShare::new(Share::zero(owner, t), Share::zero(owner, t), key_id)
            .add_public(c, alpha_share)
    }
}

/// Open unauthenticated shares: one broadcast round for the whole batch.
pub fn open_shares(ctx: &mut PartyCtx, shares: &[Share]) -> Result<Vec<BigUint>> {
    if shares.is_empty() {
        return Ok(Vec::new());
    }
    let t = shares[0].modulus.clone();
    let mine: Vec<BigUint> = shares.iter().map(|s| s.value.clone()).collect();
    let all = ctx.exchange(FrameKind::Open, "open", mine)?;
    sum_columns(&t, &all, shares.len())
}

/// Open authenticated shares; the opened values and this party's MAC shares
/// join the deferred check queue for the share modulus.
pub fn open_auth(ctx: &mut PartyCtx, shares: &[AuthShare]) -> Result<Vec<BigUint>> {
    if shares.is_empty() {
        return Ok(Vec::new());
    }
    let t = shares[0].modulus().clone();
    let epoch = ctx.mac_session_mut(&t)?.key_id;
    for s in shares {
        if s.key_id != epoch {
            return Err(Error::Params("MAC key epoch mismatch at open".into()));
        }
    }
    let mine: Vec<BigUint> = shares.iter().map(|s| s.value.value.clone()).collect();
    let all = ctx.exchange(FrameKind::Open, "open", mine)?;
    let opened = sum_columns(&t, &all, shares.len())?;
    let session = ctx.mac_session_mut(&t)?;
    for (v, s) in opened.iter().zip(shares) {
        session.queue.push((v.clone(), s.mac.value.clone()));
    }
    Ok(opened)
}

pub(crate) fn sum_columns(t: &Modulus, all: &[Vec<BigUint>], len: usize) -> Result<Vec<BigUint>> {
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut acc = BigUint::zero();
        for batch in all {
            let v = batch
                .get(k)
                .ok_or_else(|| Error::Codec("short opening batch".into()))?;
            acc = t.add(&acc, &t.reduce(v));
        }
        out.push(acc);
    }
    Ok(out)
}

/// Validate every opening queued since the last check. Draws a public random
/// combination, commits to σ_i = Σ ρ_j·(m_ij − α_i·v_j), reveals, and requires
/// the σ to sum to zero. Returns how many openings were covered.
pub fn mac_check(ctx: &mut PartyCtx, t: &Modulus) -> Result<usize> {
    let queue = std::mem::take(&mut ctx.mac_session_mut(t)?.queue);
    if queue.is_empty() {
        return Ok(0);
    }
    ctx.scoped("mac_check", |ctx| {
        let rho = ctx.coin_flip(t, queue.len())?;
        let alpha = ctx.mac_session_mut(t)?.alpha_share.clone();
        let mut sigma = BigUint::zero();
        for ((v, m), r) in queue.iter().zip(&rho) {
            let diff = t.sub(m, &t.mul(&alpha, v));
            sigma = t.add(&sigma, &t.mul(r, &diff));
        }
        let revealed = ctx.commit_reveal("mac_check", vec![sigma])?;
        let mut total = BigUint::zero();
        for batch in &revealed {
            let v = batch
                .first()
                .ok_or_else(|| Error::Codec("empty MAC check batch".into()))?;
            total = t.add(&total, &t.reduce(v));
        }
        if !total.is_zero() {
            return Err(Error::MacCheckFailed { opened: queue.len() });
        }
        Ok(queue.len())
    })
}

/// Beaver multiplication on unauthenticated shares; consumes one stored triple
/// per product, single round for the batch.
pub fn mul_beaver_plain(
    ctx: &mut PartyCtx,
    xs: &[Share],
    ys: &[Share],
) -> Result<Vec<Share>> {
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let t = xs[0].modulus.clone();
    let triples: Vec<TripleRec> = (0..xs.len())
        .map(|_| ctx.store.take_triple(&t))
        .collect::<Result<_>>()?;
    let mut mine = Vec::with_capacity(2 * xs.len());
    for ((x, y), tr) in xs.iter().zip(ys).zip(&triples) {
        mine.push(t.sub(&x.value, &tr.a));
        mine.push(t.sub(&y.value, &tr.b));
    }
    let all = ctx.exchange(FrameKind::Open, "mul", mine)?;
    let opened = sum_columns(&t, &all, 2 * xs.len())?;
    let me = ctx.index;
    let mut out = Vec::with_capacity(xs.len());
    for (k, tr) in triples.iter().enumerate() {
        let d = &opened[2 * k];
        let e = &opened[2 * k + 1];
        let mut z = t.add(&tr.c, &t.mul(d, &tr.b));
        z = t.add(&z, &t.mul(e, &tr.a));
        if me == 0 {
            z = t.add(&z, &t.mul(d, e));
        }
        out.push(Share::new(me, z, &t));
    }
    Ok(out)
}

/// Beaver multiplication on authenticated shares. The masked openings d = x−a
/// and e = y−b are themselves authenticated and join the MAC queue; output
/// tags follow the linear relation c + d·b + e·a + d·e.
pub fn mul_beaver(
    ctx: &mut PartyCtx,
    xs: &[AuthShare],
    ys: &[AuthShare],
) -> Result<Vec<AuthShare>> {
    assert_eq!(xs.len(), ys.len());
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let t = xs[0].modulus().clone();
    let epoch = ctx.mac_session_mut(&t)?.key_id;
    let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
    let mut triples = Vec::with_capacity(xs.len());
    for _ in 0..xs.len() {
        let tr = ctx.store.take_triple(&t)?;
        if tr.macs.is_none() {
            return Err(Error::Params("unauthenticated triple in authenticated multiply".into()));
        }
        triples.push(tr);
    }
    let mut mine = Vec::with_capacity(2 * xs.len());
    for ((x, y), tr) in xs.iter().zip(ys).zip(&triples) {
        mine.push(t.sub(&x.value.value, &tr.a));
        mine.push(t.sub(&y.value.value, &tr.b));
    }
    let all = ctx.exchange(FrameKind::Open, "mul", mine)?;
    let opened = sum_columns(&t, &all, 2 * xs.len())?;

    let me = ctx.index;
    let mut out = Vec::with_capacity(xs.len());
    {
        let session = ctx.mac_session_mut(&t)?;
        for (k, ((x, y), tr)) in xs.iter().zip(ys).zip(&triples).enumerate() {
            let (ma, mb, mc) = tr.macs.as_ref().unwrap();
            let d = &opened[2 * k];
            let e = &opened[2 * k + 1];
            session.queue.push((d.clone(), t.sub(&x.mac.value, ma)));
            session.queue.push((e.clone(), t.sub(&y.mac.value, mb)));

            let mut z = t.add(&tr.c, &t.mul(d, &tr.b));
            z = t.add(&z, &t.mul(e, &tr.a));
            let de = t.mul(d, e);
            if me == 0 {
                z = t.add(&z, &de);
            }
            let mut mz = t.add(mc, &t.mul(d, mb));
            mz = t.add(&mz, &t.mul(e, ma));
            mz = t.add(&mz, &t.mul(&alpha, &de));
            out.push(AuthShare::new(Share::new(me, z, &t), Share::new(me, mz, &t), epoch));
        }
    }
    Ok(out)
}

/// Share private inputs held by `owner`: each stored random mask r is opened
/// to the owner alone, who absorbs x + r into its own share while everyone
/// else keeps −r_j. One round; consumes one mask per value.
pub fn share_input(
    ctx: &mut PartyCtx,
    owner: usize,
    xs: Option<&[BigUint]>,
    count: usize,
    t: &Modulus,
) -> Result<Vec<Share>> {
    if ctx.index == owner {
        let xs = xs.ok_or_else(|| Error::Params("input owner provided no values".into()))?;
        if xs.len() != count {
            return Err(Error::Params("input count mismatch".into()));
        }
    }
    let masks: Vec<BigUint> = (0..count)
        .map(|_| ctx.store.take_rndint(t).map(|r| r.r))
        .collect::<Result<_>>()?;
    let gathered = ctx.gather_to(owner, FrameKind::Gather, "share_input", masks.clone())?;
    let me = ctx.index;
    match gathered {
        Some(all) => {
            let xs = xs.unwrap();
            let mut out = Vec::with_capacity(count);
            for k in 0..count {
                let mut r = BigUint::zero();
                for batch in &all {
                    let v = batch
                        .get(k)
                        .ok_or_else(|| Error::Codec("short mask batch".into()))?;
                    r = t.add(&r, &t.reduce(v));
                }
                // x + r − ⟨r⟩_owner
                let v = t.sub(&t.add(&t.reduce(&xs[k]), &r), &masks[k]);
                out.push(Share::new(me, v, t));
            }
            Ok(out)
        }
        None => Ok(masks.iter().map(|r| Share::new(me, t.neg(r), t)).collect()),
    }
}

/// Authenticated input sharing: the mask is opened to the owner, who then
/// broadcasts Δ = x − r; shares become [r] + Δ with MAC tags adjusted by
/// α_i·Δ. Two rounds. A lying owner (inconsistent Δ) breaks the MAC relation
/// and surfaces at the next check.
pub fn share_input_auth(
    ctx: &mut PartyCtx,
    owner: usize,
    xs: Option<&[BigUint]>,
    count: usize,
    t: &Modulus,
) -> Result<Vec<AuthShare>> {
    let epoch = ctx.mac_session_mut(t)?.key_id;
    let alpha = ctx.mac_session_mut(t)?.alpha_share.clone();
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        let rec = ctx.store.take_rndint(t)?;
        let mac = rec
            .mac
            .ok_or_else(|| Error::Params("input mask lacks a MAC share".into()))?;
        masks.push((rec.r, mac));
    }
    let mask_shares: Vec<BigUint> = masks.iter().map(|(r, _)| r.clone()).collect();
    let gathered = ctx.gather_to(owner, FrameKind::Gather, "share_input", mask_shares)?;
    let deltas = match gathered {
        Some(all) => {
            let xs = xs.ok_or_else(|| Error::Params("input owner provided no values".into()))?;
            if xs.len() != count {
                return Err(Error::Params("input count mismatch".into()));
            }
            let mut deltas = Vec::with_capacity(count);
            for k in 0..count {
                let mut r = BigUint::zero();
                for batch in &all {
                    let v = batch
                        .get(k)
                        .ok_or_else(|| Error::Codec("short mask batch".into()))?;
                    r = t.add(&r, &t.reduce(v));
                }
                deltas.push(t.sub(&t.reduce(&xs[k]), &r));
            }
            ctx.broadcast_from(owner, FrameKind::Open, "share_input", deltas)?
        }
        None => ctx.broadcast_from(owner, FrameKind::Open, "share_input", Vec::new())?,
    };
    if deltas.len() != count {
        return Err(Error::Codec("input broadcast length mismatch".into()));
    }
    let me = ctx.index;
    let mut out = Vec::with_capacity(count);
    for (k, (r, m)) in masks.iter().enumerate() {
        let base = AuthShare::new(Share::new(me, r.clone(), t), Share::new(me, m.clone(), t), epoch);
        out.push(base.add_public(&deltas[k], &alpha));
    }
    Ok(out)
}

/// Turn ciphertexts under the preprocessing key into additive sharings of
/// their plaintexts: each party publishes an encrypted mask, the sum is
/// jointly decrypted, and party 0 absorbs the decrypted value. Offline only.
pub fn reshare_from_ciphertext(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    cs: &[BigUint],
) -> Result<Vec<Share>> {
    if cs.is_empty() {
        return Ok(Vec::new());
    }
    let t = Modulus::new(pk.n.value().clone());
    let mut masks = Vec::with_capacity(cs.len());
    let mut encs = Vec::with_capacity(cs.len());
    for _ in 0..cs.len() {
        let sampled = t.sample(&mut ctx.rng);
        let r = ctx.contribute("reshare mask", sampled);
        encs.push(pk.encrypt(&r, &mut ctx.rng));
        masks.push(r);
    }
    let all = ctx.exchange(FrameKind::Cipher, "reshare", encs)?;
    let mut sums = Vec::with_capacity(cs.len());
    for (k, c) in cs.iter().enumerate() {
        let mut acc = c.clone();
        for batch in &all {
            let e = batch
                .get(k)
                .ok_or_else(|| Error::Codec("short ciphertext batch".into()))?;
            acc = pk.padd(&acc, e);
        }
        sums.push(acc);
    }
    let ys = joint_decrypt_many(ctx, pk, dec, &sums)?;
    let me = ctx.index;
    Ok(ys
        .iter()
        .zip(&masks)
        .map(|(y, r)| {
            let v = if me == 0 { t.sub(y, r) } else { t.neg(r) };
            Share::new(me, v, &t)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Adversary;
    use crate::modular::sum_mod;
    use crate::paillier::{keygen_dealer, PaillierDecShare};
    use crate::sim::{run_simulated, unwrap_all};
    use crate::store::Dealer;
    use crate::wire::FrameKind;
    use num_traits::One;

    fn recon(t: &Modulus, shares: &[Share]) -> BigUint {
        let vals: Vec<BigUint> = shares.iter().map(|s| s.value.clone()).collect();
        sum_mod(t, &vals)
    }

    fn manual_shares(t: &Modulus, vals: &[u64], n: usize) -> Vec<Vec<Share>> {
        // party-major: out[i][k] = party i's share of vals[k]
        let mut out = vec![Vec::new(); n];
        for (k, v) in vals.iter().enumerate() {
            let mut rng =
                <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(1000 + k as u64);
            let parts = crate::modular::split_additive(t, &BigUint::from(*v), n, &mut rng);
            for (i, p) in parts.into_iter().enumerate() {
                out[i].push(Share::new(i, p, t));
            }
        }
        out
    }

    #[test]
    fn linear_ops_match_plaintext_oracle() {
        let t = Modulus::from_u64(11);
        for n in [2usize, 3] {
            for x in 0u64..11 {
                for y in 0u64..11 {
                    let shares = manual_shares(&t, &[x, y], n);
                    // 2x + y + 5
                    let combined: Vec<Share> = (0..n)
                        .map(|i| {
                            linear_combine(
                                &[
                                    (BigUint::from(2u32), shares[i][0].clone()),
                                    (BigUint::one(), shares[i][1].clone()),
                                ],
                                &BigUint::from(5u32),
                                i,
                                &t,
                            )
                            .unwrap()
                        })
                        .collect();
                    assert_eq!(recon(&t, &combined), BigUint::from((2 * x + y + 5) % 11));
                }
            }
        }
    }

    #[test]
    fn spec_linear_examples() {
        let t = Modulus::from_u64(11);
        let shares = manual_shares(&t, &[3, 4, 6], 3);
        let combo: Vec<Share> = (0..3)
            .map(|i| {
                linear_combine(
                    &[
                        (BigUint::from(2u32), shares[i][0].clone()),
                        (BigUint::one(), shares[i][1].clone()),
                    ],
                    &BigUint::zero(),
                    i,
                    &t,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(recon(&t, &combo), BigUint::from(10u32)); // 2·3 + 4

        let ident: Vec<Share> = (0..3)
            .map(|i| {
                linear_combine(
                    &[(BigUint::one(), shares[i][2].clone())],
                    &BigUint::zero(),
                    i,
                    &t,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(recon(&t, &ident), BigUint::from(6u32)); // 1·x + 0

        let consts: Vec<Share> = (0..3)
            .map(|i| {
                linear_combine(
                    &[(BigUint::zero(), shares[i][0].clone())],
                    &BigUint::from(5u32),
                    i,
                    &t,
                )
                .unwrap()
            })
            .collect();
        assert_eq!(recon(&t, &consts), BigUint::from(5u32)); // 0·x + 5
    }

    #[test]
    fn modulus_mismatch_rejected() {
        let a = Share::new(0, BigUint::from(3u32), &Modulus::from_u64(11));
        let b = Share::new(0, BigUint::from(3u32), &Modulus::from_u64(13));
        assert!(matches!(a.add(&b), Err(Error::ModulusMismatch(_))));
    }

    #[test]
    fn beaver_fixed_trace() {
        // x=3, y=4 mod 11 with triple (2,5,10): opens d=1, e=10, z=1
        let t = Modulus::from_u64(11);
        let t2 = t.clone();
        let outcomes = run_simulated(
            3,
            31,
            41,
            move |ctxs| {
                // a fixed triple: deal shares of (2,5,10) by hand
                let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(5);
                let sa = crate::modular::split_additive(&t2, &BigUint::from(2u32), 3, &mut rng);
                let sb = crate::modular::split_additive(&t2, &BigUint::from(5u32), 3, &mut rng);
                let sc = crate::modular::split_additive(&t2, &BigUint::from(10u32), 3, &mut rng);
                for (i, ctx) in ctxs.iter_mut().enumerate() {
                    ctx.store.push_triple(
                        &t2,
                        TripleRec {
                            a: sa[i].clone(),
                            b: sb[i].clone(),
                            c: sc[i].clone(),
                            macs: None,
                        },
                    );
                }
            },
            move |ctx| {
                let shares = manual_shares(&t, &[3, 4], 3);
                let mine = &shares[ctx.index];
                let z = mul_beaver_plain(ctx, &[mine[0].clone()], &[mine[1].clone()])?;
                Ok(z[0].value.clone())
            },
        );
        let (vals, counters) = unwrap_all(outcomes);
        let t = Modulus::from_u64(11);
        assert_eq!(sum_mod(&t, &vals), BigUint::one()); // 12 mod 11
        for c in counters {
            assert_eq!(c.total_rounds, 1, "batched multiply is one round");
        }
    }

    #[test]
    fn beaver_exhaustive_with_mac_check() {
        let t = Modulus::from_u64(11);
        let t_setup = t.clone();
        let outcomes = run_simulated(
            2,
            32,
            42,
            move |ctxs| {
                let mut dealer = Dealer::new(8, 2);
                let mut stores: Vec<_> =
                    ctxs.iter_mut().map(|c| std::mem::take(&mut c.store)).collect();
                let alpha = dealer.deal_mac_key(&t_setup, &mut stores);
                dealer.deal_triples(&t_setup, &mut stores, 121, Some(&alpha));
                dealer.deal_rndints(&t_setup, &mut stores, 242, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let mut bad = Vec::new();
                for x in 0u64..11 {
                    for y in 0u64..11 {
                        let xv = [BigUint::from(x)];
                        let yv = [BigUint::from(y)];
                        let xs = share_input_auth(
                            ctx,
                            0,
                            if ctx.index == 0 { Some(&xv) } else { None },
                            1,
                            &t,
                        )?;
                        let ys = share_input_auth(
                            ctx,
                            1,
                            if ctx.index == 1 { Some(&yv) } else { None },
                            1,
                            &t,
                        )?;
                        let z = mul_beaver(ctx, &xs, &ys)?;
                        let opened = open_auth(ctx, &z)?;
                        if opened[0] != BigUint::from(x * y % 11) {
                            bad.push((x, y));
                        }
                    }
                }
                mac_check(ctx, &t)?;
                Ok(bad)
            },
        );
        let (vals, _) = unwrap_all(outcomes);
        for bad in vals {
            assert!(bad.is_empty(), "mismatches: {bad:?}");
        }
    }

    struct OpenTamper {
        delta: u64,
        fired: bool,
    }
    impl Adversary for OpenTamper {
        fn on_send(
            &mut self,
            scope: Option<&str>,
            kind: FrameKind,
            _round: u32,
            _to: usize,
            ints: &mut Vec<BigUint>,
        ) {
            if kind == FrameKind::Open && scope != Some("mac_check") && !ints.is_empty() {
                ints[0] += BigUint::from(self.delta);
                self.fired = true;
            }
        }
    }

    #[test]
    fn tampered_opening_fails_mac_check() {
        let q = Modulus::from_u64(1_000_003);
        let q_setup = q.clone();
        let outcomes = run_simulated(
            3,
            33,
            43,
            move |ctxs| {
                let mut dealer = Dealer::new(9, 3);
                let mut stores: Vec<_> = ctxs.iter_mut().map(|c| std::mem::take(&mut c.store)).collect();
                let alpha = dealer.deal_mac_key(&q_setup, &mut stores);
                dealer.deal_rndints(&q_setup, &mut stores, 4, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
                ctxs[1].set_adversary(Box::new(OpenTamper { delta: 1, fired: false }));
            },
            move |ctx| {
                let v = [BigUint::from(77u32)];
                let xs = share_input_auth(
                    ctx,
                    0,
                    if ctx.index == 0 { Some(&v) } else { None },
                    1,
                    &q,
                )?;
                let _ = open_auth(ctx, &xs)?;
                mac_check(ctx, &q)?;
                Ok(())
            },
        );
        // every honest party must abort with a MAC failure
        let mut failures = 0;
        for o in outcomes {
            match o.result {
                Err(Error::MacCheckFailed { opened }) => {
                    assert_eq!(opened, 1);
                    failures += 1;
                }
                other => panic!("expected MAC failure, got {other:?}"),
            }
        }
        assert_eq!(failures, 3);
    }

    struct ValueAndMacTamper;
    impl Adversary for ValueAndMacTamper {
        fn on_send(
            &mut self,
            scope: Option<&str>,
            kind: FrameKind,
            _round: u32,
            _to: usize,
            ints: &mut Vec<BigUint>,
        ) {
            // shift the opened value by δ and pretend the key were α' = α+1:
            // consistent-looking but wrong tag adjustment
            if kind == FrameKind::Open && scope != Some("mac_check") && !ints.is_empty() {
                ints[0] += BigUint::from(5u32);
            }
        }
    }

    #[test]
    fn wrong_key_guess_still_fails() {
        // tampering value by δ and MAC by α'·δ with α' ≠ α must abort: the
        // cheater below adjusts its own queued MAC share using a guessed key
        let q = Modulus::from_u64(1_000_003);
        let q_setup = q.clone();
        let outcomes = run_simulated(
            2,
            34,
            44,
            move |ctxs| {
                let mut dealer = Dealer::new(10, 2);
                let mut stores: Vec<_> = ctxs.iter_mut().map(|c| std::mem::take(&mut c.store)).collect();
                let alpha = dealer.deal_mac_key(&q_setup, &mut stores);
                dealer.deal_rndints(&q_setup, &mut stores, 2, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
                ctxs[1].set_adversary(Box::new(ValueAndMacTamper));
            },
            move |ctx| {
                let v = [BigUint::from(9u32)];
                let xs = share_input_auth(
                    ctx,
                    0,
                    if ctx.index == 0 { Some(&v) } else { None },
                    1,
                    &q,
                )?;
                let opened = open_auth(ctx, &xs)?;
                if ctx.index == 1 {
                    // adjust own MAC share as if the key were α+1: m += (α+1)·δ
                    let alpha = ctx.mac_session_mut(&q)?.alpha_share.clone();
                    let guess = q.add(&alpha, &BigUint::one());
                    let fix = q.mul(&guess, &BigUint::from(5u32));
                    let queue = &mut ctx.mac_session_mut(&q)?.queue;
                    let last = queue.last_mut().unwrap();
                    last.1 = q.add(&last.1, &fix);
                }
                let _ = opened;
                mac_check(ctx, &q)?;
                Ok(())
            },
        );
        for o in outcomes {
            assert!(matches!(o.result, Err(Error::MacCheckFailed { .. })));
        }
    }

    #[test]
    fn share_input_reconstructs_and_consumes_masks() {
        let t = Modulus::from_u64(35);
        let t_setup = t.clone();
        let outcomes = run_simulated(
            3,
            35,
            45,
            move |ctxs| {
                let mut dealer = Dealer::new(11, 3);
                let mut stores: Vec<_> = ctxs.iter_mut().map(|c| std::mem::take(&mut c.store)).collect();
                dealer.deal_rndints(&t_setup, &mut stores, 2, None);
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let before = ctx.store.count_rndints(&t);
                let pair = [BigUint::from(10u32), BigUint::zero()];
                let xs = share_input(
                    ctx,
                    2,
                    if ctx.index == 2 { Some(&pair) } else { None },
                    2,
                    &t,
                )?;
                let after = ctx.store.count_rndints(&t);
                // a third input must hit depletion
                let one = [BigUint::one()];
                let depleted =
                    share_input(ctx, 2, if ctx.index == 2 { Some(&one) } else { None }, 1, &t);
                let depleted = matches!(depleted, Err(Error::OfflineDepleted(_)));
                Ok((xs, before - after, depleted, ctx.counters.total_rounds))
            },
        );
        let (vals, _) = unwrap_all(outcomes);
        let t = Modulus::from_u64(35);
        let first: Vec<Share> = vals.iter().map(|v| v.0[0].clone()).collect();
        let second: Vec<Share> = vals.iter().map(|v| v.0[1].clone()).collect();
        assert_eq!(recon(&t, &first), BigUint::from(10u32));
        assert_eq!(recon(&t, &second), BigUint::zero());
        for (_, used, depleted, rounds) in &vals {
            assert_eq!(*used, 2, "each input consumes exactly one fresh mask");
            assert!(*depleted, "mask reuse is impossible: the store refuses");
            assert_eq!(*rounds, 1, "plain input sharing is one round");
        }
    }

    #[test]
    fn reshare_fixed_trace_and_exhaustive() {
        // masks forced to (5, 7): Enc(10) → y = 22, shares (17, 28)
        struct FixedMask(u64);
        impl Adversary for FixedMask {
            fn contribute(&mut self, label: &str, honest: BigUint) -> BigUint {
                if label == "reshare mask" {
                    BigUint::from(self.0)
                } else {
                    honest
                }
            }
        }
        let (pk, dec_shares) = keygen_dealer(16, 2, 123).unwrap();
        // toy fixed-modulus key for the hand trace
        let toy_pk = PaillierPublicKey::from_modulus(BigUint::from(35u32));
        let toy_d = BigUint::from(456u32);
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(61);
        let toy_shares: Vec<PaillierDecShare> = {
            let nl = BigUint::from(840u32);
            crate::paillier::deal_exponent_shares(&toy_d, &nl, 2, &mut rng)
                .into_iter()
                .enumerate()
                .map(|(party, d_i)| PaillierDecShare { party, d_i })
                .collect()
        };
        let toy_pk2 = toy_pk.clone();
        let toy_shares2 = toy_shares.clone();
        let outcomes = run_simulated(
            2,
            36,
            46,
            move |ctxs| {
                ctxs[0].set_adversary(Box::new(FixedMask(5)));
                ctxs[1].set_adversary(Box::new(FixedMask(7)));
            },
            move |ctx| {
                let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(62);
                let c = toy_pk2.encrypt(&BigUint::from(10u32), &mut rng);
                let sh = reshare_from_ciphertext(ctx, &toy_pk2, &toy_shares2[ctx.index], &[c])?;
                Ok(sh[0].value.clone())
            },
        );
        let (vals, _) = unwrap_all(outcomes);
        assert_eq!(vals[0], BigUint::from(17u32)); // 22 − 5
        assert_eq!(vals[1], BigUint::from(28u32)); // −7 mod 35
        let t = Modulus::from_u64(35);
        assert_eq!(sum_mod(&t, &vals), BigUint::from(10u32));

        // exhaustive over the real 16-bit key: x ∈ sample set reconstructs
        let pk2 = pk.clone();
        let dec2 = dec_shares.clone();
        let outcomes = run_simulated(2, 37, 47, |_| {}, move |ctx| {
            let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(63);
            let mut cs = Vec::new();
            let mut expect = Vec::new();
            for k in 0u32..35 {
                let m = pk2.n.reduce(&BigUint::from(k * 701 + 13));
                cs.push(pk2.encrypt(&m, &mut rng));
                expect.push(m);
            }
            let sh = reshare_from_ciphertext(ctx, &pk2, &dec2[ctx.index], &cs)?;
            Ok((sh.iter().map(|s| s.value.clone()).collect::<Vec<_>>(), expect))
        });
        let (vals, _) = unwrap_all(outcomes);
        let t = Modulus::new(pk.n.value().clone());
        for k in 0..35 {
            let pieces = vec![vals[0].0[k].clone(), vals[1].0[k].clone()];
            assert_eq!(sum_mod(&t, &pieces), vals[0].1[k]);
        }
    }

    #[test]
    fn linear_combine_sends_nothing() {
        let t = Modulus::from_u64(11);
        let outcomes = run_simulated(2, 38, 48, |_| {}, move |ctx| {
            let s = Share::new(ctx.index, BigUint::from(3u32), &t);
            let out = linear_combine(
                &[(BigUint::from(4u32), s)],
                &BigUint::from(2u32),
                ctx.index,
                &t,
            )?;
            Ok((out, ctx.counters.total_bytes_sent, ctx.counters.total_rounds))
        });
        let (vals, _) = unwrap_all(outcomes);
        for (_, bytes, rounds) in vals {
            assert_eq!(bytes, 0);
            assert_eq!(rounds, 0);
        }
    }
}
