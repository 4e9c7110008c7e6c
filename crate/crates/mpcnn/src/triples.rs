//! Offline generation of Beaver triples over the Paillier plaintext ring.
//!
//! Each party publishes encryptions of its additive contributions; sums are
//! assembled homomorphically, products by exponentiation with the local
//! factor, and results return to share form through resharing. MAC tags are
//! α-scaled copies of the same material, assembled with one extra exchange.
//! Correctness of a triple is enforced by sacrificing a partner triple under
//! a jointly flipped challenge. A bounded-randomness variant generates
//! triples directly over a small target modulus inside a much larger
//! plaintext space, where all intermediate integers stay below the modulus
//! and therefore reduce consistently.

use crate::engine::PartyCtx;
use crate::modular::{pow2, Modulus};
use crate::paillier::{joint_decrypt_many, PaillierDecShare, PaillierPublicKey};
use crate::sharing::{reshare_from_ciphertext, Share};
use crate::store::{MatrixTripleRec, TripleRec};
use crate::wire::FrameKind;
use crate::{Error, Result};
use num_bigint::BigUint;
use num_traits::{One, Zero};

/// Column-wise homomorphic sum of everyone's ciphertext batches.
fn padd_columns(pk: &PaillierPublicKey, all: &[Vec<BigUint>], len: usize) -> Result<Vec<BigUint>> {
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let mut acc = BigUint::one(); // Enc(0) with unit randomness
        for batch in all {
            let c = batch
                .get(k)
                .ok_or_else(|| Error::Codec("short ciphertext batch".into()))?;
            acc = pk.padd(&acc, c);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Re-randomized Enc(base · k): exponentiation leaks the exponent's
/// randomness profile, so a fresh encryption of zero is folded in.
fn pmult_fresh(
    pk: &PaillierPublicKey,
    base: &BigUint,
    k: &BigUint,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> BigUint {
    pk.padd(&pk.pmult(base, k), &pk.encrypt(&BigUint::zero(), rng))
}

/// Beaver triple generation over ℤ_N. Each party samples its a, b shares,
/// publishes their encryptions, and the product ciphertext is reshared.
/// With `with_tags`, α-scaled sharings of a, b, c are produced in the same
/// pass using the MAC key share from the preprocessing store.
pub fn trigen(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    count: usize,
    with_tags: bool,
) -> Result<Vec<TripleRec>> {
    let t = Modulus::new(pk.n.value().clone());
    ctx.scoped("trigen", |ctx| {
        let mut a_mine = Vec::with_capacity(count);
        let mut b_mine = Vec::with_capacity(count);
        let mut encs = Vec::with_capacity(2 * count);
        for _ in 0..count {
            let a = {
                let s = t.sample(&mut ctx.rng);
                ctx.contribute("trigen a", s)
            };
            let b = {
                let s = t.sample(&mut ctx.rng);
                ctx.contribute("trigen b", s)
            };
            encs.push(pk.encrypt(&a, &mut ctx.rng));
            a_mine.push(a);
            b_mine.push(b);
        }
        for b in &b_mine {
            encs.push(pk.encrypt(b, &mut ctx.rng));
        }
        let all = ctx.exchange(FrameKind::Cipher, "trigen", encs)?;
        let summed = padd_columns(pk, &all, 2 * count)?;
        let (enc_a, enc_b) = summed.split_at(count);

        let mut prods = Vec::with_capacity(count);
        for (ea, b) in enc_a.iter().zip(&b_mine) {
            prods.push(pmult_fresh(pk, ea, b, &mut ctx.rng));
        }
        let all = ctx.exchange(FrameKind::Cipher, "trigen", prods)?;
        let enc_c = padd_columns(pk, &all, count)?;

        let tag_sums = if with_tags {
            let alpha = ctx
                .store
                .mac_key(&t)
                .cloned()
                .ok_or_else(|| Error::Params("no MAC key for the triple modulus".into()))?;
            let mut scaled = Vec::with_capacity(3 * count);
            for base in enc_a.iter().chain(enc_b.iter()).chain(enc_c.iter()) {
                scaled.push(pmult_fresh(pk, base, &alpha, &mut ctx.rng));
            }
            let all = ctx.exchange(FrameKind::Cipher, "trigen", scaled)?;
            Some(padd_columns(pk, &all, 3 * count)?)
        } else {
            None
        };

        let mut to_reshare = enc_c.to_vec();
        if let Some(tags) = &tag_sums {
            to_reshare.extend(tags.iter().cloned());
        }
        let shares = reshare_from_ciphertext(ctx, pk, dec, &to_reshare)?;

        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let macs = tag_sums.as_ref().map(|_| {
                (
                    shares[count + k].value.clone(),
                    shares[2 * count + k].value.clone(),
                    shares[3 * count + k].value.clone(),
                )
            });
            out.push(TripleRec {
                a: a_mine[k].clone(),
                b: b_mine[k].clone(),
                c: shares[k].value.clone(),
                macs,
            });
        }
        Ok(out)
    })
}

/// Pairwise triple sacrifice: consumes triples two at a time, opens
/// d = ρ·a₁−a₂ and e = b₁−b₂ under a jointly flipped ρ, then opens
/// ρ·c₁ − c₂ − e·a₂ − d·b₁ by commitment and requires zero. Survivors are
/// the first triple of each pair.
pub fn sacrifice(
    ctx: &mut PartyCtx,
    triples: Vec<TripleRec>,
    t: &Modulus,
) -> Result<Vec<TripleRec>> {
    if triples.len() % 2 != 0 {
        return Err(Error::Params("sacrifice needs triples in pairs".into()));
    }
    let pairs = triples.len() / 2;
    if pairs == 0 {
        return Ok(Vec::new());
    }
    ctx.scoped("sacrifice", |ctx| {
        let rho = ctx.coin_flip(t, pairs)?;
        let mut opens = Vec::with_capacity(2 * pairs);
        for (k, pair) in triples.chunks(2).enumerate() {
            let (t1, t2) = (&pair[0], &pair[1]);
            opens.push(t.sub(&t.mul(&rho[k], &t1.a), &t2.a));
            opens.push(t.sub(&t1.b, &t2.b));
        }
        let all = ctx.exchange(FrameKind::Open, "sacrifice", opens)?;
        let opened = open_sums(t, &all, 2 * pairs)?;

        let mut checks = Vec::with_capacity(pairs);
        for (k, pair) in triples.chunks(2).enumerate() {
            let (t1, t2) = (&pair[0], &pair[1]);
            let d = &opened[2 * k];
            let e = &opened[2 * k + 1];
            let mut v = t.sub(&t.mul(&rho[k], &t1.c), &t2.c);
            v = t.sub(&v, &t.mul(e, &t2.a));
            v = t.sub(&v, &t.mul(d, &t1.b));
            checks.push(v);
        }
        let revealed = ctx.commit_reveal("sacrifice", checks)?;
        for k in 0..pairs {
            let mut total = BigUint::zero();
            for batch in &revealed {
                let v = batch
                    .get(k)
                    .ok_or_else(|| Error::Codec("short sacrifice batch".into()))?;
                total = t.add(&total, &t.reduce(v));
            }
            if !total.is_zero() {
                return Err(Error::SacrificeFailed);
            }
        }
        Ok(triples
            .chunks(2)
            .map(|pair| pair[0].clone())
            .collect())
    })
}

fn open_sums(t: &Modulus, all: &[Vec<BigUint>], len: usize) -> Result<Vec<BigUint>> {
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

/// Matrix Beaver triples: A (r×s) and B (s×u) are random, C = A·B is
/// assembled entry-wise from encrypted inner products and reshared.
pub fn matrix_trigen(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    dims: (usize, usize, usize),
    with_tags: bool,
) -> Result<MatrixTripleRec> {
    let (r, s, u) = dims;
    if r == 0 || s == 0 || u == 0 {
        return Err(Error::Params("matrix triple with empty dimension".into()));
    }
    let t = Modulus::new(pk.n.value().clone());
    ctx.scoped("matrix_trigen", |ctx| {
        let a_mine: Vec<BigUint> = (0..r * s).map(|_| t.sample(&mut ctx.rng)).collect();
        let b_mine: Vec<BigUint> = (0..s * u).map(|_| t.sample(&mut ctx.rng)).collect();
        let mut encs = Vec::with_capacity(r * s + s * u);
        for v in a_mine.iter().chain(b_mine.iter()) {
            encs.push(pk.encrypt(v, &mut ctx.rng));
        }
        let all = ctx.exchange(FrameKind::Cipher, "matrix_trigen", encs)?;
        let summed = padd_columns(pk, &all, r * s + s * u)?;
        let (enc_a, enc_b) = summed.split_at(r * s);

        // Enc(C_partial[i,j]) = Π_k Enc(A[i,k])^{B_mine[k,j]}
        let mut prods = Vec::with_capacity(r * u);
        for i in 0..r {
            for j in 0..u {
                let mut acc = pk.encrypt(&BigUint::zero(), &mut ctx.rng);
                for k in 0..s {
                    acc = pk.padd(&acc, &pk.pmult(&enc_a[i * s + k], &b_mine[k * u + j]));
                }
                prods.push(acc);
            }
        }
        let all = ctx.exchange(FrameKind::Cipher, "matrix_trigen", prods)?;
        let enc_c = padd_columns(pk, &all, r * u)?;

        let tag_sums = if with_tags {
            let alpha = ctx
                .store
                .mac_key(&t)
                .cloned()
                .ok_or_else(|| Error::Params("no MAC key for the triple modulus".into()))?;
            let mut scaled = Vec::with_capacity(r * s + s * u + r * u);
            for base in enc_a.iter().chain(enc_b.iter()).chain(enc_c.iter()) {
                scaled.push(pmult_fresh(pk, base, &alpha, &mut ctx.rng));
            }
            let all = ctx.exchange(FrameKind::Cipher, "matrix_trigen", scaled)?;
            Some(padd_columns(pk, &all, r * s + s * u + r * u)?)
        } else {
            None
        };

        let mut to_reshare = enc_c.to_vec();
        if let Some(tags) = &tag_sums {
            to_reshare.extend(tags.iter().cloned());
        }
        let shares = reshare_from_ciphertext(ctx, pk, dec, &to_reshare)?;
        let vals = |lo: usize, len: usize| -> Vec<BigUint> {
            shares[lo..lo + len].iter().map(|s| s.value.clone()).collect()
        };
        let c = vals(0, r * u);
        let macs = tag_sums.as_ref().map(|_| {
            let base = r * u;
            (
                vals(base, r * s),
                vals(base + r * s, s * u),
                vals(base + r * s + s * u, r * u),
            )
        });
        Ok(MatrixTripleRec { dims, a: a_mine, b: b_mine, c, macs })
    })
}

/// Shared uniform randomness: every party deals a sharing of a local draw and
/// the column sums are the output shares. Uniform as long as one party is
/// honest. One round for the whole batch.
pub fn rnd_int(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<Share>> {
    ctx.scoped("rnd_int", |ctx| {
        let mut rows: Vec<Vec<BigUint>> = vec![Vec::with_capacity(count); ctx.n];
        for _ in 0..count {
            let r = {
                let s = t.sample(&mut ctx.rng);
                ctx.contribute("rnd_int deal", s)
            };
            let parts = crate::modular::split_additive(t, &r, ctx.n, &mut ctx.rng);
            for (row, p) in rows.iter_mut().zip(parts) {
                row.push(p);
            }
        }
        let got = ctx.scatter(FrameKind::Deal, "rnd_int", rows)?;
        let me = ctx.index;
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let mut acc = BigUint::zero();
            for batch in &got {
                let v = batch
                    .get(k)
                    .ok_or_else(|| Error::Codec("short deal batch".into()))?;
                acc = t.add(&acc, &t.reduce(v));
            }
            out.push(Share::new(me, acc, t));
        }
        Ok(out)
    })
}

/// α-scale arbitrary shares over the Paillier plaintext ring: publishes
/// Enc(x_i), assembles Enc(x), raises to the local key share, and reshares
/// Enc(α·x). Used to attach MAC tags to offline material.
pub fn tag_paillier(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    shares: &[Share],
) -> Result<Vec<Share>> {
    if shares.is_empty() {
        return Ok(Vec::new());
    }
    let t = Modulus::new(pk.n.value().clone());
    let alpha = ctx
        .store
        .mac_key(&t)
        .cloned()
        .ok_or_else(|| Error::Params("no MAC key for the tag modulus".into()))?;
    let mut encs = Vec::with_capacity(shares.len());
    for s in shares {
        encs.push(pk.encrypt(&s.value, &mut ctx.rng));
    }
    let all = ctx.exchange(FrameKind::Cipher, "tag", encs)?;
    let enc_x = padd_columns(pk, &all, shares.len())?;
    let mut scaled = Vec::with_capacity(shares.len());
    for e in &enc_x {
        scaled.push(pmult_fresh(pk, e, &alpha, &mut ctx.rng));
    }
    let all = ctx.exchange(FrameKind::Cipher, "tag", scaled)?;
    let enc_tag = padd_columns(pk, &all, shares.len())?;
    reshare_from_ciphertext(ctx, pk, dec, &enc_tag)
}

/// [`tag_paillier`] for shares over a small modulus `target`, inside a
/// Paillier plaintext space big enough that α_int · x_int never wraps as an
/// integer (both sums stay below n·target), so the bounded reshare reduces
/// consistently mod `target`. Attaches MAC tags to offline material that was
/// generated directly over the online field.
pub fn tag_direct(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    target: &Modulus,
    shares: &[Share],
    kappa: u64,
) -> Result<Vec<Share>> {
    if shares.is_empty() {
        return Ok(Vec::new());
    }
    let n = ctx.n as u64;
    let log_n = 64 - n.leading_zeros() as u64;
    let value_bits = 2 * (target.bits() + log_n) + 1;
    bounded_fit(pk, value_bits, kappa, ctx.n)?;
    let alpha = ctx
        .store
        .mac_key(target)
        .cloned()
        .ok_or_else(|| Error::Params("no MAC key for the target modulus".into()))?;
    let mut encs = Vec::with_capacity(shares.len());
    for s in shares {
        encs.push(pk.encrypt(&s.value, &mut ctx.rng));
    }
    let all = ctx.exchange(FrameKind::Cipher, "tag", encs)?;
    let enc_x = padd_columns(pk, &all, shares.len())?;
    let mut scaled = Vec::with_capacity(shares.len());
    for e in &enc_x {
        scaled.push(pmult_fresh(pk, e, &alpha, &mut ctx.rng));
    }
    let all = ctx.exchange(FrameKind::Cipher, "tag", scaled)?;
    let enc_tag = padd_columns(pk, &all, shares.len())?;
    bounded_reshare(ctx, pk, dec, &enc_tag, value_bits, kappa, target)
}

/// Mask-size bound for the bounded-randomness reshare: values of `value_bits`
/// bits masked κ bits deep by each of n parties must stay inside N′.
fn bounded_fit(pk: &PaillierPublicKey, value_bits: u64, kappa: u64, n: usize) -> Result<()> {
    let log_n = 64 - (n as u64).leading_zeros() as u64;
    if pk.n.bits() <= value_bits + kappa + log_n + 1 {
        return Err(Error::Params(format!(
            "plaintext space of {} bits cannot mask {}-bit values at κ={} for {} parties",
            pk.n.bits(),
            value_bits,
            kappa,
            n
        )));
    }
    Ok(())
}

/// Reshare ciphertexts of *bounded* plaintexts into shares over `target`.
/// Masks are integers κ bits wider than the payload bound, so the decrypted
/// sum never wraps mod N′ and the reduction mod `target` is consistent.
pub fn bounded_reshare(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    cs: &[BigUint],
    value_bits: u64,
    kappa: u64,
    target: &Modulus,
) -> Result<Vec<Share>> {
    bounded_fit(pk, value_bits, kappa, ctx.n)?;
    let mask_space = Modulus::new(pow2(value_bits + kappa));
    let mut masks = Vec::with_capacity(cs.len());
    let mut encs = Vec::with_capacity(cs.len());
    for _ in 0..cs.len() {
        let r = mask_space.sample(&mut ctx.rng);
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
            let v = if me == 0 {
                target.sub(&target.reduce(y), &target.reduce(r))
            } else {
                target.neg(&target.reduce(r))
            };
            Share::new(me, v, target)
        })
        .collect())
}

/// Beaver triples directly over a small modulus `target`, generated inside a
/// Paillier plaintext space large enough that a, b, c and their α-scalings
/// never wrap as integers. Breaks the circular dependency between field
/// triples and the conversion pipeline that would otherwise produce them.
pub fn trigen_direct(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    target: &Modulus,
    count: usize,
    kappa: u64,
    with_tags: bool,
) -> Result<Vec<TripleRec>> {
    let n = ctx.n as u64;
    // largest intermediate integer: α_int · a_int · b_int < (n·t)³
    let value_bits = 3 * (target.bits() + 64 - n.leading_zeros() as u64) + 3;
    bounded_fit(pk, value_bits, kappa, ctx.n)?;
    ctx.scoped("trigen_direct", |ctx| {
        let mut a_mine = Vec::with_capacity(count);
        let mut b_mine = Vec::with_capacity(count);
        let mut encs = Vec::with_capacity(2 * count);
        for _ in 0..count {
            let a = {
                let s = target.sample(&mut ctx.rng);
                ctx.contribute("trigen a", s)
            };
            let b = {
                let s = target.sample(&mut ctx.rng);
                ctx.contribute("trigen b", s)
            };
            encs.push(pk.encrypt(&a, &mut ctx.rng));
            a_mine.push(a);
            b_mine.push(b);
        }
        for b in &b_mine {
            encs.push(pk.encrypt(b, &mut ctx.rng));
        }
        let all = ctx.exchange(FrameKind::Cipher, "trigen_direct", encs)?;
        let summed = padd_columns(pk, &all, 2 * count)?;
        let (enc_a, enc_b) = summed.split_at(count);

        let mut prods = Vec::with_capacity(count);
        for (ea, b) in enc_a.iter().zip(&b_mine) {
            prods.push(pmult_fresh(pk, ea, b, &mut ctx.rng));
        }
        let all = ctx.exchange(FrameKind::Cipher, "trigen_direct", prods)?;
        let enc_c = padd_columns(pk, &all, count)?;

        let tag_sums = if with_tags {
            let alpha = ctx
                .store
                .mac_key(target)
                .cloned()
                .ok_or_else(|| Error::Params("no MAC key for the target modulus".into()))?;
            let mut scaled = Vec::with_capacity(3 * count);
            for base in enc_a.iter().chain(enc_b.iter()).chain(enc_c.iter()) {
                scaled.push(pmult_fresh(pk, base, &alpha, &mut ctx.rng));
            }
            let all = ctx.exchange(FrameKind::Cipher, "trigen_direct", scaled)?;
            Some(padd_columns(pk, &all, 3 * count)?)
        } else {
            None
        };

        let mut to_reshare = enc_c.to_vec();
        if let Some(tags) = &tag_sums {
            to_reshare.extend(tags.iter().cloned());
        }
        let shares = bounded_reshare(ctx, pk, dec, &to_reshare, value_bits, kappa, target)?;

        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let macs = tag_sums.as_ref().map(|_| {
                (
                    shares[count + k].value.clone(),
                    shares[2 * count + k].value.clone(),
                    shares[3 * count + k].value.clone(),
                )
            });
            out.push(TripleRec {
                a: target.reduce(&a_mine[k]),
                b: target.reduce(&b_mine[k]),
                c: shares[k].value.clone(),
                macs,
            });
        }
        Ok(out)
    })
}
