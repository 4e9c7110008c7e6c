//! Shared random bits and constant-round signed comparison.
//!
//! Everything in this module operates on plain additive shares over one odd
//! modulus, which may be an RSA modulus or a prime; the code path is the same
//! for both. The building blocks stack as follows: [`rnd_bit`] turns per-party
//! dealt bits into a jointly random shared bit via an XOR tree and catches
//! injected non-bits by opening `a·(1−a)`; [`prnd_int`] composes shared bits
//! into a bounded random integer; [`rnd_inv`] produces `([r], [r⁻¹])` pairs;
//! [`premulc`] uses those pairs to open masked prefix products in a constant
//! number of rounds; and [`gez`] combines the lot into a sign test on a
//! centered-lifted `k`-bit shared value.
//!
//! Batching is this module's job, not the caller's: every operation takes a
//! list and merges all parallel multiplications and openings into single
//! rounds, so the online round count of [`gez_many`] is independent of both
//! the bit width and the batch size. Bit material and masks are drained from
//! the preprocessing store when stocked and generated in place otherwise;
//! callers are responsible for keeping party stores in step, since a party
//! that falls back to in-place generation while its peers read their stores
//! will desynchronize the session.

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::RngCore;

use crate::engine::PartyCtx;
use crate::modular::{pow2, split_additive, Modulus};
use crate::sharing::{mul_beaver_plain, open_shares, Share};
use crate::wire::FrameKind;
use crate::{Error, Result};

/// A uniform shared integer together with the shared bits that compose it,
/// least significant bit first.
#[derive(Debug, Clone)]
pub struct BitDecomposedRandom {
    pub bits: Vec<Share>,
    pub composed: Share,
}

/// Drain `count` shared bits for modulus `t`, preferring the preprocessing
/// store and generating the remainder in place via [`rnd_bit`].
pub fn take_bits(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<Share>> {
    let stocked = ctx.store.count_bits(t).min(count);
    let mut out = Vec::with_capacity(count);
    for _ in 0..stocked {
        let rec = ctx.store.take_bit(t)?;
        out.push(Share::new(ctx.index, rec.b, t));
    }
    if out.len() < count {
        let missing = count - out.len();
        out.extend(rnd_bit(ctx, t, missing)?);
    }
    Ok(out)
}

/// Drain `count` shared uniform integers, preferring the preprocessing store
/// and dealing the remainder in place.
pub fn take_rndints(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<Share>> {
    let stocked = ctx.store.count_rndints(t).min(count);
    let mut out = Vec::with_capacity(count);
    for _ in 0..stocked {
        let rec = ctx.store.take_rndint(t)?;
        out.push(Share::new(ctx.index, rec.r, t));
    }
    if out.len() < count {
        let missing = count - out.len();
        out.extend(crate::triples::rnd_int(ctx, t, missing)?);
    }
    Ok(out)
}

/// Generate `count` jointly random shared bits.
///
/// Every party deals a sharing of a locally drawn bit; the dealt bits are
/// folded pairwise with `x ⊕ y = x + y − 2xy`, one multiplication per tree
/// node, with an odd node carried through unchanged (equivalent to padding
/// the tree with public zeros). A final multiplication opens `a·(1−a)` per
/// output; any nonzero opening means some party dealt a non-bit. A failed
/// check is retried once with fresh deals — over an RSA modulus a dishonest
/// deal can land on a nontrivial idempotent and slip through, but honest
/// retries always succeed — and surfaces as [`Error::BitCheckFailed`] after
/// that.
pub fn rnd_bit(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<Share>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    ctx.scoped("rnd_bit", |ctx| {
        let mut out = rnd_bit_attempt(ctx, t, count)?;
        let failed: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect();
        if !failed.is_empty() {
            let redo = rnd_bit_attempt(ctx, t, failed.len())?;
            for (slot, s) in failed.into_iter().zip(redo) {
                match s {
                    Some(share) => out[slot] = Some(share),
                    None => return Err(Error::BitCheckFailed),
                }
            }
        }
        Ok(out.into_iter().map(|s| s.expect("all slots filled")).collect())
    })
}

fn rnd_bit_attempt(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<Option<Share>>> {
    let n = ctx.n;
    let me = ctx.index;
    let two = BigUint::from(2u32);

    let mut rows: Vec<Vec<BigUint>> = vec![Vec::with_capacity(count); n];
    for _ in 0..count {
        let bit = {
            let drawn = BigUint::from(ctx.rng.next_u32() & 1);
            ctx.contribute("rnd_bit deal", drawn)
        };
        let parts = split_additive(t, &bit, n, &mut ctx.rng);
        for (row, p) in rows.iter_mut().zip(parts) {
            row.push(p);
        }
    }
    let got = ctx.scatter(FrameKind::Deal, "rnd_bit", rows)?;

    // layers[k] holds my share of every party's dealt bit number k.
    let mut layers: Vec<Vec<Share>> = Vec::with_capacity(count);
    for k in 0..count {
        let mut nodes = Vec::with_capacity(n);
        for batch in &got {
            let v = batch
                .get(k)
                .ok_or_else(|| Error::Codec("short bit deal batch".into()))?;
            nodes.push(Share::new(me, t.reduce(v), t));
        }
        layers.push(nodes);
    }

    loop {
        let width = layers[0].len();
        if width <= 1 {
            break;
        }
        let pairs = width / 2;
        let mut xs = Vec::with_capacity(pairs * count);
        let mut ys = Vec::with_capacity(pairs * count);
        for nodes in &layers {
            for p in 0..pairs {
                xs.push(nodes[2 * p].clone());
                ys.push(nodes[2 * p + 1].clone());
            }
        }
        let prods = mul_beaver_plain(ctx, &xs, &ys)?;
        let mut next_layers = Vec::with_capacity(count);
        for (bi, nodes) in layers.iter().enumerate() {
            let mut next = Vec::with_capacity(pairs + width % 2);
            for p in 0..pairs {
                let xy = &prods[bi * pairs + p];
                let folded = nodes[2 * p]
                    .add(&nodes[2 * p + 1])?
                    .sub(&xy.scale(&two))?;
                next.push(folded);
            }
            if width % 2 == 1 {
                next.push(nodes[width - 1].clone());
            }
            next_layers.push(next);
        }
        layers = next_layers;
    }

    let finals: Vec<Share> = layers
        .into_iter()
        .map(|mut nodes| nodes.pop().expect("tree leaves a root"))
        .collect();

    // Open a·(1−a); anything nonzero is a smuggled non-bit.
    let complements: Vec<Share> = finals
        .iter()
        .map(|a| a.neg().add_public(&BigUint::one()))
        .collect();
    let checks = mul_beaver_plain(ctx, &finals, &complements)?;
    let opened = open_shares(ctx, &checks)?;
    Ok(finals
        .into_iter()
        .zip(opened)
        .map(|(a, z)| if z.is_zero() { Some(a) } else { None })
        .collect())
}

/// Generate `count` pairs `([r], [r⁻¹])` with `r` uniform over the invertible
/// residues: draw `x, y`, open `u = x·y`, retry while `u` is not invertible,
/// and return `([x], u⁻¹·[y])`.
pub fn rnd_inv(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<(Share, Share)>> {
    Ok(rnd_inv_counted(ctx, t, count)?.0)
}

/// [`rnd_inv`] plus the total number of per-pair retries, for cost
/// instrumentation.
pub fn rnd_inv_counted(
    ctx: &mut PartyCtx,
    t: &Modulus,
    count: usize,
) -> Result<(Vec<(Share, Share)>, usize)> {
    if count == 0 {
        return Ok((Vec::new(), 0));
    }
    ctx.scoped("rnd_inv", |ctx| {
        let mut out: Vec<Option<(Share, Share)>> = vec![None; count];
        let mut pending: Vec<usize> = (0..count).collect();
        let mut retries = 0usize;
        while !pending.is_empty() {
            let xs = take_rndints(ctx, t, pending.len())?;
            let ys = take_rndints(ctx, t, pending.len())?;
            let us = mul_beaver_plain(ctx, &xs, &ys)?;
            let opened = open_shares(ctx, &us)?;
            let mut still = Vec::new();
            for (pos, slot) in pending.iter().copied().enumerate() {
                match t.inv(&opened[pos]) {
                    Some(uinv) => {
                        out[slot] = Some((xs[pos].clone(), ys[pos].scale(&uinv)));
                    }
                    None => still.push(slot),
                }
            }
            retries += still.len();
            pending = still;
        }
        let pairs = out.into_iter().map(|o| o.expect("loop fills every slot")).collect();
        Ok((pairs, retries))
    })
}

/// Generate `count` uniform `k`-bit shared integers along with their bit
/// decompositions, by composing `k` fresh shared bits each. Requires
/// `k < log₂ t`. Consumes no rounds when the store is stocked with bits.
pub fn prnd_int(
    ctx: &mut PartyCtx,
    t: &Modulus,
    k: usize,
    count: usize,
) -> Result<Vec<BitDecomposedRandom>> {
    if (k as u64) >= t.bits() {
        return Err(Error::Params(format!(
            "bit length {k} does not fit under a {}-bit modulus",
            t.bits()
        )));
    }
    let all = take_bits(ctx, t, k * count)?;
    let me = ctx.index;
    let mut out = Vec::with_capacity(count);
    for chunk in all.chunks(k.max(1)) {
        if k == 0 {
            break;
        }
        let mut composed = Share::zero(me, t);
        for (i, b) in chunk.iter().enumerate() {
            composed = composed.add(&b.scale(&pow2(i as u64)))?;
        }
        out.push(BitDecomposedRandom { bits: chunk.to_vec(), composed });
    }
    if k == 0 {
        out = (0..count)
            .map(|_| BitDecomposedRandom { bits: Vec::new(), composed: Share::zero(me, t) })
            .collect();
    }
    Ok(out)
}

/// Prefix products of invertible shared values, batched across independent
/// instances. For each instance `(a_1, …, a_ℓ)` the outputs are
/// `b_i = Π_{j≤i} a_j`, still shared.
///
/// The network cost is constant in `ℓ`: the inputs are masked with
/// `([r], [r⁻¹])` chain products, the masked values are opened, and the
/// public prefix products are unmasked locally against `[r⁻¹]`. A zero
/// opening (a non-invertible input) aborts the batch.
pub fn premulc_many(ctx: &mut PartyCtx, instances: &[Vec<Share>]) -> Result<Vec<Vec<Share>>> {
    let total: usize = instances.iter().map(|v| v.len()).sum();
    if total == 0 {
        return Ok(instances.iter().map(|_| Vec::new()).collect());
    }
    let t = instances
        .iter()
        .find(|v| !v.is_empty())
        .expect("total > 0")[0]
        .modulus
        .clone();
    ctx.scoped("premulc", |ctx| {
        let pairs = rnd_inv(ctx, &t, total)?;

        // Chain masks: w_1 = r_1 and w_i = r_i·r⁻¹_{i−1} within each instance,
        // so the opened m_i = w_i·a_i telescope into r_i·Π_{j≤i} a_j.
        let mut chain_x = Vec::with_capacity(total.saturating_sub(instances.len()));
        let mut chain_y = Vec::with_capacity(chain_x.capacity());
        let mut off = 0;
        for inst in instances {
            for i in 1..inst.len() {
                chain_x.push(pairs[off + i].0.clone());
                chain_y.push(pairs[off + i - 1].1.clone());
            }
            off += inst.len();
        }
        let chained = mul_beaver_plain(ctx, &chain_x, &chain_y)?;

        let mut masks = Vec::with_capacity(total);
        let mut off = 0;
        let mut ci = 0;
        for inst in instances {
            for i in 0..inst.len() {
                if i == 0 {
                    masks.push(pairs[off].0.clone());
                } else {
                    masks.push(chained[ci].clone());
                    ci += 1;
                }
            }
            off += inst.len();
        }

        let flat: Vec<Share> = instances.iter().flat_map(|v| v.iter().cloned()).collect();
        let masked = mul_beaver_plain(ctx, &masks, &flat)?;
        let opened = open_shares(ctx, &masked)?;
        if opened.iter().any(|m| m.is_zero()) {
            return Err(Error::Aborted(
                "prefix product opened a zero; an input was not invertible".into(),
            ));
        }

        let mut out = Vec::with_capacity(instances.len());
        let mut off = 0;
        for inst in instances {
            let mut res = Vec::with_capacity(inst.len());
            let mut prefix = BigUint::one();
            for i in 0..inst.len() {
                prefix = t.mul(&prefix, &opened[off + i]);
                res.push(pairs[off + i].1.scale(&prefix));
            }
            out.push(res);
            off += inst.len();
        }
        Ok(out)
    })
}

/// Single-instance [`premulc_many`].
pub fn premulc(ctx: &mut PartyCtx, inputs: &[Share]) -> Result<Vec<Share>> {
    Ok(premulc_many(ctx, &[inputs.to_vec()])?
        .pop()
        .expect("one instance in, one out"))
}

/// Shared inner products, batched across instances: each `(x, y)` pair of
/// equal-length share vectors yields `[Σ x_i·y_i]` using one multiplication
/// round for the whole batch and local summation.
pub fn inner_many(
    ctx: &mut PartyCtx,
    instances: &[(Vec<Share>, Vec<Share>)],
) -> Result<Vec<Share>> {
    for (x, y) in instances {
        if x.len() != y.len() {
            return Err(Error::Params(format!(
                "inner product length mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::Params("empty inner product".into()));
        }
    }
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    ctx.scoped("inner", |ctx| {
        let xs: Vec<Share> = instances.iter().flat_map(|(x, _)| x.iter().cloned()).collect();
        let ys: Vec<Share> = instances.iter().flat_map(|(_, y)| y.iter().cloned()).collect();
        let prods = mul_beaver_plain(ctx, &xs, &ys)?;
        let mut out = Vec::with_capacity(instances.len());
        let mut off = 0;
        for (x, _) in instances {
            let mut acc = prods[off].clone();
            for p in &prods[off + 1..off + x.len()] {
                acc = acc.add(p)?;
            }
            out.push(acc);
            off += x.len();
        }
        Ok(out)
    })
}

/// Single-instance [`inner_many`].
pub fn inner(ctx: &mut PartyCtx, x: &[Share], y: &[Share]) -> Result<Share> {
    Ok(inner_many(ctx, &[(x.to_vec(), y.to_vec())])?
        .pop()
        .expect("one instance in, one out"))
}

/// Extract the least significant bit of each small shared value `y_i`, where
/// `ks[i]` bounds `y_i < 2^{ks[i]}`. Masks each value with `2r + u` for a
/// fresh shared bit `u` and a `(k+κ−1)`-bit shared integer `r`, opens
/// `c = 2^{k−1} + y + 2r + u`, and returns `c₀ ⊕ u` still shared.
pub fn lsb_many(
    ctx: &mut PartyCtx,
    ys: &[Share],
    ks: &[usize],
    kappa: usize,
) -> Result<Vec<Share>> {
    if ys.len() != ks.len() {
        return Err(Error::Params("one bit bound per value required".into()));
    }
    if ys.is_empty() {
        return Ok(Vec::new());
    }
    let t = ys[0].modulus.clone();
    for &k in ks {
        if k == 0 {
            return Err(Error::Params("zero-width LSB extraction".into()));
        }
        // No-wrap bound: shift + (2^k − 1) + 2·(2^{k+κ−1} − 1) + 1 < t.
        let max_c = lsb_shift(k) + pow2(k as u64) + pow2((k + kappa) as u64);
        if t.value() <= &max_c {
            return Err(Error::Params(format!(
                "modulus too small for LSB masking at k={k}, kappa={kappa}"
            )));
        }
    }
    ctx.scoped("lsb", |ctx| {
        let two = BigUint::from(2u32);
        let us = take_bits(ctx, &t, ys.len())?;
        let mut rs = Vec::with_capacity(ys.len());
        for &k in ks {
            rs.push(
                prnd_int(ctx, &t, k + kappa - 1, 1)?
                    .pop()
                    .expect("one draw"),
            );
        }
        let mut cs = Vec::with_capacity(ys.len());
        for i in 0..ys.len() {
            let c = ys[i]
                .add(&rs[i].composed.scale(&two))?
                .add(&us[i])?
                .add_public(&lsb_shift(ks[i]));
            cs.push(c);
        }
        let opened = open_shares(ctx, &cs)?;
        let one = BigUint::one();
        let mut out = Vec::with_capacity(ys.len());
        for (c, u) in opened.iter().zip(&us) {
            if c.bit(0) {
                out.push(u.neg().add_public(&one));
            } else {
                out.push(u.clone());
            }
        }
        Ok(out)
    })
}

/// Additive constant used when masking for LSB extraction. It must be even so
/// the opened parity is `y₀ ⊕ u`; `2^{k−1}` qualifies except at `k = 1`,
/// where `2` is used instead.
fn lsb_shift(k: usize) -> BigUint {
    if k >= 2 {
        pow2((k - 1) as u64)
    } else {
        BigUint::from(2u32)
    }
}

fn public_bit_term(a: &BigUint, bits: &[Share], i: usize, me: usize, t: &Modulus) -> Share {
    if a.bit(i as u64) {
        Share::zero(me, t)
    } else {
        bits[i].clone()
    }
}

/// Compare a public integer against a bitwise-shared one, batched: each
/// instance `(a, bits)` yields a shared bit equal to `a < b` where
/// `b = Σ 2^i·bits[i]` (bits least significant first, all genuinely 0/1).
///
/// Two stages: the bitwise disagreement flags `d_i = a_i ⊕ b_i` are local
/// because `a` is public; prefix products of `d_i + 1` from the top bit down
/// weight each position by 2 for every higher disagreement, so the inner
/// product of those weights with `y_i = b_i·(1−a_i)` has `a < b` as its least
/// significant bit, which the masked-opening extraction recovers.
pub fn bit_lt_c_many(
    ctx: &mut PartyCtx,
    instances: &[(BigUint, Vec<Share>)],
    kappa: usize,
) -> Result<Vec<Share>> {
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    for (a, bits) in instances {
        if bits.is_empty() {
            return Err(Error::Params("comparison against zero shared bits".into()));
        }
        if a.bits() > bits.len() as u64 {
            return Err(Error::Params(format!(
                "public operand has {} bits but only {} shared bits given",
                a.bits(),
                bits.len()
            )));
        }
    }
    let t = instances[0].1[0].modulus.clone();
    let me = ctx.index;
    ctx.scoped("bit_lt_c", |ctx| {
        let one = BigUint::one();

        // Disagreement chain, most significant bit first, skipping bit 0:
        // premulc runs over (d_{k−1}+1, …, d_1+1).
        let mut chains = Vec::with_capacity(instances.len());
        for (a, bits) in instances {
            let k = bits.len();
            let mut chain = Vec::with_capacity(k - 1);
            for i in (1..k).rev() {
                let d = if a.bit(i as u64) {
                    bits[i].neg().add_public(&one)
                } else {
                    bits[i].clone()
                };
                chain.push(d.add_public(&one));
            }
            chains.push(chain);
        }
        let prefixes = premulc_many(ctx, &chains)?;

        // x_i = Π_{j>i}(d_j+1) is prefixes[k−2−i]; y_i = b_i·(1−a_i).
        let mut inner_insts = Vec::new();
        let mut tops = Vec::with_capacity(instances.len());
        for (idx, (a, bits)) in instances.iter().enumerate() {
            let k = bits.len();
            tops.push(public_bit_term(a, bits, k - 1, me, &t));
            if k >= 2 {
                let xs: Vec<Share> = (0..=k - 2)
                    .map(|i| prefixes[idx][k - 2 - i].clone())
                    .collect();
                let ys: Vec<Share> = (0..=k - 2)
                    .map(|i| public_bit_term(a, bits, i, me, &t))
                    .collect();
                inner_insts.push((xs, ys));
            }
        }
        let sums = inner_many(ctx, &inner_insts)?;

        let mut weighted = Vec::with_capacity(instances.len());
        let mut si = 0;
        for (idx, (_, bits)) in instances.iter().enumerate() {
            if bits.len() >= 2 {
                weighted.push(tops[idx].add(&sums[si])?);
                si += 1;
            } else {
                weighted.push(tops[idx].clone());
            }
        }

        let ks: Vec<usize> = instances.iter().map(|(_, bits)| bits.len()).collect();
        lsb_many(ctx, &weighted, &ks, kappa)
    })
}

/// Single-instance [`bit_lt_c_many`].
pub fn bit_lt_c(
    ctx: &mut PartyCtx,
    a: &BigUint,
    b_bits: &[Share],
    kappa: usize,
) -> Result<Share> {
    Ok(bit_lt_c_many(ctx, &[(a.clone(), b_bits.to_vec())], kappa)?
        .pop()
        .expect("one instance in, one out"))
}

/// Batched sign test: for each share `x` interpreted as a signed `k`-bit
/// value under the centered lift, return a shared bit equal to `x ≥ 0`.
///
/// Masks `x + 2^{k−1}` (a nonnegative `k`-bit integer) with
/// `2^{k−1}·r″ + r′` built from fresh shared bits, opens the sum `c`, and
/// reconstructs the low `k−1` bits of `x` as `x′ = c′ − r′ + 2^{k−1}·u` with
/// `c′ = c mod 2^{k−1}` and `u = [c′ < r′]` from [`bit_lt_c_many`]. The sign
/// then falls out of the exact division `s = 1 + (x − x′)·2^{−(k−1)}`. The
/// modulus must hold `k + κ + 1` bits of headroom so the masked opening never
/// wraps. Online rounds are constant in `k` and the batch size when masks and
/// bits come from the preprocessing store.
pub fn gez_many(ctx: &mut PartyCtx, xs: &[Share], k: usize, kappa: usize) -> Result<Vec<Share>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    if k < 3 {
        return Err(Error::Params("sign test needs k >= 3 payload bits".into()));
    }
    let t = xs[0].modulus.clone();
    // Exact no-wrap bound: 2^{k−1}·(2^{κ+1}−1) + (2^{k−1}−1) + 2^{k−1} + (2^k−1) < t.
    let max_c = pow2((k - 1) as u64) * (pow2((kappa + 1) as u64) - BigUint::one())
        + (pow2((k - 1) as u64) - BigUint::one())
        + pow2((k - 1) as u64)
        + (pow2(k as u64) - BigUint::one());
    if t.value() <= &max_c {
        return Err(Error::Params(format!(
            "modulus has insufficient headroom for a sign test at k={k}, kappa={kappa}"
        )));
    }
    ctx.scoped("gez", |ctx| {
        let count = xs.len();
        let shift = pow2((k - 1) as u64);
        let rp = prnd_int(ctx, &t, k - 1, count)?;
        let rpp = prnd_int(ctx, &t, kappa + 1, count)?;

        let mut cs = Vec::with_capacity(count);
        for i in 0..count {
            let c = xs[i]
                .add(&rp[i].composed)?
                .add(&rpp[i].composed.scale(&shift))?
                .add_public(&shift);
            cs.push(c);
        }
        let opened = open_shares(ctx, &cs)?;

        let lows: Vec<(BigUint, Vec<Share>)> = opened
            .iter()
            .zip(&rp)
            .map(|(c, r)| (c % &shift, r.bits.clone()))
            .collect();
        let us = bit_lt_c_many(ctx, &lows, kappa)?;

        let inv_shift = t
            .inv(&t.reduce(&shift))
            .ok_or_else(|| Error::Params("modulus must be odd for the sign test".into()))?;
        let one = BigUint::one();
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let x_low = us[i]
                .scale(&shift)
                .sub(&rp[i].composed)?
                .add_public(&lows[i].0);
            let s = xs[i].sub(&x_low)?.scale(&inv_shift).add_public(&one);
            out.push(s);
        }
        Ok(out)
    })
}

/// Single-instance [`gez_many`].
pub fn gez(ctx: &mut PartyCtx, x: &Share, k: usize, kappa: usize) -> Result<Share> {
    Ok(gez_many(ctx, std::slice::from_ref(x), k, kappa)?
        .pop()
        .expect("one instance in, one out"))
}
