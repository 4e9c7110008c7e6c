//! Moving additively shared values between moduli.
//!
//! Offline material lives in ℤ_N for an RSA modulus N while the online phase
//! runs in a prime field ℤ_Q with n < Q < N, so shares must cross moduli
//! without reconstruction. The whole stack reduces to one quantity: the wrap
//! count δ = ⌊Σ x_i / N⌋ of a sharing's integer sum. [`lift_wrap_many`]
//! extracts δ inside a strictly larger space N′ > N² where the share-sum
//! identity holds over the integers, using one batched sign test per possible
//! wrap. From there: [`lift_mod_many`] rewrites shares into ℤ_{N′},
//! [`drop_mod_many`] comes back down by masking with a bit-built random value
//! shared in both moduli, [`wrap_many`] returns δ shared in the source
//! modulus, [`sha_conv_many`] rewrites a sharing into ℤ_Q by local reduction
//! minus δ·(N mod Q), and [`trip_conv_many`] converts whole Beaver triples by
//! additionally computing the product defect σ·N = a·b − c in the lift space
//! and folding σ·N mod Q back into c.
//!
//! [`ModulusTower`] picks the lift spaces deterministically: the smallest
//! primes clearing every size requirement (lift-space inequalities, masking
//! widths, and the sign test's no-wrap headroom). Primes rather than RSA
//! moduli keep the sign tests free of a second key setup. All operations
//! batch: one call converts a vector in the same number of rounds as a
//! single element.

use num_bigint::BigUint;
use num_traits::One;

use crate::comparison::{gez_many, take_bits};
use crate::engine::PartyCtx;
use crate::modular::{pow2, Modulus};
use crate::primes::{is_prime, next_prime};
use crate::sharing::{mul_beaver_plain, open_shares, Share};
use crate::{Error, Result};

/// Shared wrap count δ of a sharing; δ reconstructs to a value in [0, n−1].
#[derive(Debug, Clone)]
pub struct WrapCount {
    pub delta: Share,
}

/// The moduli a deployment converts across: RSA modulus N for offline
/// material, online prime Q, and two lift spaces — `lift` (N′ > N²) for wrap
/// extraction out of ℤ_N and `lift2` (N″ > N′²) for wrap extraction out of
/// ℤ_{N′} during triple conversion.
#[derive(Debug, Clone)]
pub struct ModulusTower {
    pub rsa: Modulus,
    pub q: Modulus,
    pub lift: Modulus,
    pub lift2: Modulus,
    pub kappa: usize,
    pub parties: usize,
}

/// Signed bit width covering every sign-test argument in a wrap extraction
/// over `s`: the share sum lies in [0, n·s) and the tested differences in
/// (−n·s, n·s).
pub(crate) fn lift_width(parties: usize, s: &Modulus) -> usize {
    ((BigUint::from(parties) * s.value()).bits() + 2) as usize
}

/// Smallest modulus that admits a sign test at width `k` and masking
/// parameter `kappa` without the masked opening wrapping.
fn gez_floor(k: usize, kappa: usize) -> BigUint {
    pow2((k - 1) as u64) * (pow2((kappa + 1) as u64) + BigUint::from(3u32))
}

impl ModulusTower {
    /// Validate `parties < Q < N` with `Q` prime, then pick both lift primes
    /// by a deterministic walk from their size floors.
    pub fn new(parties: usize, rsa: &Modulus, q: &Modulus, kappa: usize) -> Result<Self> {
        if !is_prime(q.value()) {
            return Err(Error::Params("online modulus must be prime".into()));
        }
        if BigUint::from(parties) >= *q.value() {
            return Err(Error::Params(format!(
                "party count {parties} must stay below the online modulus"
            )));
        }
        if q.value() >= rsa.value() {
            return Err(Error::Params(
                "online prime must be smaller than the offline RSA modulus".into(),
            ));
        }
        let lift = Modulus::new(next_prime(&lift_floor(parties, rsa, q, kappa)));
        let lift2 = Modulus::new(next_prime(&lift2_floor(parties, &lift, kappa)));
        Ok(ModulusTower {
            rsa: rsa.clone(),
            q: q.clone(),
            lift,
            lift2,
            kappa,
            parties,
        })
    }
}

fn lift_floor(parties: usize, rsa: &Modulus, q: &Modulus, kappa: usize) -> BigUint {
    let square = rsa.value() * rsa.value();
    let masked = pow2(kappa as u64) * rsa.value();
    let masked_sq = &masked * &masked;
    let headroom_n = gez_floor(lift_width(parties, rsa), kappa);
    let headroom_q = gez_floor(lift_width(parties, q), kappa);
    let mut floor = square;
    for bound in [masked_sq, headroom_n, headroom_q] {
        if bound > floor {
            floor = bound;
        }
    }
    floor + BigUint::one()
}

fn lift2_floor(parties: usize, lift: &Modulus, kappa: usize) -> BigUint {
    let square = lift.value() * lift.value();
    let headroom = gez_floor(lift_width(parties, lift), kappa);
    let floor = if headroom > square { headroom } else { square };
    floor + BigUint::one()
}

/// Extract the shared wrap counts of `xs` (all over one source modulus)
/// inside the lift space `np > source²`: each party lifts its share verbatim,
/// and δ = Σ_{j=1}^{n−1} [share-sum ≥ j·source] falls out of n−1 batched
/// sign tests per element.
pub fn lift_wrap_many(
    ctx: &mut PartyCtx,
    xs: &[Share],
    np: &Modulus,
    kappa: usize,
) -> Result<Vec<WrapCount>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let s = xs[0].modulus.clone();
    if np.value() <= &(s.value() * s.value()) {
        return Err(Error::Params(
            "lift space must exceed the square of the source modulus".into(),
        ));
    }
    let me = ctx.index;
    let n = ctx.n;
    if n == 1 {
        // A lone share never wraps.
        return Ok(xs
            .iter()
            .map(|_| WrapCount { delta: Share::zero(me, np) })
            .collect());
    }
    ctx.scoped("lift_wrap", |ctx| {
        let k = lift_width(n, &s);
        let mut args = Vec::with_capacity(xs.len() * (n - 1));
        for x in xs {
            let lifted = Share::new(me, x.value.clone(), np);
            for j in 1..n {
                let jn = np.reduce(&(BigUint::from(j) * s.value()));
                args.push(lifted.add_public(&np.neg(&jn)));
            }
        }
        let flags = gez_many(ctx, &args, k, kappa)?;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in flags.chunks(n - 1) {
            let mut delta = chunk[0].clone();
            for f in &chunk[1..] {
                delta = delta.add(f)?;
            }
            out.push(WrapCount { delta });
        }
        Ok(out)
    })
}

/// Single-instance [`lift_wrap_many`].
pub fn lift_wrap(ctx: &mut PartyCtx, x: &Share, np: &Modulus, kappa: usize) -> Result<WrapCount> {
    Ok(lift_wrap_many(ctx, std::slice::from_ref(x), np, kappa)?
        .pop()
        .expect("one instance in, one out"))
}

fn lift_with_deltas(
    xs: &[Share],
    deltas: &[WrapCount],
    np: &Modulus,
    me: usize,
) -> Result<Vec<Share>> {
    let s = &xs[0].modulus;
    let mut out = Vec::with_capacity(xs.len());
    for (x, d) in xs.iter().zip(deltas) {
        let lifted = Share::new(me, x.value.clone(), np);
        out.push(lifted.sub(&d.delta.scale(s.value()))?);
    }
    Ok(out)
}

/// Rewrite shares over the source modulus into the lift space `np` without
/// changing the reconstructed value: x′_i = x_i − δ_i·source (mod np).
pub fn lift_mod_many(
    ctx: &mut PartyCtx,
    xs: &[Share],
    np: &Modulus,
    kappa: usize,
) -> Result<Vec<Share>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let deltas = lift_wrap_many(ctx, xs, np, kappa)?;
    lift_with_deltas(xs, &deltas, np, ctx.index)
}

/// Single-instance [`lift_mod_many`].
pub fn lift_mod(ctx: &mut PartyCtx, x: &Share, np: &Modulus, kappa: usize) -> Result<Share> {
    Ok(lift_mod_many(ctx, std::slice::from_ref(x), np, kappa)?
        .pop()
        .expect("one instance in, one out"))
}

/// Drop shares from a lift space down to `target`. Correct only when each
/// reconstructed value is below `target`; callers assert this (wrap counts
/// and product defects are bounded by construction, and a runtime check
/// would need the very comparison machinery this underpins). Masks with a
/// random `r` built from ⌈log target⌉+κ shared bits held in both moduli,
/// opens y = x + r in the lift space, and returns (y mod target) − [r].
pub fn drop_mod_many(
    ctx: &mut PartyCtx,
    xs: &[Share],
    target: &Modulus,
    kappa: usize,
) -> Result<Vec<Share>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let np = xs[0].modulus.clone();
    let masked = pow2(kappa as u64) * target.value();
    if np.value() <= &(&masked * &masked) {
        return Err(Error::Params(
            "lift space too small to mask a drop to this target".into(),
        ));
    }
    let m = target.bits() as usize + kappa;
    let me = ctx.index;
    ctx.scoped("drop_mod", |ctx| {
        let bits_t = take_bits(ctx, target, m * xs.len())?;
        let bits_np = lift_mod_many(ctx, &bits_t, &np, kappa)?;

        let mut opened_args = Vec::with_capacity(xs.len());
        let mut r_target = Vec::with_capacity(xs.len());
        for (e, x) in xs.iter().enumerate() {
            let mut r_np = Share::zero(me, &np);
            let mut r_t = Share::zero(me, target);
            for i in 0..m {
                r_np = r_np.add(&bits_np[e * m + i].scale(&pow2(i as u64)))?;
                r_t = r_t.add(&bits_t[e * m + i].scale(&target.reduce(&pow2(i as u64))))?;
            }
            opened_args.push(x.add(&r_np)?);
            r_target.push(r_t);
        }
        let ys = open_shares(ctx, &opened_args)?;
        let mut out = Vec::with_capacity(xs.len());
        for (y, r_t) in ys.iter().zip(&r_target) {
            out.push(r_t.neg().add_public(&target.reduce(y)));
        }
        Ok(out)
    })
}

/// Single-instance [`drop_mod_many`].
pub fn drop_mod(ctx: &mut PartyCtx, x: &Share, target: &Modulus, kappa: usize) -> Result<Share> {
    Ok(drop_mod_many(ctx, std::slice::from_ref(x), target, kappa)?
        .pop()
        .expect("one instance in, one out"))
}

/// Wrap counts shared in the source modulus itself: lift-extract δ in `np`,
/// then drop it back down (always valid since δ < n < source).
pub fn wrap_many(
    ctx: &mut PartyCtx,
    xs: &[Share],
    np: &Modulus,
    kappa: usize,
) -> Result<Vec<WrapCount>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let s = xs[0].modulus.clone();
    ctx.scoped("wrap", |ctx| {
        let deltas = lift_wrap_many(ctx, xs, np, kappa)?;
        let delta_shares: Vec<Share> = deltas.into_iter().map(|w| w.delta).collect();
        let dropped = drop_mod_many(ctx, &delta_shares, &s, kappa)?;
        Ok(dropped
            .into_iter()
            .map(|delta| WrapCount { delta })
            .collect())
    })
}

/// Single-instance [`wrap_many`].
pub fn wrap(ctx: &mut PartyCtx, x: &Share, np: &Modulus, kappa: usize) -> Result<WrapCount> {
    Ok(wrap_many(ctx, std::slice::from_ref(x), np, kappa)?
        .pop()
        .expect("one instance in, one out"))
}

/// Convert shares over the source modulus `N` into the prime field `q`
/// (`n < q < N`): extract δ in the lift space, drop δ to `q`, and finish
/// locally with x′_i = (x_i mod q) − δ_i·(N mod q).
pub fn sha_conv_many(
    ctx: &mut PartyCtx,
    xs: &[Share],
    q: &Modulus,
    np: &Modulus,
    kappa: usize,
) -> Result<Vec<Share>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let s = xs[0].modulus.clone();
    if q.value() >= s.value() || BigUint::from(ctx.n) >= *q.value() {
        return Err(Error::Params(
            "share conversion requires parties < target prime < source modulus".into(),
        ));
    }
    let me = ctx.index;
    ctx.scoped("sha_conv", |ctx| {
        let deltas = lift_wrap_many(ctx, xs, np, kappa)?;
        let delta_shares: Vec<Share> = deltas.into_iter().map(|w| w.delta).collect();
        let dq = drop_mod_many(ctx, &delta_shares, q, kappa)?;
        let n_mod_q = q.reduce(s.value());
        let mut out = Vec::with_capacity(xs.len());
        for (x, d) in xs.iter().zip(&dq) {
            let local = Share::new(me, q.reduce(&x.value), q);
            out.push(local.sub(&d.scale(&n_mod_q))?);
        }
        Ok(out)
    })
}

/// Single-instance [`sha_conv_many`].
pub fn sha_conv(
    ctx: &mut PartyCtx,
    x: &Share,
    q: &Modulus,
    np: &Modulus,
    kappa: usize,
) -> Result<Share> {
    Ok(sha_conv_many(ctx, std::slice::from_ref(x), q, np, kappa)?
        .pop()
        .expect("one instance in, one out"))
}

/// Convert Beaver triples from ℤ_N to ℤ_Q. The a and b components convert by
/// value; c picks up the product defect: over the integers a·b = c + σ·N, so
/// after lifting all three components into the first lift space, σ·N = a·b − c
/// comes from one Beaver multiplication there (consuming one lift-space triple
/// per converted triple), converts to ℤ_Q through the second lift space, and
/// corrects c′ = c_Q + (σ·N)_Q. Each component's wrap count is extracted once
/// and reused for both its lift and its field conversion.
pub fn trip_conv_many(
    ctx: &mut PartyCtx,
    triples: &[(Share, Share, Share)],
    tower: &ModulusTower,
) -> Result<Vec<(Share, Share, Share)>> {
    if triples.is_empty() {
        return Ok(Vec::new());
    }
    let me = ctx.index;
    ctx.scoped("trip_conv", |ctx| {
        let mut flat = Vec::with_capacity(3 * triples.len());
        for (a, b, c) in triples {
            flat.push(a.clone());
            flat.push(b.clone());
            flat.push(c.clone());
        }
        let s = flat[0].modulus.clone();

        // One wrap extraction per component, reused twice.
        let deltas = lift_wrap_many(ctx, &flat, &tower.lift, tower.kappa)?;
        let lifted = lift_with_deltas(&flat, &deltas, &tower.lift, me)?;
        let delta_shares: Vec<Share> = deltas.into_iter().map(|w| w.delta).collect();
        let dq = drop_mod_many(ctx, &delta_shares, &tower.q, tower.kappa)?;
        let n_mod_q = tower.q.reduce(s.value());
        let in_field: Vec<Share> = flat
            .iter()
            .zip(&dq)
            .map(|(x, d)| {
                Share::new(me, tower.q.reduce(&x.value), &tower.q).sub(&d.scale(&n_mod_q))
            })
            .collect::<Result<_>>()?;

        // σ·N = a·b − c in the lift space.
        let lift_a: Vec<Share> = lifted.chunks(3).map(|t| t[0].clone()).collect();
        let lift_b: Vec<Share> = lifted.chunks(3).map(|t| t[1].clone()).collect();
        let prods = mul_beaver_plain(ctx, &lift_a, &lift_b)?;
        let sigma_n: Vec<Share> = prods
            .iter()
            .zip(lifted.chunks(3))
            .map(|(ab, t)| ab.sub(&t[2]))
            .collect::<Result<_>>()?;

        let sigma_q = sha_conv_many(ctx, &sigma_n, &tower.q, &tower.lift2, tower.kappa)?;

        let mut out = Vec::with_capacity(triples.len());
        for (i, field) in in_field.chunks(3).enumerate() {
            let c_q = field[2].add(&sigma_q[i])?;
            out.push((field[0].clone(), field[1].clone(), c_q));
        }
        Ok(out)
    })
}

/// Single-instance [`trip_conv_many`].
pub fn trip_conv(
    ctx: &mut PartyCtx,
    triple: &(Share, Share, Share),
    tower: &ModulusTower,
) -> Result<(Share, Share, Share)> {
    Ok(trip_conv_many(ctx, std::slice::from_ref(triple), tower)?
        .pop()
        .expect("one instance in, one out"))
}
