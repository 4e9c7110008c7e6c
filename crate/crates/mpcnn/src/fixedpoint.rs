//! Fixed-point arithmetic over authenticated shares in the online prime field.
//!
//! A real x with |x| < 2^{e−1} is carried as the integer round(x·2^f),
//! centered-lifted into ℤ_Q, inside an authenticated share. Multiplication
//! doubles the fraction scale, so products are brought back to f fraction
//! bits by truncation: [`trunc_pr_many`] rounds probabilistically in one
//! online round (the floor plus a Bernoulli carry whose probability is the
//! discarded fraction), while [`trunc_many`] pays a few more rounds for the
//! exact signed floor, recovering the discarded low bits with a
//! bitwise-comparison correction. [`fx_gez_many`] exposes the sign test at
//! width e+f.
//!
//! The truncation masks are built from shared random bits carrying MAC
//! shares, so every opened value in the one-round path joins the deferred
//! MAC queue. Sub-protocols that run on bare value shares (the sign test and
//! the low-bit comparison) return unauthenticated outputs; [`authenticate`]
//! re-tags them with one multiplication by the shared MAC key. The tag
//! certifies downstream use of whatever value the sub-protocol produced —
//! integrity inside those sub-protocols rests on their own validity checks,
//! not on the MAC.

use num_bigint::{BigInt, BigUint};
use num_traits::{One, ToPrimitive};

use crate::comparison::{bit_lt_c_many, gez_many, rnd_bit};
use crate::engine::PartyCtx;
use crate::modular::{pow2, Modulus};
use crate::primes::{is_prime, next_prime};
use crate::sharing::{
    mul_beaver, mul_beaver_plain, open_auth, share_input_auth, AuthShare, Share,
};
use crate::{Error, Result};

/// Encoding geometry: e integer bits (sign included), f fraction bits, a
/// statistical masking parameter, and the online prime.
#[derive(Debug, Clone)]
pub struct FxParams {
    pub e: usize,
    pub f: usize,
    pub kappa: usize,
    pub q: Modulus,
}

impl FxParams {
    pub fn new(e: usize, f: usize, kappa: usize, q: Modulus) -> Result<Self> {
        if f == 0 {
            return Err(Error::Params("at least one fraction bit required".into()));
        }
        if e + f < 3 {
            return Err(Error::Params("encoding narrower than three bits".into()));
        }
        if ((e + f + kappa) as u64) > q.bits() {
            return Err(Error::Params(format!(
                "{}+{} value bits with {kappa} masking bits exceed the {}-bit modulus",
                e,
                f,
                q.bits()
            )));
        }
        Ok(FxParams { e, f, kappa, q })
    }

    /// Total value width e+f.
    pub fn k(&self) -> usize {
        self.e + self.f
    }

    /// Small profile for tests: 4.8 fixed point, κ=8, Q = 2^32 − 5.
    pub fn testing() -> Self {
        FxParams {
            e: 4,
            f: 8,
            kappa: 8,
            q: Modulus::from_u64(4_294_967_291),
        }
    }

    /// Deployment profile: 12.52 fixed point (64-bit values), κ=80, Q the
    /// smallest prime above 2^145.
    pub fn production() -> Self {
        FxParams {
            e: 12,
            f: 52,
            kappa: 80,
            q: Modulus::new(next_prime(&(pow2(145) + BigUint::one()))),
        }
    }

    pub fn compatible(&self, other: &FxParams) -> bool {
        self.e == other.e && self.f == other.f && self.kappa == other.kappa && self.q.same(&other.q)
    }
}

/// Authenticated share of a fixed-point value.
#[derive(Debug, Clone)]
pub struct FxShare {
    pub inner: AuthShare,
    pub params: FxParams,
}

impl FxShare {
    fn check(&self, other: &FxShare) -> Result<()> {
        if !self.params.compatible(&other.params) {
            return Err(Error::Params("mixed fixed-point parameters".into()));
        }
        Ok(())
    }

    pub fn add(&self, other: &FxShare) -> Result<FxShare> {
        self.check(other)?;
        Ok(FxShare { inner: self.inner.add(&other.inner)?, params: self.params.clone() })
    }

    pub fn sub(&self, other: &FxShare) -> Result<FxShare> {
        self.check(other)?;
        Ok(FxShare { inner: self.inner.sub(&other.inner)?, params: self.params.clone() })
    }

    pub fn neg(&self) -> FxShare {
        FxShare { inner: self.inner.neg(), params: self.params.clone() }
    }

    /// Scale by a raw field constant (an integer, not an encoded real).
    pub fn scale_int(&self, k: &BigUint) -> FxShare {
        FxShare { inner: self.inner.scale(k), params: self.params.clone() }
    }
}

/// Zero with the epoch, modulus, and geometry of a reference share.
pub fn fx_zero_like(reference: &FxShare) -> FxShare {
    let t = reference.inner.modulus();
    FxShare {
        inner: AuthShare::new(
            Share::zero(reference.inner.value.owner, t),
            Share::zero(reference.inner.mac.owner, t),
            reference.inner.key_id,
        ),
        params: reference.params.clone(),
    }
}

/// Signed fixed-point integer behind a real: round(x·2^f) half away from
/// zero. Rejects values whose rounded magnitude reaches 2^{e−1+f}. The single
/// rounding definition shared by the protocol encoder and the plaintext
/// reference pipeline.
pub fn fx_encode_int(x: f64, p: &FxParams) -> Result<i128> {
    if !x.is_finite() {
        return Err(Error::Params("cannot encode a non-finite value".into()));
    }
    // Scaling by a power of two is exact in binary floating point, so the
    // only rounding is the intended half-away-from-zero step.
    let rounded = (x * f64::powi(2.0, p.f as i32)).round();
    if rounded.abs() >= f64::powi(2.0, (p.k() - 1) as i32) {
        return Err(Error::Params(format!(
            "{x} overflows a {}-integer-bit encoding",
            p.e
        )));
    }
    Ok(rounded as i128)
}

/// Encode a real into its ℤ_Q residue: [`fx_encode_int`], centered lift.
pub fn fx_encode(x: f64, p: &FxParams) -> Result<BigUint> {
    Ok(p.q.reduce_int(&BigInt::from(fx_encode_int(x, p)?)))
}

/// Signed integer behind a residue (units of 2^{−f}).
pub fn fx_lift(v: &BigUint, p: &FxParams) -> BigInt {
    p.q.lift_signed(v)
}

/// Decode a residue back to a real.
pub fn fx_decode(v: &BigUint, p: &FxParams) -> f64 {
    let signed = p.q.lift_signed(v);
    signed.to_f64().unwrap_or(f64::NAN) / f64::powi(2.0, p.f as i32)
}

/// Attach MAC shares to values produced by unauthenticated sub-protocols:
/// one Beaver multiplication by the shared MAC key per value, one round per
/// batch. Any deviation in this step corrupts only the tag and surfaces at
/// the next MAC check.
pub fn authenticate(ctx: &mut PartyCtx, plain: &[Share]) -> Result<Vec<AuthShare>> {
    if plain.is_empty() {
        return Ok(Vec::new());
    }
    let t = plain[0].modulus.clone();
    let session = ctx.mac_session_mut(&t)?;
    let epoch = session.key_id;
    let alpha = session.alpha_share.clone();
    let me = ctx.index;
    let alphas: Vec<Share> = plain
        .iter()
        .map(|_| Share::new(me, alpha.clone(), &t))
        .collect();
    let macs = mul_beaver_plain(ctx, &alphas, plain)?;
    Ok(plain
        .iter()
        .zip(macs)
        .map(|(v, m)| AuthShare::new(v.clone(), m, epoch))
        .collect())
}

/// Authenticated shared bits, store first: stored bits must carry MAC
/// shares; any shortfall is generated online and re-tagged.
pub fn take_auth_bits(ctx: &mut PartyCtx, t: &Modulus, count: usize) -> Result<Vec<AuthShare>> {
    let epoch = ctx.mac_session_mut(t)?.key_id;
    let stocked = ctx.store.count_bits(t).min(count);
    let me = ctx.index;
    let mut out = Vec::with_capacity(count);
    for _ in 0..stocked {
        let rec = ctx.store.take_bit(t)?;
        let mac = rec.mac.ok_or_else(|| {
            Error::Params("stored bit lacks a MAC share in an authenticated context".into())
        })?;
        out.push(AuthShare::new(
            Share::new(me, rec.b, t),
            Share::new(me, mac, t),
            epoch,
        ));
    }
    if out.len() < count {
        let fresh = rnd_bit(ctx, t, count - out.len())?;
        out.extend(authenticate(ctx, &fresh)?);
    }
    Ok(out)
}

/// Largest masking parameter ≤ the configured κ for which an opened
/// `width`-bit value plus its mask stays under Q. Products occupy e+2f bits,
/// more than the k+κ+1 the modulus was sized for, so their truncation runs
/// with however much padding is left.
pub(crate) fn mask_kappa(p: &FxParams, width: usize) -> Result<usize> {
    let mut kappa = p.kappa;
    loop {
        if kappa == 0 {
            return Err(Error::Params(format!(
                "modulus cannot mask a {width}-bit truncation"
            )));
        }
        let max_c = pow2(width as u64) + pow2((width + kappa) as u64) - BigUint::from(2u32);
        if p.q.value() > &max_c {
            return Ok(kappa);
        }
        kappa -= 1;
    }
}

struct TruncOpening {
    /// Low m bits of each opened masked value.
    c_low: Vec<BigUint>,
    /// Composed low mask r′ per element (authenticated).
    r_low: Vec<AuthShare>,
    /// Plain halves of the low mask bits per element, LSB first.
    r_low_bits: Vec<Vec<Share>>,
}

/// Shared masking front end of both truncations: open c = x + 2^{width−1} +
/// 2^m·r″ + r′ with fresh authenticated bits, one round per batch.
fn trunc_open(
    ctx: &mut PartyCtx,
    xs: &[FxShare],
    m: usize,
    width: usize,
    kappa: usize,
) -> Result<TruncOpening> {
    let p = &xs[0].params;
    let t = p.q.clone();
    let per = width + kappa;
    let bits = take_auth_bits(ctx, &t, per * xs.len())?;
    let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
    let shift = pow2((width - 1) as u64);

    let mut c_args = Vec::with_capacity(xs.len());
    let mut r_low = Vec::with_capacity(xs.len());
    let mut r_low_bits = Vec::with_capacity(xs.len());
    for (e, x) in xs.iter().enumerate() {
        let chunk = &bits[e * per..(e + 1) * per];
        let mut rp = chunk[0].clone();
        for (i, b) in chunk[..m].iter().enumerate().skip(1) {
            rp = rp.add(&b.scale(&pow2(i as u64)))?;
        }
        let mut rpp = chunk[m].clone();
        for (i, b) in chunk[m..].iter().enumerate().skip(1) {
            rpp = rpp.add(&b.scale(&pow2(i as u64)))?;
        }
        c_args.push(
            x.inner
                .add(&rp)?
                .add(&rpp.scale(&pow2(m as u64)))?
                .add_public(&shift, &alpha),
        );
        r_low.push(rp);
        r_low_bits.push(chunk[..m].iter().map(|b| b.value.clone()).collect());
    }
    let cs = open_auth(ctx, &c_args)?;
    let two_m = pow2(m as u64);
    Ok(TruncOpening {
        c_low: cs.iter().map(|c| c % &two_m).collect(),
        r_low,
        r_low_bits,
    })
}

/// Probabilistic truncation by m bits at an explicit signed bit width:
/// result = ⌊x/2^m⌋ + β with Pr[β=1] equal to the discarded fraction.
/// One online round when the bit store is stocked.
pub fn trunc_pr_width(
    ctx: &mut PartyCtx,
    xs: &[FxShare],
    m: usize,
    width: usize,
) -> Result<Vec<FxShare>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    if m == 0 {
        return Ok(xs.to_vec());
    }
    let p = xs[0].params.clone();
    if m >= width {
        return Err(Error::Params(format!(
            "cannot drop {m} of {width} value bits"
        )));
    }
    let kappa = mask_kappa(&p, width)?;
    let t = p.q.clone();
    ctx.scoped("trunc_pr", |ctx| {
        let opening = trunc_open(ctx, xs, m, width, kappa)?;
        let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
        let shift = pow2((width - 1) as u64);
        let inv2m = t
            .inv(&t.reduce(&pow2(m as u64)))
            .expect("odd prime modulus");
        let out_shift = pow2((width - 1 - m) as u64);
        let mut out = Vec::with_capacity(xs.len());
        for (e, x) in xs.iter().enumerate() {
            // (x + 2^{width−1} + r′ − c′)·2^{−m} − 2^{width−1−m}
            let base = x
                .inner
                .add_public(&shift, &alpha)
                .add(&opening.r_low[e])?
                .sub_public(&opening.c_low[e], &alpha);
            let inner = base.scale(&inv2m).sub_public(&out_shift, &alpha);
            out.push(FxShare { inner, params: p.clone() });
        }
        Ok(out)
    })
}

/// [`trunc_pr_width`] at the parameter width e+f.
pub fn trunc_pr_many(ctx: &mut PartyCtx, xs: &[FxShare], m: usize) -> Result<Vec<FxShare>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let width = xs[0].params.k();
    trunc_pr_width(ctx, xs, m, width)
}

/// Single-instance [`trunc_pr_many`].
pub fn trunc_pr(ctx: &mut PartyCtx, x: &FxShare, m: usize) -> Result<FxShare> {
    Ok(trunc_pr_many(ctx, std::slice::from_ref(x), m)?
        .pop()
        .expect("one instance in, one out"))
}

/// Exact truncation: the signed floor ⌊x/2^m⌋ with zero error. Costs the
/// probabilistic path plus a bitwise comparison on the discarded bits and
/// one re-tagging multiplication; rounds stay constant in batch size.
pub fn trunc_many(ctx: &mut PartyCtx, xs: &[FxShare], m: usize) -> Result<Vec<FxShare>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    if m == 0 {
        return Ok(xs.to_vec());
    }
    let p = xs[0].params.clone();
    let width = p.k();
    if m >= width {
        return Err(Error::Params(format!(
            "cannot drop {m} of {width} value bits"
        )));
    }
    let kappa = mask_kappa(&p, width)?;
    let t = p.q.clone();
    ctx.scoped("trunc", |ctx| {
        let opening = trunc_open(ctx, xs, m, width, kappa)?;
        // x mod 2^m = c′ − r′ + 2^m·u with u = [c′ < r′] the masking carry.
        let lows: Vec<(BigUint, Vec<Share>)> = opening
            .c_low
            .iter()
            .zip(&opening.r_low_bits)
            .map(|(c, bits)| (c.clone(), bits.clone()))
            .collect();
        let carries = bit_lt_c_many(ctx, &lows, p.kappa)?;
        let carries = authenticate(ctx, &carries)?;

        let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
        let inv2m = t
            .inv(&t.reduce(&pow2(m as u64)))
            .expect("odd prime modulus");
        let two_m = pow2(m as u64);
        let mut out = Vec::with_capacity(xs.len());
        for (e, x) in xs.iter().enumerate() {
            let low = carries[e]
                .scale(&two_m)
                .sub(&opening.r_low[e])?
                .add_public(&opening.c_low[e], &alpha);
            let inner = x.inner.sub(&low)?.scale(&inv2m);
            out.push(FxShare { inner, params: p.clone() });
        }
        Ok(out)
    })
}

/// Single-instance [`trunc_many`].
pub fn trunc(ctx: &mut PartyCtx, x: &FxShare, m: usize) -> Result<FxShare> {
    Ok(trunc_many(ctx, std::slice::from_ref(x), m)?
        .pop()
        .expect("one instance in, one out"))
}

/// Fixed-point product: authenticated Beaver multiplication followed by a
/// probabilistic truncation of the doubled fraction scale. Error is at most
/// one unit in the last place.
pub fn fx_mul_many(ctx: &mut PartyCtx, xs: &[FxShare], ys: &[FxShare]) -> Result<Vec<FxShare>> {
    if xs.len() != ys.len() {
        return Err(Error::Params("product operand count mismatch".into()));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let p = xs[0].params.clone();
    for s in xs.iter().chain(ys) {
        if !s.params.compatible(&p) {
            return Err(Error::Params("mixed fixed-point parameters in product".into()));
        }
    }
    ctx.scoped("fx_mul", |ctx| {
        let xa: Vec<AuthShare> = xs.iter().map(|s| s.inner.clone()).collect();
        let ya: Vec<AuthShare> = ys.iter().map(|s| s.inner.clone()).collect();
        let prods: Vec<FxShare> = mul_beaver(ctx, &xa, &ya)?
            .into_iter()
            .map(|inner| FxShare { inner, params: p.clone() })
            .collect();
        // The untruncated product spans e+2f signed bits.
        trunc_pr_width(ctx, &prods, p.f, p.k() + p.f)
    })
}

/// Single-instance [`fx_mul_many`].
pub fn fx_mul(ctx: &mut PartyCtx, x: &FxShare, y: &FxShare) -> Result<FxShare> {
    Ok(fx_mul_many(ctx, std::slice::from_ref(x), std::slice::from_ref(y))?
        .pop()
        .expect("one instance in, one out"))
}

/// Sign test at an explicit signed bit width (difference values span one
/// bit more than the encoding): a shared authenticated bit equal to
/// [x ≥ 0], via the comparison stack on the bare value shares, re-tagged on
/// the way out.
pub fn fx_gez_width(ctx: &mut PartyCtx, xs: &[FxShare], width: usize) -> Result<Vec<AuthShare>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let p = xs[0].params.clone();
    ctx.scoped("fx_gez", |ctx| {
        let plains: Vec<Share> = xs.iter().map(|s| s.inner.value.clone()).collect();
        let bits = gez_many(ctx, &plains, width, p.kappa)?;
        authenticate(ctx, &bits)
    })
}

/// [`fx_gez_width`] at the parameter width e+f.
pub fn fx_gez_many(ctx: &mut PartyCtx, xs: &[FxShare]) -> Result<Vec<AuthShare>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let width = xs[0].params.k();
    fx_gez_width(ctx, xs, width)
}

/// Single-instance [`fx_gez_many`].
pub fn fx_gez(ctx: &mut PartyCtx, x: &FxShare) -> Result<AuthShare> {
    Ok(fx_gez_many(ctx, std::slice::from_ref(x))?
        .pop()
        .expect("one instance in, one out"))
}

/// Share real-valued inputs held by `owner` as fixed-point shares.
pub fn fx_share_input(
    ctx: &mut PartyCtx,
    owner: usize,
    values: Option<&[f64]>,
    count: usize,
    p: &FxParams,
) -> Result<Vec<FxShare>> {
    let encoded: Option<Vec<BigUint>> = match values {
        Some(vs) if ctx.index == owner => {
            Some(vs.iter().map(|x| fx_encode(*x, p)).collect::<Result<_>>()?)
        }
        _ => None,
    };
    let shares = share_input_auth(ctx, owner, encoded.as_deref(), count, &p.q)?;
    Ok(shares
        .into_iter()
        .map(|inner| FxShare { inner, params: p.clone() })
        .collect())
}

/// Open fixed-point shares to reals (deferred MAC check as usual).
pub fn fx_open(ctx: &mut PartyCtx, xs: &[FxShare]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let p = xs[0].params.clone();
    let inner: Vec<AuthShare> = xs.iter().map(|s| s.inner.clone()).collect();
    let opened = open_auth(ctx, &inner)?;
    Ok(opened.iter().map(|v| fx_decode(v, &p)).collect())
}

/// Authenticated share of a public real constant.
pub fn fx_constant(ctx: &mut PartyCtx, x: f64, p: &FxParams) -> Result<FxShare> {
    let c = fx_encode(x, p)?;
    let session = ctx.mac_session_mut(&p.q)?;
    let epoch = session.key_id;
    let alpha = session.alpha_share.clone();
    Ok(FxShare {
        inner: AuthShare::from_public(&c, ctx.index, &alpha, epoch, &p.q),
        params: p.clone(),
    })
}

/// The production modulus really is the smallest prime beyond the stated
/// floor; checked here once so profiles can be constructed without re-walking.
pub fn validate_production_modulus() -> bool {
    let p = FxParams::production();
    let floor = pow2(145);
    p.q.value() > &floor && is_prime(p.q.value())
}
