//! Neural-network layer protocols over fixed-point shares: linear and
//! convolutional products, ReLU with its stored derivative, tournament
//! max-pooling with a comparison trace that replays as a one-hot gradient
//! router, Bernoulli dropout from preprocessed bits, and the biased
//! shared-bit generator behind those bits.
//!
//! Every forward/backward pair keeps the backward pass down to replaying
//! stored decisions: DReLU multiplies by the saved sign bits, DMaxpool
//! multiplies out the saved comparison path, DDropout reuses the saved mask.
//! Each layer runs inside its own counter scope; sub-protocol rounds (sign
//! tests, truncations) land in their own scopes, so a layer's count is
//! exactly its layer-level communication — one round for everything except
//! the pooling tournament.
//!
//! Products and sums must stay representable in the e.f encoding; like any
//! fixed-point pipeline, saturation is the model designer's contract, not a
//! detected condition.

use num_bigint::BigUint;
use num_traits::One;

use crate::comparison::{gez_many, prnd_int};
use crate::engine::PartyCtx;
use crate::fixedpoint::{
    authenticate, fx_encode, fx_gez_width, trunc_pr_width, FxParams, FxShare,
};
use crate::sharing::{mul_beaver, AuthShare};
use crate::store::p_key_of;
use crate::tensor::{col2im, im2col, mat_mul, ConvGeom, ShareTensor};
use crate::{Error, Result};

/// Entry-wise product of fixed-point shares with shared 0/1 bits: plain
/// Beaver multiplications, no truncation (a bit carries no fraction scale).
pub fn mul_by_bits(ctx: &mut PartyCtx, xs: &[FxShare], bits: &[AuthShare]) -> Result<Vec<FxShare>> {
    if xs.len() != bits.len() {
        return Err(Error::Params("bit mask length mismatch".into()));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let p = xs[0].params.clone();
    let inner: Vec<AuthShare> = xs.iter().map(|s| s.inner.clone()).collect();
    let prods = mul_beaver(ctx, &inner, bits)?;
    Ok(prods
        .into_iter()
        .map(|inner| FxShare { inner, params: p.clone() })
        .collect())
}

fn trunc_product_tensor(ctx: &mut PartyCtx, t: ShareTensor) -> Result<ShareTensor> {
    let p = t.params().clone();
    let data = trunc_pr_width(ctx, &t.data, p.f, p.k() + p.f)?;
    ShareTensor::new(t.dims.clone(), data)
}

/// x (r×s) · w (s×t) with fraction scale restored: one matrix-triple round,
/// then probabilistic truncation by f.
pub fn linear_forward(ctx: &mut PartyCtx, x: &ShareTensor, w: &ShareTensor) -> Result<ShareTensor> {
    ctx.scoped("linear", |ctx| {
        let raw = mat_mul(ctx, x, w)?;
        trunc_product_tensor(ctx, raw)
    })
}

/// Gradients of [`linear_forward`]: for y = x·w and upstream gradient g,
/// dx = g·wᵀ and dw = xᵀ·g (two matrix-triple rounds).
pub fn linear_backward(
    ctx: &mut PartyCtx,
    x: &ShareTensor,
    w: &ShareTensor,
    g: &ShareTensor,
) -> Result<(ShareTensor, ShareTensor)> {
    ctx.scoped("linear_bwd", |ctx| {
        let wt = w.transpose2()?;
        let xt = x.transpose2()?;
        let dx = mat_mul(ctx, g, &wt)?;
        let dw = mat_mul(ctx, &xt, g)?;
        let dx = trunc_product_tensor(ctx, dx)?;
        let dw = trunc_product_tensor(ctx, dw)?;
        Ok((dx, dw))
    })
}

/// Convolution of x (c×h×w) with filters (oc×c×kh×kw), lowered to one
/// matrix product over the unrolled receptive fields. Returns the output
/// planes (oc×oh×ow) and the geometry for the backward pass.
pub fn conv2d_forward(
    ctx: &mut PartyCtx,
    x: &ShareTensor,
    filters: &ShareTensor,
    stride: usize,
    pad: usize,
) -> Result<(ShareTensor, ConvGeom)> {
    let (oc, g) = conv_geometry(x, filters, stride, pad)?;
    let out = ctx.scoped("conv2d", |ctx| {
        let patches = im2col(x, &g)?;
        let wm = filters.reshape(vec![oc, g.patch_len()])?.transpose2()?;
        let raw = mat_mul(ctx, &patches, &wm)?;
        let y = trunc_product_tensor(ctx, raw)?;
        y.transpose2()?.reshape(vec![oc, g.out_h, g.out_w])
    })?;
    Ok((out, g))
}

/// Gradients of [`conv2d_forward`]: filter gradients from the unrolled
/// patches, input gradients scattered back through the lowering.
pub fn conv2d_backward(
    ctx: &mut PartyCtx,
    x: &ShareTensor,
    filters: &ShareTensor,
    grad: &ShareTensor,
    g: &ConvGeom,
) -> Result<(ShareTensor, ShareTensor)> {
    let oc = filters.dims[0];
    if grad.dims != [oc, g.out_h, g.out_w] {
        return Err(Error::Params("upstream gradient does not match convolution output".into()));
    }
    ctx.scoped("conv2d_bwd", |ctx| {
        let gm = grad.reshape(vec![oc, g.patches()])?.transpose2()?;
        let patches = im2col(x, g)?;
        let dwm = mat_mul(ctx, &patches.transpose2()?, &gm)?;
        let wmt = filters.reshape(vec![oc, g.patch_len()])?;
        let dp = mat_mul(ctx, &gm, &wmt)?;
        let dwm = trunc_product_tensor(ctx, dwm)?;
        let dp = trunc_product_tensor(ctx, dp)?;
        let dfilters = dwm
            .transpose2()?
            .reshape(vec![oc, g.channels, g.kh, g.kw])?;
        let dx = col2im(&dp, g)?;
        Ok((dx, dfilters))
    })
}

fn conv_geometry(
    x: &ShareTensor,
    filters: &ShareTensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom)> {
    match filters.dims[..] {
        [oc, c, kh, kw] if x.dims.len() == 3 && x.dims[0] == c => {
            let g = ConvGeom::new(c, x.dims[1], x.dims[2], kh, kw, stride, pad)?;
            Ok((oc, g))
        }
        _ => Err(Error::Params(format!(
            "filters {:?} incompatible with input {:?}",
            filters.dims, x.dims
        ))),
    }
}

/// max(x, 0) entry-wise. Returns the output and the sign bits s = [x ≥ 0];
/// the derivative layer is exactly those bits.
pub fn relu(ctx: &mut PartyCtx, x: &ShareTensor) -> Result<(ShareTensor, Vec<AuthShare>)> {
    ctx.scoped("relu", |ctx| {
        let s = crate::fixedpoint::fx_gez_many(ctx, &x.data)?;
        let y = mul_by_bits(ctx, &x.data, &s)?;
        Ok((ShareTensor::new(x.dims.clone(), y)?, s))
    })
}

/// Gradient of [`relu`]: g masked by the stored sign bits, one round.
pub fn drelu(ctx: &mut PartyCtx, g: &ShareTensor, s: &[AuthShare]) -> Result<ShareTensor> {
    if g.len() != s.len() {
        return Err(Error::Params("sign-bit trace does not match gradient shape".into()));
    }
    ctx.scoped("drelu", |ctx| {
        let data = mul_by_bits(ctx, &g.data, s)?;
        ShareTensor::new(g.dims.clone(), data)
    })
}

/// Comparison path of one pooling window: `comp[i][j]` is the shared bit
/// "leaf i's half won its level-j match", so Π_j comp[i][j] is 1 exactly at
/// the argmax. `len` is the pre-padding window length.
#[derive(Debug, Clone)]
pub struct MaxpoolTrace {
    pub comp: Vec<Vec<AuthShare>>,
    pub len: usize,
    pub params: FxParams,
}

/// Tournament maximum over each window, batched. Windows are padded to a
/// power of two with the minimum-encodable sentinel (entries are assumed
/// above it; ties resolve to the left/earlier element since the sign test
/// counts zero as nonnegative). Comparisons run at width k+1 because
/// differences of k-bit values span one extra bit.
pub fn maxpool_many(
    ctx: &mut PartyCtx,
    windows: &[Vec<FxShare>],
) -> Result<Vec<(FxShare, MaxpoolTrace)>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    if windows.iter().any(|w| w.is_empty()) {
        return Err(Error::Params("empty pooling window".into()));
    }
    let p = windows[0][0].params.clone();
    let t = p.q.clone();
    let epoch = ctx.mac_session_mut(&t)?.key_id;
    let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
    let sentinel = fx_encode(-(f64::powi(2.0, (p.e - 1) as i32) - 1.0), &p)?;

    ctx.scoped("maxpool", |ctx| {
        let mut cur: Vec<Vec<FxShare>> = Vec::with_capacity(windows.len());
        let mut lens = Vec::with_capacity(windows.len());
        for w in windows {
            let mut padded = w.clone();
            let target = w.len().next_power_of_two();
            while padded.len() < target {
                padded.push(FxShare {
                    inner: AuthShare::from_public(&sentinel, ctx.index, &alpha, epoch, &t),
                    params: p.clone(),
                });
            }
            lens.push((w.len(), target));
            cur.push(padded);
        }
        let mut traces: Vec<Vec<Vec<AuthShare>>> =
            cur.iter().map(|w| vec![Vec::new(); w.len()]).collect();

        let mut level = 0usize;
        loop {
            // pair up every window that still has a match to play
            let mut diffs = Vec::new();
            let mut owners = Vec::new(); // (window, pair g)
            for (wi, w) in cur.iter().enumerate() {
                if w.len() < 2 {
                    continue;
                }
                for g in 0..w.len() / 2 {
                    diffs.push(w[2 * g].sub(&w[2 * g + 1])?);
                    owners.push((wi, g));
                }
            }
            if diffs.is_empty() {
                break;
            }
            let cs = fx_gez_width(ctx, &diffs, p.k() + 1)?;
            let winners = mul_by_bits(ctx, &diffs, &cs)?; // c·(l−r)

            let mut next: Vec<Vec<FxShare>> = cur.iter().map(|_| Vec::new()).collect();
            for ((wi, g), (c, adj)) in owners.iter().zip(cs.iter().zip(&winners)) {
                let right = &cur[*wi][2 * g + 1];
                next[*wi].push(right.add(adj)?); // r + c·(l−r)
                // orient the bit for every padded leaf under this match
                let span = 1usize << (level + 1);
                for leaf in (g * span)..((g + 1) * span) {
                    let left_half = (leaf >> level) & 1 == 0;
                    let bit = if left_half {
                        c.clone()
                    } else {
                        c.neg().add_public(&BigUint::one(), &alpha)
                    };
                    traces[*wi][leaf].push(bit);
                }
            }
            for (wi, w) in cur.iter_mut().enumerate() {
                if !next[wi].is_empty() {
                    *w = std::mem::take(&mut next[wi]);
                }
            }
            level += 1;
        }

        let mut out = Vec::with_capacity(windows.len());
        for (wi, w) in cur.into_iter().enumerate() {
            let (orig, _) = lens[wi];
            out.push((
                w.into_iter().next().expect("tournament leaves one champion"),
                MaxpoolTrace {
                    comp: std::mem::take(&mut traces[wi]),
                    len: orig,
                    params: p.clone(),
                },
            ));
        }
        Ok(out)
    })
}

/// Replay pooling traces into one-hot argmax indicators (pre-padding
/// length). The per-leaf path bits multiply out in a log-depth tree.
pub fn dmaxpool_many(ctx: &mut PartyCtx, traces: &[MaxpoolTrace]) -> Result<Vec<Vec<AuthShare>>> {
    if traces.is_empty() {
        return Ok(Vec::new());
    }
    ctx.scoped("dmaxpool", |ctx| {
        // factor lists per (window, leaf); single-leaf windows are the
        // public indicator 1 and carry no factors
        let mut factors: Vec<Vec<Vec<AuthShare>>> = traces
            .iter()
            .map(|tr| tr.comp.iter().map(|path| path.clone()).collect())
            .collect();
        loop {
            let mut lhs = Vec::new();
            let mut rhs = Vec::new();
            let mut slots = Vec::new();
            for (wi, w) in factors.iter().enumerate() {
                for (li, path) in w.iter().enumerate() {
                    if path.len() >= 2 {
                        lhs.push(path[0].clone());
                        rhs.push(path[1].clone());
                        slots.push((wi, li));
                    }
                }
            }
            if lhs.is_empty() {
                break;
            }
            let prods = mul_beaver(ctx, &lhs, &rhs)?;
            for ((wi, li), prod) in slots.into_iter().zip(prods) {
                let path = &mut factors[wi][li];
                path.splice(0..2, [prod]);
            }
        }

        let mut out = Vec::with_capacity(traces.len());
        for (tr, w) in traces.iter().zip(factors) {
            let mut onehot = Vec::with_capacity(tr.len);
            for path in w.into_iter().take(tr.len) {
                match path.into_iter().next() {
                    Some(bit) => onehot.push(bit),
                    None => {
                        // size-1 window: its only leaf is the maximum
                        let t = tr.params.q.clone();
                        let epoch = ctx.mac_session_mut(&t)?.key_id;
                        let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
                        onehot.push(AuthShare::from_public(
                            &BigUint::one(),
                            ctx.index,
                            &alpha,
                            epoch,
                            &t,
                        ));
                    }
                }
            }
            out.push(onehot);
        }
        Ok(out)
    })
}

/// Preprocessed dropout mask: shared keep bits, the drop probability, and
/// the public inverse-keep-rate compensation factor. One backward replay
/// per mask.
#[derive(Debug)]
pub struct DropoutMask {
    pub bits: Vec<AuthShare>,
    pub p: f64,
    pub scale: BigUint,
    spent: bool,
}

/// Entry-wise x·b·(1−p)^{−1} with preprocessed Bernoulli bits (store first,
/// generated online on shortfall). One layer round; the compensation scale
/// is public so only the bit product communicates.
pub fn dropout(
    ctx: &mut PartyCtx,
    x: &ShareTensor,
    p_drop: f64,
) -> Result<(ShareTensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Params(format!("drop probability {p_drop} outside [0, 1)")));
    }
    let p = x.params().clone();
    let scale = fx_encode(1.0 / (1.0 - p_drop), &p)?;
    let t = p.q.clone();
    let epoch = ctx.mac_session_mut(&t)?.key_id;
    ctx.scoped("dropout", |ctx| {
        let key = p_key_of(p_drop);
        let stocked = ctx.store.count_pbits(&t, key).min(x.len());
        let me = ctx.index;
        let mut bits = Vec::with_capacity(x.len());
        for _ in 0..stocked {
            let rec = ctx.store.take_pbit(&t, key)?;
            let mac = rec.mac.ok_or_else(|| {
                Error::Params("stored Bernoulli bit lacks a MAC share".into())
            })?;
            bits.push(AuthShare::new(
                crate::sharing::Share::new(me, rec.b, &t),
                crate::sharing::Share::new(me, mac, &t),
                epoch,
            ));
        }
        if bits.len() < x.len() {
            let fresh = prnd_bit_many(ctx, &p, p_drop, x.len() - bits.len())?;
            bits.extend(fresh);
        }
        let y = apply_mask(ctx, x, &bits, &scale, &p)?;
        Ok((y, DropoutMask { bits, p: p_drop, scale, spent: false }))
    })
}

/// Gradient of [`dropout`]: the same mask and scale applied to g. A mask
/// replays exactly once.
pub fn ddropout(ctx: &mut PartyCtx, g: &ShareTensor, mask: &mut DropoutMask) -> Result<ShareTensor> {
    if mask.spent {
        return Err(Error::Params("dropout mask already replayed".into()));
    }
    if g.len() != mask.bits.len() {
        return Err(Error::Params("dropout mask does not match gradient shape".into()));
    }
    mask.spent = true;
    let p = g.params().clone();
    ctx.scoped("ddropout", |ctx| apply_mask(ctx, g, &mask.bits, &mask.scale, &p))
}

fn apply_mask(
    ctx: &mut PartyCtx,
    x: &ShareTensor,
    bits: &[AuthShare],
    scale: &BigUint,
    p: &FxParams,
) -> Result<ShareTensor> {
    let masked = mul_by_bits(ctx, &x.data, bits)?;
    let scaled: Vec<FxShare> = masked.iter().map(|s| s.scale_int(scale)).collect();
    let width = p.k() + scale.bits() as usize;
    let data = trunc_pr_width(ctx, &scaled, p.f, width)?;
    ShareTensor::new(x.dims.clone(), data)
}

/// Shared bits that are 0 with probability ≈ p: a uniform w-bit shared
/// value is sign-tested against the threshold round(p·2^w) at w = e+f,
/// giving bias granularity 2^{−w}. Outputs are authenticated.
pub fn prnd_bit_many(
    ctx: &mut PartyCtx,
    p: &FxParams,
    p_drop: f64,
    count: usize,
) -> Result<Vec<AuthShare>> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::Params(format!("bit bias {p_drop} outside [0, 1]")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let t = p.q.clone();
    let w = p.k();
    let threshold = {
        let exact = p_drop * f64::powi(2.0, w as i32);
        BigUint::from(exact.round() as u64)
    };
    ctx.scoped("prnd_bit", |ctx| {
        let rands = prnd_int(ctx, &t, w, count)?;
        let neg_thresh = t.neg(&t.reduce(&threshold));
        let diffs: Vec<crate::sharing::Share> = rands
            .iter()
            .map(|r| r.composed.add_public(&neg_thresh))
            .collect();
        let bits = gez_many(ctx, &diffs, w + 1, p.kappa)?;
        authenticate(ctx, &bits)
    })
}
