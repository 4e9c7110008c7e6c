//! Shared tensors and the operations layers are built from: a row-major
//! container of fixed-point shares, one-round matrix multiplication from a
//! preprocessed matrix triple, and the local im2col/col2im lowering that
//! turns convolution into that same multiplication.
//!
//! [`mat_mul`] deliberately opens no counter scope of its own: the calling
//! layer's scope absorbs its single round, which is what the per-layer round
//! accounting measures. Its output carries doubled fraction scale; callers
//! truncate.

use crate::engine::PartyCtx;
use crate::fixedpoint::{fx_zero_like, FxShare};
use crate::sharing::{sum_columns, AuthShare, Share};
use crate::wire::FrameKind;
use crate::{Error, Result};

/// Fixed-point shares in row-major order.
#[derive(Debug, Clone)]
pub struct ShareTensor {
    pub dims: Vec<usize>,
    pub data: Vec<FxShare>,
}

impl ShareTensor {
    pub fn new(dims: Vec<usize>, data: Vec<FxShare>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if dims.is_empty() || expect == 0 {
            return Err(Error::Params("tensor with an empty dimension".into()));
        }
        if data.len() != expect {
            return Err(Error::Params(format!(
                "tensor data length {} does not fill dims {dims:?}",
                data.len()
            )));
        }
        Ok(ShareTensor { dims, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<FxShare>) -> Result<Self> {
        ShareTensor::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn params(&self) -> &crate::fixedpoint::FxParams {
        &self.data[0].params
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Params(format!("expected a matrix, got dims {:?}", self.dims))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> &FxShare {
        let (_, c) = (self.dims[0], self.dims[1]);
        &self.data[i * c + j]
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<ShareTensor> {
        ShareTensor::new(dims, self.data.clone())
    }

    pub fn transpose2(&self) -> Result<ShareTensor> {
        let (r, c) = self.dims2()?;
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j].clone());
            }
        }
        ShareTensor::new(vec![c, r], data)
    }

    /// Entry-wise sum.
    pub fn add(&self, other: &ShareTensor) -> Result<ShareTensor> {
        if self.dims != other.dims {
            return Err(Error::Params("tensor shape mismatch in add".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        ShareTensor::new(self.dims.clone(), data)
    }

    pub fn sub(&self, other: &ShareTensor) -> Result<ShareTensor> {
        if self.dims != other.dims {
            return Err(Error::Params("tensor shape mismatch in sub".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        ShareTensor::new(self.dims.clone(), data)
    }
}

/// Matrix product of shared matrices from one preprocessed matrix triple:
/// open D = X−A and E = Y−B in a single round, then Z = C + D·B + A·E + D·E
/// locally, with every opened entry joining the deferred MAC queue. Output
/// entries carry doubled fraction scale.
pub fn mat_mul(ctx: &mut PartyCtx, x: &ShareTensor, y: &ShareTensor) -> Result<ShareTensor> {
    let (r, s) = x.dims2()?;
    let (s2, c) = y.dims2()?;
    if s != s2 {
        return Err(Error::Params(format!(
            "inner dimension mismatch: {r}×{s} by {s2}×{c}"
        )));
    }
    let p = x.params().clone();
    if !p.compatible(y.params()) {
        return Err(Error::Params("mixed fixed-point parameters in matrix product".into()));
    }
    let t = p.q.clone();
    let epoch = ctx.mac_session_mut(&t)?.key_id;
    let alpha = ctx.mac_session_mut(&t)?.alpha_share.clone();
    if x.data[0].inner.key_id != epoch || y.data[0].inner.key_id != epoch {
        return Err(Error::Params("MAC key epoch mismatch in matrix product".into()));
    }
    let tr = ctx.store.take_matrix(&t, (r, s, c))?;
    let (ma, mb, mc) = tr
        .macs
        .as_ref()
        .ok_or_else(|| Error::Params("unauthenticated matrix triple in authenticated product".into()))?;

    let mut mine = Vec::with_capacity(r * s + s * c);
    for (xs, a) in x.data.iter().zip(&tr.a) {
        mine.push(t.sub(&xs.inner.value.value, a));
    }
    for (ys, b) in y.data.iter().zip(&tr.b) {
        mine.push(t.sub(&ys.inner.value.value, b));
    }
    let all = ctx.exchange(FrameKind::Open, "mat_mul", mine)?;
    let opened = sum_columns(&t, &all, r * s + s * c)?;
    let (dv, ev) = opened.split_at(r * s);

    {
        let session = ctx.mac_session_mut(&t)?;
        for (k, xs) in x.data.iter().enumerate() {
            session.queue.push((dv[k].clone(), t.sub(&xs.inner.mac.value, &ma[k])));
        }
        for (k, ys) in y.data.iter().enumerate() {
            session.queue.push((ev[k].clone(), t.sub(&ys.inner.mac.value, &mb[k])));
        }
    }

    let me = ctx.index;
    let mut zv = tr.c.clone();
    let mut zm = mc.clone();
    for i in 0..r {
        for k in 0..s {
            let d = &dv[i * s + k];
            let a_sh = &tr.a[i * s + k];
            let ma_sh = &ma[i * s + k];
            for j in 0..c {
                let idx = i * c + j;
                let e = &ev[k * c + j];
                zv[idx] = t.add(&zv[idx], &t.mul(d, &tr.b[k * c + j]));
                zv[idx] = t.add(&zv[idx], &t.mul(a_sh, e));
                zm[idx] = t.add(&zm[idx], &t.mul(d, &mb[k * c + j]));
                zm[idx] = t.add(&zm[idx], &t.mul(ma_sh, e));
                let de = t.mul(d, e);
                if me == 0 {
                    zv[idx] = t.add(&zv[idx], &de);
                }
                zm[idx] = t.add(&zm[idx], &t.mul(&alpha, &de));
            }
        }
    }

    let data = zv
        .into_iter()
        .zip(zm)
        .map(|(v, m)| FxShare {
            inner: AuthShare::new(Share::new(me, v, &t), Share::new(me, m, &t), epoch),
            params: p.clone(),
        })
        .collect();
    ShareTensor::matrix(r, c, data)
}

/// Convolution geometry: input planes, filter extent, stride, symmetric
/// zero padding, and the derived output extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Params("degenerate convolution geometry".into()));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::Params("filter larger than padded input".into()));
        }
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { channels, height, width, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinates behind patch row `pr`, column `col`; None when the
    /// position falls in the zero padding.
    pub(crate) fn source(&self, pr: usize, col: usize) -> Option<usize> {
        let oy = pr / self.out_w;
        let ox = pr % self.out_w;
        let ch = col / (self.kh * self.kw);
        let ky = (col / self.kw) % self.kh;
        let kx = col % self.kw;
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.height || ix as usize >= self.width {
            return None;
        }
        Some(ch * self.height * self.width + iy as usize * self.width + ix as usize)
    }
}

/// Unroll receptive fields into a patches × patch-length matrix; padding
/// positions become zero shares. Entirely local.
pub fn im2col(x: &ShareTensor, g: &ConvGeom) -> Result<ShareTensor> {
    if x.dims != [g.channels, g.height, g.width] {
        return Err(Error::Params(format!(
            "input dims {:?} do not match geometry {:?}",
            x.dims,
            [g.channels, g.height, g.width]
        )));
    }
    let zero = fx_zero_like(&x.data[0]);
    let mut data = Vec::with_capacity(g.patches() * g.patch_len());
    for pr in 0..g.patches() {
        for col in 0..g.patch_len() {
            data.push(match g.source(pr, col) {
                Some(i) => x.data[i].clone(),
                None => zero.clone(),
            });
        }
    }
    ShareTensor::matrix(g.patches(), g.patch_len(), data)
}

/// Adjoint of [`im2col`]: scatter-add patch-matrix entries back onto the
/// input planes (overlapping receptive fields accumulate). Entirely local.
pub fn col2im(cols: &ShareTensor, g: &ConvGeom) -> Result<ShareTensor> {
    let (r, c) = cols.dims2()?;
    if r != g.patches() || c != g.patch_len() {
        return Err(Error::Params("patch matrix does not match geometry".into()));
    }
    let zero = fx_zero_like(&cols.data[0]);
    let mut out = vec![zero; g.channels * g.height * g.width];
    for pr in 0..r {
        for col in 0..c {
            if let Some(i) = g.source(pr, col) {
                out[i] = out[i].add(&cols.data[pr * c + col])?;
            }
        }
    }
    ShareTensor::new(vec![g.channels, g.height, g.width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::FxParams;
    use crate::modular::Modulus;
    use crate::sharing::{mac_check, open_auth};
    use crate::sim::{run_simulated, unwrap_all};
    use crate::store::Dealer;
    use num_bigint::BigUint;
    use num_traits::ToPrimitive;

    /// Single-party stand-in share for index-shuffling tests.
    fn solo(v: u64, p: &FxParams) -> FxShare {
        FxShare {
            inner: AuthShare::new(
                Share::new(0, BigUint::from(v), &p.q),
                Share::zero(0, &p.q),
                0,
            ),
            params: p.clone(),
        }
    }

    fn solo_vals(t: &ShareTensor) -> Vec<u64> {
        t.data
            .iter()
            .map(|s| s.inner.value.value.to_u64().unwrap())
            .collect()
    }

    /// Plaintext im2col on labels, same geometry conventions.
    fn im2col_oracle(x: &[u64], g: &ConvGeom) -> Vec<u64> {
        let mut out = Vec::new();
        for pr in 0..g.patches() {
            for col in 0..g.patch_len() {
                out.push(g.source(pr, col).map_or(0, |i| x[i]));
            }
        }
        out
    }

    #[test]
    fn shape_constructors_validate() {
        let p = FxParams::testing();
        assert!(ShareTensor::new(vec![2, 0], vec![]).is_err());
        assert!(ShareTensor::new(vec![2, 2], vec![solo(1, &p)]).is_err());
        let m = ShareTensor::matrix(2, 3, (0..6).map(|v| solo(v, &p)).collect()).unwrap();
        assert_eq!(m.at2(1, 2).inner.value.value, BigUint::from(5u32));
        let tr = m.transpose2().unwrap();
        assert_eq!(tr.dims, vec![3, 2]);
        assert_eq!(solo_vals(&tr), vec![0, 3, 1, 4, 2, 5]);
        assert!(m.reshape(vec![6]).is_ok());
        assert!(m.reshape(vec![4]).is_err());
    }

    #[test]
    fn im2col_matches_oracle_with_and_without_padding() {
        let p = FxParams::testing();
        // 2 channels, 3×4 input, distinct labels
        let x = ShareTensor::new(vec![2, 3, 4], (1..=24).map(|v| solo(v, &p)).collect()).unwrap();

        let plain: Vec<u64> = (1..=24).collect();
        for (kh, kw, stride, pad) in [(2, 2, 1, 0), (2, 2, 2, 0), (3, 3, 1, 1), (1, 1, 1, 0)] {
            let g = ConvGeom::new(2, 3, 4, kh, kw, stride, pad).unwrap();
            let cols = im2col(&x, &g).unwrap();
            assert_eq!(cols.dims, vec![g.patches(), g.patch_len()]);
            assert_eq!(solo_vals(&cols), im2col_oracle(&plain, &g), "k={kh}×{kw} s={stride} p={pad}");
        }

        // hand check: 1×1 stride-1 geometry is the identity reshape
        let g = ConvGeom::new(2, 3, 4, 1, 1, 1, 0).unwrap();
        assert_eq!(g.patches(), 12);
        assert_eq!(g.patch_len(), 2);
        assert!(ConvGeom::new(1, 2, 2, 3, 3, 1, 0).is_err(), "filter exceeds input");
    }

    #[test]
    fn col2im_scatter_adds_overlaps() {
        let p = FxParams::testing();
        // all-ones patch matrix: each input position accumulates its
        // receptive-field multiplicity
        let g = ConvGeom::new(1, 3, 3, 2, 2, 1, 0).unwrap();
        let cols = ShareTensor::matrix(
            g.patches(),
            g.patch_len(),
            (0..g.patches() * g.patch_len()).map(|_| solo(1, &p)).collect(),
        )
        .unwrap();
        let back = col2im(&cols, &g).unwrap();
        // 3×3 with 2×2 windows stride 1: corner 1, edge 2, center 4
        assert_eq!(solo_vals(&back), vec![1, 2, 1, 2, 4, 2, 1, 2, 1]);

        // non-overlapping stride: col2im ∘ im2col = identity
        let g2 = ConvGeom::new(1, 4, 4, 2, 2, 2, 0).unwrap();
        let x = ShareTensor::new(vec![1, 4, 4], (1..=16).map(|v| solo(v, &p)).collect()).unwrap();
        let roundtrip = col2im(&im2col(&x, &g2).unwrap(), &g2).unwrap();
        assert_eq!(solo_vals(&roundtrip), solo_vals(&x));
    }

    #[test]
    fn mat_mul_matches_plaintext_product() {
        let p = FxParams::testing();
        let q = p.q.clone();
        let outcomes = run_simulated(
            2,
            950,
            167,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(271, n);
                let alpha = dealer.deal_mac_key(&q, &mut stores);
                dealer.deal_matrix_triples(&q, &mut stores, (2, 3, 2), 1, Some(&alpha));
                dealer.deal_rndints(&q, &mut stores, 16, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                // raw integer entries; product checked untruncated mod Q
                let xe: Vec<BigUint> = [3u64, 1, 4, 1, 5, 9]
                    .iter()
                    .map(|&v| BigUint::from(v))
                    .collect();
                let ye: Vec<BigUint> = [2u64, 7, 1, 8, 2, 8].iter().map(|&v| BigUint::from(v)).collect();
                let xs = crate::sharing::share_input_auth(
                    ctx,
                    0,
                    if ctx.index == 0 { Some(&xe) } else { None },
                    6,
                    &p.q,
                )?;
                let ys = crate::sharing::share_input_auth(
                    ctx,
                    1,
                    if ctx.index == 1 { Some(&ye) } else { None },
                    6,
                    &p.q,
                )?;
                let wrap = |v: Vec<AuthShare>| -> Vec<FxShare> {
                    v.into_iter()
                        .map(|inner| FxShare { inner, params: p.clone() })
                        .collect()
                };
                let xm = ShareTensor::matrix(2, 3, wrap(xs))?;
                let ym = ShareTensor::matrix(3, 2, wrap(ys))?;
                let zm = ctx.scoped("matmul_test", |ctx| mat_mul(ctx, &xm, &ym))?;
                let inner: Vec<AuthShare> = zm.data.iter().map(|s| s.inner.clone()).collect();
                let opened = open_auth(ctx, &inner)?;
                let rounds = ctx.counters.scope("matmul_test").rounds;
                mac_check(ctx, &p.q)?;
                Ok((opened, rounds))
            },
        );
        let (vals, _) = unwrap_all(outcomes);
        let (opened, rounds) = &vals[0];
        // [[3,1,4],[1,5,9]]·[[2,7],[1,8],[2,8]] = [[15,61],[25,119]]
        let expect = [15u64, 61, 25, 119];
        for (got, want) in opened.iter().zip(expect) {
            assert_eq!(got, &BigUint::from(want));
        }
        assert_eq!(*rounds, 1, "matrix product is one online round");
    }

    #[test]
    fn mat_mul_rejects_shape_and_epoch_problems() {
        let p = FxParams::testing();
        let q = p.q.clone();
        let outcomes = run_simulated(
            2,
            951,
            173,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(277, n);
                let alpha = dealer.deal_mac_key(&q, &mut stores);
                dealer.deal_rndints(&q, &mut stores, 8, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let xe: Vec<BigUint> = (1..=4u64).map(BigUint::from).collect();
                let xs = crate::sharing::share_input_auth(
                    ctx,
                    0,
                    if ctx.index == 0 { Some(&xe) } else { None },
                    4,
                    &p.q,
                )?;
                let wrap: Vec<FxShare> = xs
                    .into_iter()
                    .map(|inner| FxShare { inner, params: p.clone() })
                    .collect();
                let a = ShareTensor::matrix(2, 2, wrap.clone())?;
                let b = ShareTensor::matrix(1, 4, wrap)?;
                match mat_mul(ctx, &a, &b) {
                    Err(Error::Params(_)) => {}
                    other => panic!("inner-dim mismatch must be rejected, got {other:?}"),
                }
                // no (2,2,2) triple was dealt
                let c = a.clone();
                match mat_mul(ctx, &a, &c) {
                    Err(Error::OfflineDepleted(_)) => {}
                    other => panic!("missing triple must deplete, got {other:?}"),
                }
                Ok(())
            },
        );
        unwrap_all(outcomes);
    }
}
