//! Preprocessing demand planning and offline generation.
//!
//! Every online operation draws store material in amounts fixed entirely by
//! its shape: a Beaver multiplication takes one triple, a sign test at
//! signed width w takes 4w−9 triples, 2w+2κ−1 shared bits and 2w−4 random
//! values per element, a probabilistic truncation at width w takes w+κ_w
//! authenticated bits per element, and so on up through layers and whole
//! training runs. A [`Demand`] is that bill of materials computed without
//! executing anything; [`training_demand`] walks a model exactly as the
//! trainer does and prices a full run, so a store provisioned to the figure
//! drains to empty when the job finishes — the tests here assert exactly
//! that.
//!
//! Two generation paths fill a store from a demand. The dealer path
//! ([`deal_demand`]) has a trusted dealer fabricate the records directly.
//! The protocol path ([`generate_offline`]) produces the same records with
//! no trusted party: triples from bounded-randomness Paillier generation
//! with pairwise sacrifice, shared bits from joint dealing under a
//! multiplicative bit check, uniform values from summed local draws, matrix
//! triples assembled out of scalar triples, Bernoulli bits from threshold
//! sign tests, and MAC tags riding a Paillier scaling pass throughout.
//! Generation is itself a consumer — bit dealing burns n triples per bit,
//! matrix assembly burns r·s·u — so the driver inflates the request to a
//! gross figure first and still lands the store exactly on the net demand.
//!
//! Field triples can also arrive through the conversion route — generated
//! over the Paillier plaintext ring and converted down ([`convert_triples`])
//! — which spends comparison material in the two lift spaces;
//! [`conversion_support`] prices that per-modulus. The direct route exists
//! precisely because the conversion machinery consumes the kind of material
//! it would otherwise be asked to produce.

use std::collections::BTreeMap;
use std::fmt;

use crate::comparison::rnd_bit;
use crate::conversion::{lift_width, trip_conv_many, ModulusTower};
use crate::engine::PartyCtx;
use crate::fixedpoint::{fx_encode, mask_kappa, FxParams};
use crate::modular::Modulus;
use crate::nn::prnd_bit_many;
use crate::paillier::{PaillierDecShare, PaillierPublicKey};
use crate::sharing::{mul_beaver_plain, Share};
use crate::store::{p_key_of, BitRec, Dealer, MatrixTripleRec, PBitRec, PreprocStore, RndIntRec};
use crate::train::{LayerSpec, TrainSpec};
use crate::triples::{rnd_int, sacrifice, tag_direct, trigen, trigen_direct};
use crate::{Error, Result};
use num_bigint::BigUint;

/// Bill of preprocessing material over one modulus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Demand {
    pub triples: usize,
    pub bits: usize,
    pub rndints: usize,
    /// Matrix triples keyed by product shape (rows, inner, cols).
    pub matrices: BTreeMap<(usize, usize, usize), usize>,
    /// Bernoulli bits keyed by the store's bias key, round(p·2^16).
    pub pbits: BTreeMap<u32, usize>,
}

impl Demand {
    pub fn is_empty(&self) -> bool {
        self.triples == 0
            && self.bits == 0
            && self.rndints == 0
            && self.matrices.values().all(|&c| c == 0)
            && self.pbits.values().all(|&c| c == 0)
    }

    /// Accumulate another bill into this one.
    pub fn merge(&mut self, other: &Demand) {
        self.triples += other.triples;
        self.bits += other.bits;
        self.rndints += other.rndints;
        for (&dims, &count) in &other.matrices {
            *self.matrices.entry(dims).or_insert(0) += count;
        }
        for (&key, &count) in &other.pbits {
            *self.pbits.entry(key).or_insert(0) += count;
        }
    }

    /// The bill for `times` repetitions of this job.
    pub fn scaled(mut self, times: usize) -> Demand {
        self.triples *= times;
        self.bits *= times;
        self.rndints *= times;
        for count in self.matrices.values_mut() {
            *count *= times;
        }
        for count in self.pbits.values_mut() {
            *count *= times;
        }
        self
    }

    pub fn matrix(&mut self, dims: (usize, usize, usize), count: usize) {
        *self.matrices.entry(dims).or_insert(0) += count;
    }

    /// Beaver multiplications, authenticated or not: one triple each.
    pub fn mul(count: usize) -> Demand {
        Demand { triples: count, ..Demand::default() }
    }

    /// MAC-tagging of plain shares: one triple per element.
    pub fn authenticate(count: usize) -> Demand {
        Demand::mul(count)
    }

    /// Input sharing: one authenticated uniform mask per element.
    pub fn share_input(count: usize) -> Demand {
        Demand { rndints: count, ..Demand::default() }
    }

    /// Sign test at signed width `width`: the constant-round comparison
    /// stack prices out to 4w−9 triples, 2w+2κ−1 bits and 2w−4 uniform
    /// values per element (the prefix-product masking dominates).
    pub fn gez(count: usize, width: usize, kappa: usize) -> Result<Demand> {
        if width < 3 {
            return Err(Error::Params(
                "sign test demands need at least 3 payload bits".into(),
            ));
        }
        Ok(Demand {
            triples: (4 * width - 9) * count,
            bits: (2 * width + 2 * kappa - 1) * count,
            rndints: (2 * width - 4) * count,
            ..Demand::default()
        })
    }

    /// Sign test with re-authenticated output bits.
    pub fn auth_gez(count: usize, width: usize, kappa: usize) -> Result<Demand> {
        let mut d = Demand::gez(count, width, kappa)?;
        d.merge(&Demand::authenticate(count));
        Ok(d)
    }

    /// Probabilistic truncation at signed width `width`: width+κ_w
    /// authenticated mask bits per element, κ_w shrinking with the width's
    /// headroom under the modulus.
    pub fn trunc(p: &FxParams, count: usize, width: usize) -> Result<Demand> {
        let kappa = mask_kappa(p, width)?;
        Ok(Demand { bits: (width + kappa) * count, ..Demand::default() })
    }

    /// Rectified linear forward: a width-k sign test plus one mask
    /// multiplication per element.
    pub fn relu(p: &FxParams, count: usize) -> Result<Demand> {
        let mut d = Demand::auth_gez(count, p.k(), p.kappa)?;
        d.merge(&Demand::mul(count));
        Ok(d)
    }

    /// Rectified linear backward: the stored signs replay for one
    /// multiplication per element.
    pub fn drelu(count: usize) -> Demand {
        Demand::mul(count)
    }

    /// Tournament maxima: windows pad to a power of two s, and each of the
    /// s−1 comparisons is a width-(k+1) sign test plus one multiplication.
    pub fn maxpool(p: &FxParams, windows: usize, window: usize) -> Result<Demand> {
        let s = window.next_power_of_two();
        let comparisons = windows * (s - 1);
        let mut d = Demand::auth_gez(comparisons, p.k() + 1, p.kappa)?;
        d.merge(&Demand::mul(comparisons));
        Ok(d)
    }

    /// Argmax replay: each padded leaf's log₂ s path bits multiply down to
    /// a one-hot indicator, s·(log₂ s − 1) multiplications per window.
    pub fn dmaxpool(windows: usize, window: usize) -> Demand {
        let s = window.next_power_of_two();
        let levels = s.trailing_zeros() as usize;
        let muls = if levels > 0 { s * (levels - 1) } else { 0 };
        Demand::mul(windows * muls)
    }

    /// Dropout forward: one Bernoulli bit, one mask multiplication and a
    /// rescaling truncation per element.
    pub fn dropout(p: &FxParams, count: usize, bias: f64) -> Result<Demand> {
        let mut d = Demand::ddropout(p, count, bias)?;
        *d.pbits.entry(p_key_of(bias)).or_insert(0) += count;
        Ok(d)
    }

    /// Dropout backward: the mask replays, so only the multiplication and
    /// truncation recur.
    pub fn ddropout(p: &FxParams, count: usize, bias: f64) -> Result<Demand> {
        let scale = fx_encode(1.0 / (1.0 - bias), p)?;
        let mut d = Demand::mul(count);
        d.merge(&Demand::trunc(p, count, p.k() + scale.bits() as usize)?);
        Ok(d)
    }

    /// Bernoulli bit generation: a k-bit uniform draw sign-tested against
    /// the bias threshold at width k+1, output re-authenticated.
    pub fn prnd_bit(p: &FxParams, count: usize) -> Result<Demand> {
        let mut d = Demand { bits: p.k() * count, ..Demand::default() };
        d.merge(&Demand::auth_gez(count, p.k() + 1, p.kappa)?);
        Ok(d)
    }
}

impl fmt::Display for Demand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "triples={} bits={} rndints={}",
            self.triples, self.bits, self.rndints
        )?;
        for (&(r, s, c), &count) in &self.matrices {
            write!(f, " matrix[{r}x{s}x{c}]={count}")?;
        }
        for (&key, &count) in &self.pbits {
            write!(f, " pbits[{key}]={count}")?;
        }
        Ok(())
    }
}

/// Demands over several moduli at once; the conversion pipeline spans three.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DemandSet {
    pub pools: BTreeMap<BigUint, Demand>,
}

impl DemandSet {
    pub fn add(&mut self, t: &Modulus, d: &Demand) {
        self.pools.entry(t.value().clone()).or_default().merge(d);
    }

    pub fn get(&self, t: &Modulus) -> Demand {
        self.pools.get(t.value()).cloned().unwrap_or_default()
    }
}

/// Store cost of one forward pass over `rows` samples. Dropout is live only
/// when `training`; inference treats it as identity.
pub fn forward_demand(spec: &TrainSpec, rows: usize, training: bool) -> Result<Demand> {
    let p = &spec.params;
    let dims = spec.model.validate()?;
    let mut d = Demand::default();
    let mut d_in = spec.model.input;
    for (li, layer) in spec.model.layers.iter().enumerate() {
        match layer {
            LayerSpec::Linear { inputs, outputs } => {
                d.matrix((rows, *inputs, *outputs), 1);
                d.merge(&Demand::trunc(p, rows * outputs, p.k() + p.f)?);
            }
            LayerSpec::Relu => d.merge(&Demand::relu(p, rows * d_in)?),
            LayerSpec::Conv2d { filters, .. } => {
                let g = layer.geometry()?.expect("convolution geometry");
                let (np, pl) = (g.patches(), g.patch_len());
                d.matrix((rows * np, pl, *filters), 1);
                d.merge(&Demand::trunc(p, rows * np * filters, p.k() + p.f)?);
            }
            LayerSpec::Maxpool { window } => {
                d.merge(&Demand::maxpool(p, rows * d_in / window, *window)?);
            }
            LayerSpec::Dropout { p: bias } => {
                if training {
                    d.merge(&Demand::dropout(p, rows * d_in, *bias)?);
                }
            }
        }
        d_in = dims[li];
    }
    Ok(d)
}

/// Store cost of one backward pass over `rows` samples. The first layer
/// never propagates an input gradient, which drops one matrix product.
pub fn backward_demand(spec: &TrainSpec, rows: usize) -> Result<Demand> {
    let p = &spec.params;
    let dims = spec.model.validate()?;
    let mut d = Demand::default();
    for (li, layer) in spec.model.layers.iter().enumerate().rev() {
        let d_in = if li == 0 { spec.model.input } else { dims[li - 1] };
        match layer {
            LayerSpec::Linear { inputs, outputs } => {
                d.matrix((*inputs, rows, *outputs), 1);
                d.merge(&Demand::trunc(p, inputs * outputs, p.k() + p.f)?);
                if li > 0 {
                    d.matrix((rows, *outputs, *inputs), 1);
                    d.merge(&Demand::trunc(p, rows * inputs, p.k() + p.f)?);
                }
            }
            LayerSpec::Relu => d.merge(&Demand::drelu(rows * d_in)),
            LayerSpec::Conv2d { filters, .. } => {
                let g = layer.geometry()?.expect("convolution geometry");
                let (np, pl) = (g.patches(), g.patch_len());
                d.matrix((pl, rows * np, *filters), 1);
                d.merge(&Demand::trunc(p, pl * filters, p.k() + p.f)?);
                if li > 0 {
                    d.matrix((rows * np, *filters, pl), 1);
                    d.merge(&Demand::trunc(p, rows * np * pl, p.k() + p.f)?);
                }
            }
            LayerSpec::Maxpool { window } => {
                d.merge(&Demand::dmaxpool(rows * d_in / window, *window));
                // scattering one-hot indicators back over the window
                d.merge(&Demand::mul(rows * d_in));
            }
            LayerSpec::Dropout { p: bias } => {
                d.merge(&Demand::ddropout(p, rows * d_in, *bias)?);
            }
        }
    }
    Ok(d)
}

/// Store cost of the weight update: one truncation per weight at the width
/// the folded learning-rate factor inflates values to.
pub fn update_demand(spec: &TrainSpec) -> Result<Demand> {
    let p = &spec.params;
    let lr_bits = BigUint::from(spec.lr_step()?.unsigned_abs()).bits() as usize;
    let mut d = Demand::default();
    for (_, dims) in spec.model.trainable() {
        let len: usize = dims.iter().product();
        d.merge(&Demand::trunc(p, len, p.k() + lr_bits)?);
    }
    Ok(d)
}

/// Store cost of one SGD step at the configured batch size.
pub fn step_demand(spec: &TrainSpec) -> Result<Demand> {
    let mut d = forward_demand(spec, spec.batch, true)?;
    d.merge(&backward_demand(spec, spec.batch)?);
    d.merge(&update_demand(spec)?);
    Ok(d)
}

/// Store cost of evaluating `rows` samples: an inference pass plus the
/// opened argmax (a tournament over the class scores and its replay).
pub fn predict_demand(spec: &TrainSpec, rows: usize) -> Result<Demand> {
    let p = &spec.params;
    let classes = spec.model.output_dim()?;
    let mut d = forward_demand(spec, rows, false)?;
    d.merge(&Demand::maxpool(p, rows, classes)?);
    d.merge(&Demand::dmaxpool(rows, classes));
    Ok(d)
}

/// Exact store cost of a full training run: sharing the datasets once, then
/// per epoch every SGD step plus one evaluation sweep.
pub fn training_demand(spec: &TrainSpec, n_train: usize, n_eval: usize) -> Result<Demand> {
    spec.validate()?;
    if spec.batch == 0 || n_train % spec.batch != 0 {
        return Err(Error::Params(format!(
            "batch size {} must divide the {n_train} training rows",
            spec.batch
        )));
    }
    let classes = spec.model.output_dim()?;
    let mut d = Demand::share_input(
        n_train * (spec.model.input + classes) + n_eval * spec.model.input,
    );
    let steps = n_train / spec.batch;
    let mut per_epoch = step_demand(spec)?.scaled(steps);
    per_epoch.merge(&predict_demand(spec, n_eval)?);
    d.merge(&per_epoch.scaled(spec.epochs));
    Ok(d)
}

/// Trusted-dealer stocking: fabricate exactly `demand` into every store,
/// tagged under `alpha` when given.
pub fn deal_demand(
    dealer: &mut Dealer,
    t: &Modulus,
    stores: &mut [PreprocStore],
    demand: &Demand,
    alpha: Option<&BigUint>,
) {
    dealer.deal_triples(t, stores, demand.triples, alpha);
    dealer.deal_bits(t, stores, demand.bits, alpha);
    dealer.deal_rndints(t, stores, demand.rndints, alpha);
    for (&dims, &count) in &demand.matrices {
        dealer.deal_matrix_triples(t, stores, dims, count, alpha);
    }
    for (&key, &count) in &demand.pbits {
        dealer.deal_pbits(t, stores, key as f64 / 65536.0, count, alpha);
    }
}

/// What the dealer-free offline pipeline produced and spent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OfflineReport {
    /// The net demand now sitting in the store.
    pub stocked: Demand,
    /// Triples generated before the pairwise sacrifice halved them.
    pub raw_triples: usize,
    /// Triples consumed internally by bit dealing, matrix assembly and
    /// Bernoulli sign tests.
    pub support_triples: usize,
}

/// Fill this party's store with exactly `net` over the fixed-point modulus,
/// with no trusted dealer. Triples are generated directly over the field
/// inside the Paillier plaintext space and sacrificed pairwise; everything
/// downstream (bits, matrix products, Bernoulli bits) spends them, so the
/// request is grossed up front. Installs a MAC key from summed local draws
/// if none is present.
pub fn generate_offline(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    p: &FxParams,
    net: &Demand,
    kappa: u64,
) -> Result<OfflineReport> {
    let t = p.q.clone();
    if ctx.store.mac_key(&t).is_none() {
        let alpha = {
            let draw = t.sample(&mut ctx.rng);
            ctx.contribute("mac key share", draw)
        };
        ctx.store.set_mac_key(&t, alpha);
    }

    // Gross up: Bernoulli bits run sign tests, matrix assembly runs r·s·u
    // scalar products, and every shared bit burns n triples in its dealing.
    let mut gross = net.clone();
    for &count in net.pbits.values() {
        gross.merge(&Demand::prnd_bit(p, count)?);
    }
    for (&(r, s, u), &count) in &net.matrices {
        gross.triples += r * s * u * count;
    }
    gross.triples += ctx.n * gross.bits;
    let support_triples = gross.triples - net.triples;

    ctx.scoped("offline", |ctx| {
        let raw = 2 * gross.triples;
        if raw > 0 {
            let recs = trigen_direct(ctx, pk, dec, &t, raw, kappa, true)?;
            for rec in sacrifice(ctx, recs, &t)? {
                ctx.store.push_triple(&t, rec);
            }
        }
        if gross.rndints > 0 {
            let rs = rnd_int(ctx, &t, gross.rndints)?;
            let tags = tag_direct(ctx, pk, dec, &t, &rs, kappa)?;
            for (r, m) in rs.iter().zip(&tags) {
                ctx.store.push_rndint(
                    &t,
                    RndIntRec { r: r.value.clone(), mac: Some(m.value.clone()) },
                );
            }
        }
        if gross.bits > 0 {
            let bs = rnd_bit(ctx, &t, gross.bits)?;
            let tags = tag_direct(ctx, pk, dec, &t, &bs, kappa)?;
            for (b, m) in bs.iter().zip(&tags) {
                ctx.store.push_bit(
                    &t,
                    BitRec { b: b.value.clone(), mac: Some(m.value.clone()) },
                );
            }
        }
        for (&dims, &count) in &net.matrices {
            for _ in 0..count {
                let rec = assemble_matrix_triple(ctx, pk, dec, &t, dims, kappa)?;
                ctx.store.push_matrix(&t, rec);
            }
        }
        for (&key, &count) in &net.pbits {
            let bias = key as f64 / 65536.0;
            for b in prnd_bit_many(ctx, p, bias, count)? {
                ctx.store.push_pbit(
                    &t,
                    PBitRec {
                        p_key: key,
                        b: b.value.value.clone(),
                        mac: Some(b.mac.value.clone()),
                    },
                );
            }
        }
        Ok(OfflineReport { stocked: net.clone(), raw_triples: raw, support_triples })
    })
}

/// One matrix triple over `t` from scalar material: A and B are jointly
/// random, C = A·B is assembled entry-wise from scalar Beaver products, and
/// all three matrices pick up MAC tags in one Paillier pass.
fn assemble_matrix_triple(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    t: &Modulus,
    dims: (usize, usize, usize),
    kappa: u64,
) -> Result<MatrixTripleRec> {
    let (r, s, u) = dims;
    if r == 0 || s == 0 || u == 0 {
        return Err(Error::Params("matrix triple with an empty dimension".into()));
    }
    let a = rnd_int(ctx, t, r * s)?;
    let b = rnd_int(ctx, t, s * u)?;
    let mut xs = Vec::with_capacity(r * s * u);
    let mut ys = Vec::with_capacity(r * s * u);
    for i in 0..r {
        for j in 0..u {
            for k in 0..s {
                xs.push(a[i * s + k].clone());
                ys.push(b[k * u + j].clone());
            }
        }
    }
    let prods = mul_beaver_plain(ctx, &xs, &ys)?;
    let me = ctx.index;
    let mut c = Vec::with_capacity(r * u);
    for e in 0..r * u {
        let mut acc = Share::zero(me, t);
        for k in 0..s {
            acc = acc.add(&prods[e * s + k])?;
        }
        c.push(acc);
    }
    let mut flat: Vec<Share> = Vec::with_capacity(r * s + s * u + r * u);
    flat.extend(a.iter().cloned());
    flat.extend(b.iter().cloned());
    flat.extend(c.iter().cloned());
    let tags = tag_direct(ctx, pk, dec, t, &flat, kappa)?;
    let vals = |xs: &[Share]| xs.iter().map(|x| x.value.clone()).collect::<Vec<_>>();
    let macs = (
        vals(&tags[..r * s]),
        vals(&tags[r * s..r * s + s * u]),
        vals(&tags[r * s + s * u..]),
    );
    Ok(MatrixTripleRec { dims, a: vals(&a), b: vals(&b), c: vals(&c), macs: Some(macs) })
}

/// Comparison material `count` triple conversions consume, per modulus:
/// wrap extractions in the first lift space for the three components and
/// for every mask bit their drops re-share, the product-defect
/// multiplication, the σ conversion through the second lift space, and the
/// mask bits over the target field itself.
pub fn conversion_support(tower: &ModulusTower, count: usize) -> Result<DemandSet> {
    let n = tower.parties;
    let kappa = tower.kappa;
    let m_q = tower.q.bits() as usize + kappa;
    let per = n.saturating_sub(1) * count;

    let mut lift = Demand::default();
    if per > 0 {
        lift.merge(&Demand::gez(3 * per, lift_width(n, &tower.rsa), kappa)?);
        lift.merge(&Demand::gez(3 * m_q * per, lift_width(n, &tower.q), kappa)?);
    }
    lift.triples += count;

    let mut lift2 = Demand::default();
    if per > 0 {
        lift2.merge(&Demand::gez(per, lift_width(n, &tower.lift), kappa)?);
        lift2.merge(&Demand::gez(m_q * per, lift_width(n, &tower.q), kappa)?);
    }

    let field = Demand { bits: 4 * m_q * count, ..Demand::default() };

    let mut set = DemandSet::default();
    set.add(&tower.lift, &lift);
    set.add(&tower.lift2, &lift2);
    set.add(&tower.q, &field);
    Ok(set)
}

/// The conversion route for field triples: generate twice the count over
/// the Paillier plaintext ring, sacrifice pairwise there, and convert the
/// survivors into the online field. Returns plain converted triples; MAC
/// tagging and store placement are the caller's choice. The lift-space
/// comparison material priced by [`conversion_support`] must be stocked.
pub fn convert_triples(
    ctx: &mut PartyCtx,
    pk: &PaillierPublicKey,
    dec: &PaillierDecShare,
    tower: &ModulusTower,
    count: usize,
) -> Result<Vec<(Share, Share, Share)>> {
    if !Modulus::new(pk.n.value().clone()).same(&tower.rsa) {
        return Err(Error::Params(
            "conversion tower must be built over the Paillier plaintext ring".into(),
        ));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let t = Modulus::new(pk.n.value().clone());
    let raw = trigen(ctx, pk, dec, 2 * count, false)?;
    let kept = sacrifice(ctx, raw, &t)?;
    let me = ctx.index;
    let triples: Vec<(Share, Share, Share)> = kept
        .into_iter()
        .map(|rec| {
            (
                Share::new(me, rec.a, &t),
                Share::new(me, rec.b, &t),
                Share::new(me, rec.c, &t),
            )
        })
        .collect();
    trip_conv_many(ctx, &triples, tower)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparison::{gez_many, rnd_inv_counted};
    use crate::fixedpoint::{fx_gez_width, fx_share_input, trunc_pr_width};
    use crate::nn::{ddropout, drelu, dropout, linear_backward, linear_forward, maxpool_many, relu};
    use crate::paillier::{deal_exponent_shares, keygen_dealer};
    use crate::sharing::{mac_check, open_auth, open_shares, AuthShare};
    use crate::sim::{run_simulated, unwrap_all};
    use crate::tensor::ShareTensor;
    use crate::train::{synthetic_blobs, train, training_profile, LabeledData, ModelSpec};

    fn pools(ctx: &PartyCtx, t: &Modulus) -> (usize, usize, usize) {
        (
            ctx.store.count_triples(t),
            ctx.store.count_bits(t),
            ctx.store.count_rndints(t),
        )
    }

    /// Run `job` and report what it drew from the scalar pools.
    fn consumed<T>(
        ctx: &mut PartyCtx,
        t: &Modulus,
        job: impl FnOnce(&mut PartyCtx) -> Result<T>,
    ) -> Result<(Demand, T)> {
        let before = pools(ctx, t);
        let out = job(ctx)?;
        let after = pools(ctx, t);
        Ok((
            Demand {
                triples: before.0 - after.0,
                bits: before.1 - after.1,
                rndints: before.2 - after.2,
                ..Demand::default()
            },
            out,
        ))
    }

    #[test]
    fn demand_arithmetic_merges_scales_and_renders() {
        let mut d = Demand::mul(3);
        d.merge(&Demand::share_input(2));
        d.matrix((2, 3, 4), 1);
        let mut e = d.clone().scaled(5);
        assert_eq!(e.triples, 15);
        assert_eq!(e.rndints, 10);
        assert_eq!(e.matrices[&(2, 3, 4)], 5);
        e.merge(&Demand::dropout(&FxParams::testing(), 2, 0.5).unwrap());
        assert_eq!(e.pbits[&p_key_of(0.5)], 2);
        assert!(!e.is_empty());
        assert!(Demand::default().is_empty());
        let text = format!("{e}");
        assert!(text.contains("matrix[2x3x4]=5"), "got {text}");
        assert!(text.contains("pbits[32768]=2"), "got {text}");

        // width too narrow for the comparison stack
        assert!(Demand::gez(1, 2, 8).is_err());
        // single-leaf windows cost nothing
        assert!(Demand::dmaxpool(7, 1).is_empty());
    }

    #[test]
    fn primitive_demands_match_observed_consumption() {
        let p = FxParams::testing();
        let t = p.q.clone();
        let t_setup = t.clone();
        let outcomes = run_simulated(
            3,
            1100,
            401,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(389, n);
                let alpha = dealer.deal_mac_key(&t_setup, &mut stores);
                dealer.deal_triples(&t_setup, &mut stores, 4_000, Some(&alpha));
                dealer.deal_bits(&t_setup, &mut stores, 6_000, Some(&alpha));
                dealer.deal_rndints(&t_setup, &mut stores, 1_000, Some(&alpha));
                dealer.deal_pbits(&t_setup, &mut stores, 0.25, 6, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let p = FxParams::testing();
                let t = p.q.clone();
                // inputs shared before measurement so their cost stays out
                let vals = [1.5, -0.25, 0.0, 2.0, -3.0, 0.75];
                let xs = fx_share_input(ctx, 0, Some(&vals), 6, &p)?;
                let plain: Vec<Share> =
                    xs.iter().map(|s| s.inner.value.clone()).collect();
                let mut observed = Vec::new();

                let (d, _) = consumed(ctx, &t, |ctx| gez_many(ctx, &plain[..5], 9, p.kappa))?;
                observed.push(d);
                let (d, _) = consumed(ctx, &t, |ctx| fx_gez_width(ctx, &xs, 13))?;
                observed.push(d);
                let (d, _) = consumed(ctx, &t, |ctx| trunc_pr_width(ctx, &xs[..4], 8, 20))?;
                observed.push(d);
                let (d, _) = consumed(ctx, &t, |ctx| prnd_bit_many(ctx, &p, 0.25, 3))?;
                observed.push(d);
                let (d, inv) = consumed(ctx, &t, |ctx| {
                    let tq = t.clone();
                    rnd_inv_counted(ctx, &tq, 3)
                })?;
                assert_eq!(inv.1, 0, "inverse-pair draws retried at this seed");
                observed.push(d);

                let tensor = ShareTensor::new(vec![6], xs.clone())?;
                let key = p_key_of(0.25);
                let before = pools(ctx, &t);
                let before_p = ctx.store.count_pbits(&t, key);
                let (y, mut mask) = dropout(ctx, &tensor, 0.25)?;
                let after = pools(ctx, &t);
                let mut d = Demand {
                    triples: before.0 - after.0,
                    bits: before.1 - after.1,
                    rndints: before.2 - after.2,
                    ..Demand::default()
                };
                let spent = before_p - ctx.store.count_pbits(&t, key);
                if spent > 0 {
                    d.pbits.insert(key, spent);
                }
                observed.push(d);
                let (d, _) = consumed(ctx, &t, |ctx| ddropout(ctx, &y, &mut mask))?;
                observed.push(d);

                mac_check(ctx, &t)?;
                Ok(observed)
            },
        );
        let (results, _) = unwrap_all(outcomes);
        let expected = vec![
            Demand::gez(5, 9, p.kappa).unwrap(),
            Demand::auth_gez(6, 13, p.kappa).unwrap(),
            Demand::trunc(&p, 4, 20).unwrap(),
            Demand::prnd_bit(&p, 3).unwrap(),
            Demand {
                triples: 3,
                rndints: 6,
                ..Demand::default()
            },
            Demand::dropout(&p, 6, 0.25).unwrap(),
            Demand::ddropout(&p, 6, 0.25).unwrap(),
        ];
        for observed in &results {
            assert_eq!(observed.len(), expected.len());
            for (got, want) in observed.iter().zip(&expected) {
                assert_eq!(got, want, "priced and observed consumption disagree");
            }
        }
    }

    #[test]
    fn layer_demands_match_observed_consumption() {
        let p = FxParams::testing();
        let t = p.q.clone();
        let t_setup = t.clone();
        let outcomes = run_simulated(
            3,
            1101,
            409,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(397, n);
                let alpha = dealer.deal_mac_key(&t_setup, &mut stores);
                dealer.deal_triples(&t_setup, &mut stores, 4_000, Some(&alpha));
                dealer.deal_bits(&t_setup, &mut stores, 8_000, Some(&alpha));
                dealer.deal_rndints(&t_setup, &mut stores, 1_500, Some(&alpha));
                dealer.deal_matrix_triples(&t_setup, &mut stores, (2, 3, 2), 1, Some(&alpha));
                dealer.deal_matrix_triples(&t_setup, &mut stores, (2, 2, 3), 1, Some(&alpha));
                dealer.deal_matrix_triples(&t_setup, &mut stores, (3, 2, 2), 1, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let p = FxParams::testing();
                let t = p.q.clone();
                let vals: Vec<f64> = (0..12).map(|i| (i as f64) / 8.0 - 0.75).collect();
                let xs = fx_share_input(ctx, 0, Some(&vals), 12, &p)?;
                let mut observed = Vec::new();

                let tensor = ShareTensor::new(vec![6], xs[..6].to_vec())?;
                let (d, (y, signs)) = consumed(ctx, &t, |ctx| relu(ctx, &tensor))?;
                observed.push(d);
                let (d, _) = consumed(ctx, &t, |ctx| drelu(ctx, &y, &signs))?;
                observed.push(d);

                let windows: Vec<Vec<_>> =
                    xs.chunks(4).map(|c| c.to_vec()).collect();
                let (d, pooled) = consumed(ctx, &t, |ctx| maxpool_many(ctx, &windows))?;
                observed.push(d);
                let traces: Vec<_> = pooled.into_iter().map(|(_, tr)| tr).collect();
                let (d, _) = consumed(ctx, &t, |ctx| crate::nn::dmaxpool_many(ctx, &traces))?;
                observed.push(d);

                let x = ShareTensor::new(vec![2, 3], xs[..6].to_vec())?;
                let w = ShareTensor::new(vec![3, 2], xs[6..].to_vec())?;
                let mats = |ctx: &PartyCtx| {
                    (
                        ctx.store.count_matrices(&t, (2, 3, 2)),
                        ctx.store.count_matrices(&t, (2, 2, 3)),
                        ctx.store.count_matrices(&t, (3, 2, 2)),
                    )
                };
                let before_m = mats(ctx);
                let (d, y) = consumed(ctx, &t, |ctx| linear_forward(ctx, &x, &w))?;
                assert_eq!(before_m.0 - mats(ctx).0, 1, "forward matrix triple");
                observed.push(d);
                let before_m = mats(ctx);
                let (d, _) = consumed(ctx, &t, |ctx| linear_backward(ctx, &x, &w, &y))?;
                let after_m = mats(ctx);
                assert_eq!(before_m.1 - after_m.1, 1, "gradient matrix triple");
                assert_eq!(before_m.2 - after_m.2, 1, "weight-gradient matrix triple");
                observed.push(d);

                mac_check(ctx, &t)?;
                Ok(observed)
            },
        );
        let (results, _) = unwrap_all(outcomes);
        let expected = vec![
            Demand::relu(&p, 6).unwrap(),
            Demand::drelu(6),
            Demand::maxpool(&p, 3, 4).unwrap(),
            Demand::dmaxpool(3, 4),
            Demand::trunc(&p, 4, p.k() + p.f).unwrap(),
            Demand::trunc(&p, 2 * 3 + 3 * 2, p.k() + p.f).unwrap(),
        ];
        for observed in &results {
            for (got, want) in observed.iter().zip(&expected) {
                assert_eq!(got, want, "priced and observed layer cost disagree");
            }
        }
    }

    #[test]
    fn training_demand_drains_the_store_exactly() {
        let spec = TrainSpec {
            model: ModelSpec {
                input: 6,
                layers: vec![
                    LayerSpec::Linear { inputs: 6, outputs: 4 },
                    LayerSpec::Relu,
                    LayerSpec::Linear { inputs: 4, outputs: 2 },
                ],
            },
            params: training_profile(),
            lr: 0.5,
            batch: 4,
            epochs: 2,
            init_seed: 31,
        };
        let t = spec.params.q.clone();
        let td = training_demand(&spec, 8, 4).unwrap();
        let all = synthetic_blobs(12, 6, 2, 23);
        let data = LabeledData {
            features: all.features[..8].to_vec(),
            labels: all.labels[..8].to_vec(),
        };
        let eval = LabeledData {
            features: all.features[8..].to_vec(),
            labels: all.labels[8..].to_vec(),
        };
        let labels = eval.labels.clone();
        let td_setup = td.clone();
        let td_job = td.clone();
        let t_setup = t.clone();
        let outcomes = run_simulated(
            3,
            1102,
            419,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(421, n);
                let alpha = dealer.deal_mac_key(&t_setup, &mut stores);
                deal_demand(&mut dealer, &t_setup, &mut stores, &td_setup, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let (_, stats) = train(ctx, &spec, 0, Some(&data), 8, Some(&eval), &labels)?;
                let t = spec.params.q.clone();
                let left = pools(ctx, &t);
                let mats_left: usize = td_job
                    .matrices
                    .keys()
                    .map(|&dims| ctx.store.count_matrices(&t, dims))
                    .sum();
                Ok((stats.len(), left, mats_left))
            },
        );
        let (results, _) = unwrap_all(outcomes);
        for (epochs, left, mats_left) in results {
            assert_eq!(epochs, 2);
            assert_eq!(left, (0, 0, 0), "scalar pools must drain to zero");
            assert_eq!(mats_left, 0, "matrix pools must drain to zero");
        }
    }

    #[test]
    fn conv_pool_dropout_training_demand_is_exact() {
        let spec = TrainSpec {
            model: ModelSpec {
                input: 16,
                layers: vec![
                    LayerSpec::Conv2d {
                        channels: 1,
                        height: 4,
                        width: 4,
                        filters: 2,
                        kh: 2,
                        kw: 2,
                        stride: 2,
                        pad: 0,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Maxpool { window: 2 },
                    LayerSpec::Dropout { p: 0.25 },
                    LayerSpec::Linear { inputs: 4, outputs: 2 },
                ],
            },
            params: training_profile(),
            lr: 0.25,
            batch: 2,
            epochs: 1,
            init_seed: 37,
        };
        let t = spec.params.q.clone();
        let td = training_demand(&spec, 4, 2).unwrap();
        assert!(td.pbits.values().sum::<usize>() > 0, "dropout must demand bits");
        let all = synthetic_blobs(6, 16, 2, 29);
        let data = LabeledData {
            features: all.features[..4].to_vec(),
            labels: all.labels[..4].to_vec(),
        };
        let eval = LabeledData {
            features: all.features[4..].to_vec(),
            labels: all.labels[4..].to_vec(),
        };
        let labels = eval.labels.clone();
        let td_setup = td.clone();
        let td_job = td.clone();
        let t_setup = t.clone();
        let outcomes = run_simulated(
            3,
            1103,
            431,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(433, n);
                let alpha = dealer.deal_mac_key(&t_setup, &mut stores);
                deal_demand(&mut dealer, &t_setup, &mut stores, &td_setup, Some(&alpha));
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let (_, stats) = train(ctx, &spec, 0, Some(&data), 4, Some(&eval), &labels)?;
                let t = spec.params.q.clone();
                let left = pools(ctx, &t);
                let mats_left: usize = td_job
                    .matrices
                    .keys()
                    .map(|&dims| ctx.store.count_matrices(&t, dims))
                    .sum();
                let pbits_left: usize = td_job
                    .pbits
                    .keys()
                    .map(|&key| ctx.store.count_pbits(&t, key))
                    .sum();
                Ok((stats.len(), left, mats_left, pbits_left))
            },
        );
        let (results, _) = unwrap_all(outcomes);
        for (epochs, left, mats_left, pbits_left) in results {
            assert_eq!(epochs, 1);
            assert_eq!(left, (0, 0, 0), "scalar pools must drain to zero");
            assert_eq!(mats_left, 0, "matrix pools must drain to zero");
            assert_eq!(pbits_left, 0, "Bernoulli pool must drain to zero");
        }
    }

    #[test]
    fn offline_generation_lands_exactly_on_the_net_demand() {
        let p = FxParams::testing();
        let (pk, decs) = keygen_dealer(160, 3, 509).expect("key ceremony");
        let mut net = Demand { triples: 3, bits: 2, rndints: 2, ..Demand::default() };
        net.matrix((1, 2, 1), 1);
        net.pbits.insert(p_key_of(0.5), 1);
        let net_job = net.clone();
        let outcomes = run_simulated(
            3,
            1104,
            439,
            |_| {},
            move |ctx| {
                let p = FxParams::testing();
                let t = p.q.clone();
                let dec = decs[ctx.index].clone();
                let report = generate_offline(ctx, &pk, &dec, &p, &net_job, 40)?;
                assert_eq!(report.stocked, net_job);
                assert_eq!(report.raw_triples, 2 * (net_job.triples + report.support_triples));

                let stocked = (
                    pools(ctx, &t),
                    ctx.store.count_matrices(&t, (1, 2, 1)),
                    ctx.store.count_pbits(&t, p_key_of(0.5)),
                );
                // a generated triple and its tags survive an authenticated use
                let session = ctx.mac_session_mut(&t)?;
                let (alpha, epoch) = (session.alpha_share.clone(), session.key_id);
                let me = ctx.index;
                let x = AuthShare::from_public(&BigUint::from(2u32), me, &alpha, epoch, &t);
                let y = AuthShare::from_public(&BigUint::from(3u32), me, &alpha, epoch, &t);
                let prod = crate::sharing::mul_beaver(ctx, &[x], &[y])?;
                let opened = open_auth(ctx, &prod)?;
                mac_check(ctx, &t)?;
                Ok((stocked, opened))
            },
        );
        let (results, _) = unwrap_all(outcomes);
        for (stocked, opened) in results {
            assert_eq!(stocked.0, (3, 2, 2), "scalar pools match the request");
            assert_eq!(stocked.1, 1, "matrix pool matches the request");
            assert_eq!(stocked.2, 1, "Bernoulli pool matches the request");
            assert_eq!(opened, vec![BigUint::from(6u32)]);
        }
    }

    #[test]
    fn conversion_support_is_priced_exactly() {
        let rsa = Modulus::from_u64(35);
        let q = Modulus::from_u64(11);
        let tower = ModulusTower::new(2, &rsa, &q, 4).expect("tower");
        let support = conversion_support(&tower, 4).unwrap();
        let pk = PaillierPublicKey::from_modulus(BigUint::from(35u32));
        let decs: Vec<PaillierDecShare> = {
            let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(449);
            deal_exponent_shares(&BigUint::from(456u32), &BigUint::from(840u32), 2, &mut rng)
                .into_iter()
                .enumerate()
                .map(|(party, d_i)| PaillierDecShare { party, d_i })
                .collect()
        };
        let tower_setup = tower.clone();
        let support_setup = support.clone();
        let tower_job = tower.clone();
        let outcomes = run_simulated(
            2,
            1105,
            457,
            move |ctxs| {
                let n = ctxs.len();
                let mut stores: Vec<_> = ctxs
                    .iter_mut()
                    .map(|c| std::mem::take(&mut c.store))
                    .collect();
                let mut dealer = Dealer::new(461, n);
                for t in [&tower_setup.lift, &tower_setup.lift2, &tower_setup.q] {
                    deal_demand(&mut dealer, t, &mut stores, &support_setup.get(t), None);
                }
                for (c, s) in ctxs.iter_mut().zip(stores) {
                    c.store = s;
                }
            },
            move |ctx| {
                let dec = decs[ctx.index].clone();
                let converted = convert_triples(ctx, &pk, &dec, &tower_job, 4)?;
                let mut flat = Vec::new();
                for (a, b, c) in &converted {
                    flat.push(a.clone());
                    flat.push(b.clone());
                    flat.push(c.clone());
                }
                let opened = open_shares(ctx, &flat)?;
                let left: Vec<(usize, usize, usize)> =
                    [&tower_job.lift, &tower_job.lift2, &tower_job.q]
                        .into_iter()
                        .map(|t| pools(ctx, t))
                        .collect();
                Ok((opened, left))
            },
        );
        let (results, _) = unwrap_all(outcomes);
        for (opened, left) in results {
            assert_eq!(opened.len(), 12);
            for triple in opened.chunks(3) {
                assert_eq!(
                    (&triple[0] * &triple[1]) % 11u32,
                    triple[2].clone(),
                    "converted triple lost the product relation"
                );
            }
            for pool in left {
                assert_eq!(pool, (0, 0, 0), "support pools must drain to zero");
            }
        }
    }

    #[test]
    fn empty_store_reports_depletion() {
        let outcomes = run_simulated(
            2,
            1106,
            463,
            |_| {},
            |ctx| {
                let t = Modulus::from_u64(101);
                let x = Share::new(ctx.index, BigUint::from(5u32), &t);
                mul_beaver_plain(ctx, std::slice::from_ref(&x), std::slice::from_ref(&x))
            },
        );
        for o in outcomes {
            match o.result {
                Err(Error::OfflineDepleted(what)) => {
                    assert!(what.contains("triple"), "got {what}")
                }
                other => panic!("expected depletion, got {other:?}"),
            }
        }
    }
}
