//! Mini-batch SGD over secret-shared data: a configurable layer pipeline
//! (linear, convolution, relu, maxpool, dropout) trained under squared error
//! on the logits, so the backward pass needs only the implemented layer
//! gradients and no division. The update w ← w − η·Δ folds the batch size
//! into the encoded step (η/B), applied as an integer scaling followed by
//! probabilistic truncation.
//!
//! A plaintext fixed-point reference pipeline ([`PlainModel`]) mirrors the
//! protocol arithmetic operation for operation on `i128`: same encoding, same
//! order of sums and rescalings, but deterministic floor truncation where the
//! protocol truncates probabilistically. The two runs therefore drift by at
//! most one unit in the last place per rescaling, which is what the
//! prediction-agreement checks quantify. The reference also enforces the
//! dynamic-range contract (every pre-truncation sum must fit the truncation
//! width) and rejects models that would overflow, which the protocol cannot
//! detect on its own.
//!
//! Evaluation opens nothing but predicted class indicators: logits go through
//! the pooling argmax and only the one-hot result is opened. The metrics kept
//! per epoch are those indicators' agreement with the (public) evaluation
//! labels; the loss proxy is the misclassification rate, chosen so the log
//! never reveals logit magnitudes. Wall-clock seconds appear in the metrics
//! line but are excluded from the deterministic rendering used to compare
//! runs.
//!
//! Training consumes preprocessing aggressively (every relu entry is a sign
//! test, every rescaling eats masking bits); the planner sizes the store from
//! the same layer walk this module executes.

use crate::engine::PartyCtx;
use crate::fixedpoint::{
    fx_encode_int, fx_share_input, trunc_pr_width, FxParams, FxShare,
};
use crate::modular::Modulus;
use crate::nn::{
    ddropout, dmaxpool_many, drelu, dropout, linear_backward, linear_forward, maxpool_many,
    mul_by_bits, relu, DropoutMask, MaxpoolTrace,
};
use crate::sharing::{mac_check, open_auth, AuthShare, Share};
use crate::tensor::{col2im, im2col, mat_mul, ConvGeom, ShareTensor};
use crate::{Error, Result};
use num_bigint::{BigInt, BigUint};
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

/// One stage of the pipeline. Data flows as row-major `[batch, features]`;
/// convolution interprets its input width as flattened planes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Linear { inputs: usize, outputs: usize },
    Relu,
    Conv2d {
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Maxpool { window: usize },
    Dropout { p: f64 },
}

impl LayerSpec {
    fn out_dim(&self, in_dim: usize) -> Result<usize> {
        match self {
            LayerSpec::Linear { inputs, outputs } => {
                if *inputs != in_dim {
                    return Err(Error::Params(format!(
                        "linear layer expects {inputs} inputs, previous layer provides {in_dim}"
                    )));
                }
                Ok(*outputs)
            }
            LayerSpec::Relu => Ok(in_dim),
            LayerSpec::Conv2d { channels, height, width, filters, .. } => {
                if channels * height * width != in_dim {
                    return Err(Error::Params(format!(
                        "convolution expects {} inputs, previous layer provides {in_dim}",
                        channels * height * width
                    )));
                }
                let g = self.geometry()?.expect("conv has geometry");
                Ok(filters * g.patches())
            }
            LayerSpec::Maxpool { window } => {
                if *window == 0 || in_dim % window != 0 {
                    return Err(Error::Params(format!(
                        "pooling window {window} does not divide {in_dim} features"
                    )));
                }
                Ok(in_dim / window)
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Params(format!("drop probability {p} outside [0, 1)")));
                }
                Ok(in_dim)
            }
        }
    }

    pub(crate) fn geometry(&self) -> Result<Option<ConvGeom>> {
        match self {
            LayerSpec::Conv2d { channels, height, width, kh, kw, stride, pad, .. } => Ok(Some(
                ConvGeom::new(*channels, *height, *width, *kh, *kw, *stride, *pad)?,
            )),
            _ => Ok(None),
        }
    }

    /// Tensor shape of this layer's weights, if it has any.
    fn weight_dims(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Linear { inputs, outputs } => Some(vec![*inputs, *outputs]),
            LayerSpec::Conv2d { channels, filters, kh, kw, .. } => {
                Some(vec![*filters, *channels, *kh, *kw])
            }
            _ => None,
        }
    }

    fn fan_in(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { inputs, .. } => Some(*inputs),
            LayerSpec::Conv2d { channels, kh, kw, .. } => Some(channels * kh * kw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Features per input row.
    pub input: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Shape-check the pipeline; returns each layer's output width.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input == 0 {
            return Err(Error::Params("model input width must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Params("model needs at least one layer".into()));
        }
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for layer in &self.layers {
            cur = layer.out_dim(cur)?;
            dims.push(cur);
        }
        Ok(dims)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(*self.validate()?.last().expect("nonempty"))
    }

    /// (layer index, weight tensor dims) for every trainable layer, in order.
    pub fn trainable(&self) -> Vec<(usize, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.weight_dims().map(|d| (i, d)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub model: ModelSpec,
    pub params: FxParams,
    /// Step size before batch averaging; the applied factor is lr/batch.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Seed of the public (deterministic) weight initialization.
    pub init_seed: u64,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Params("batch size must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Params("learning rate must be finite and nonnegative".into()));
        }
        self.lr_step()?;
        Ok(())
    }

    /// The encoded per-example step η/B, shared by the protocol and the
    /// plaintext reference so both apply the identical quantized factor.
    pub fn lr_step(&self) -> Result<i128> {
        fx_encode_int(self.lr / self.batch as f64, &self.params)
    }
}

/// Fixed-point profile the training tests and examples run under: a 32-bit
/// prime with 6 integer bits, enough headroom for blob-scale activations
/// while keeping sign tests cheap.
pub fn training_profile() -> FxParams {
    let q = Modulus::new(BigUint::from(4_294_967_291u64)); // 2^32 − 5
    FxParams::new(6, 8, 8, q).expect("profile parameters are consistent")
}

/// Deterministic public weight initialization: uniform in ±1/√fan_in,
/// encoded. One stream, consumed layer by layer, so any two runs (secure or
/// plaintext) with equal seeds start from identical quantized weights.
pub fn init_weight_values(model: &ModelSpec, p: &FxParams, seed: u64) -> Result<Vec<Vec<i128>>> {
    model.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (idx, dims) in model.trainable() {
        let amp = 1.0 / (self::fan_in_of(&model.layers[idx]) as f64).sqrt();
        let count: usize = dims.iter().product();
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let u: f64 = rng.gen();
            vals.push(fx_encode_int(amp * (2.0 * u - 1.0), p)?);
        }
        out.push(vals);
    }
    Ok(out)
}

fn fan_in_of(layer: &LayerSpec) -> usize {
    layer.fan_in().expect("trainable layer has a fan-in")
}

// ---------------------------------------------------------------------------
// Plaintext fixed-point reference
// ---------------------------------------------------------------------------

/// The reference pipeline: identical integer arithmetic to the protocol,
/// floor instead of probabilistic rounding at every rescaling. Serves as the
/// agreement oracle for secure training and as the dynamic-range checker.
/// Dropout has no deterministic counterpart and is rejected.
#[derive(Debug, Clone)]
pub struct PlainModel {
    pub model: ModelSpec,
    pub p: FxParams,
    /// Flattened weight values per trainable layer, fixed-point encoded.
    pub weights: Vec<Vec<i128>>,
}

enum PlainTape {
    Linear { x: Vec<Vec<i128>>, widx: usize },
    Relu { keep: Vec<Vec<bool>> },
    Conv { x: Vec<Vec<i128>>, geom: ConvGeom, filters: usize, widx: usize },
    Maxpool { arg: Vec<Vec<usize>>, window: usize, in_cols: usize },
}

impl PlainModel {
    pub fn new(model: ModelSpec, p: FxParams, seed: u64) -> Result<Self> {
        if model.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. })) {
            return Err(Error::Params(
                "the plaintext reference covers deterministic layers only".into(),
            ));
        }
        let weights = init_weight_values(&model, &p, seed)?;
        Ok(PlainModel { model, p, weights })
    }

    /// Floor-divide a pre-truncation sum by 2^f, enforcing the same width
    /// contract the protocol's truncation assumes.
    fn rescale(&self, v: i128) -> Result<i128> {
        let kf = (self.p.k() + self.p.f) as u32;
        if v.unsigned_abs() >= 1u128 << (kf - 1) {
            return Err(Error::Params(format!(
                "dynamic range exceeded: |{v}| needs more than {kf} signed bits before rescaling"
            )));
        }
        Ok(v.div_euclid(1 << self.p.f))
    }

    fn check_value(&self, v: i128) -> Result<i128> {
        if v.unsigned_abs() >= 1u128 << (self.p.k() as u32 - 1) {
            return Err(Error::Params(format!(
                "dynamic range exceeded: |{v}| does not fit {} signed bits",
                self.p.k()
            )));
        }
        Ok(v)
    }

    fn forward_rows(
        &self,
        x: &[Vec<i128>],
        with_tape: bool,
    ) -> Result<(Vec<Vec<i128>>, Vec<PlainTape>)> {
        let mut cur: Vec<Vec<i128>> = x.to_vec();
        let mut tapes = Vec::new();
        let mut widx = 0usize;
        for layer in &self.model.layers {
            match layer {
                LayerSpec::Linear { inputs, outputs } => {
                    let w = &self.weights[widx];
                    let mut next = Vec::with_capacity(cur.len());
                    for row in &cur {
                        let mut out = Vec::with_capacity(*outputs);
                        for c in 0..*outputs {
                            let mut acc = 0i128;
                            for s in 0..*inputs {
                                acc += row[s] * w[s * outputs + c];
                            }
                            out.push(self.check_value(self.rescale(acc)?)?);
                        }
                        next.push(out);
                    }
                    if with_tape {
                        tapes.push(PlainTape::Linear { x: cur.clone(), widx });
                    }
                    widx += 1;
                    cur = next;
                }
                LayerSpec::Relu => {
                    let keep: Vec<Vec<bool>> =
                        cur.iter().map(|r| r.iter().map(|v| *v >= 0).collect()).collect();
                    for (row, k) in cur.iter_mut().zip(&keep) {
                        for (v, keep) in row.iter_mut().zip(k) {
                            if !keep {
                                *v = 0;
                            }
                        }
                    }
                    if with_tape {
                        tapes.push(PlainTape::Relu { keep });
                    }
                }
                LayerSpec::Conv2d { filters, .. } => {
                    let geom = layer.geometry()?.expect("conv");
                    let w = &self.weights[widx];
                    let pl = geom.patch_len();
                    let np = geom.patches();
                    let mut next = Vec::with_capacity(cur.len());
                    for row in &cur {
                        let mut out = vec![0i128; filters * np];
                        for pr in 0..np {
                            for oc in 0..*filters {
                                let mut acc = 0i128;
                                for col in 0..pl {
                                    if let Some(src) = geom.source(pr, col) {
                                        acc += row[src] * w[oc * pl + col];
                                    }
                                }
                                out[oc * np + pr] = self.check_value(self.rescale(acc)?)?;
                            }
                        }
                        next.push(out);
                    }
                    if with_tape {
                        tapes.push(PlainTape::Conv {
                            x: cur.clone(),
                            geom,
                            filters: *filters,
                            widx,
                        });
                    }
                    widx += 1;
                    cur = next;
                }
                LayerSpec::Maxpool { window } => {
                    let in_cols = cur[0].len();
                    let mut args = Vec::with_capacity(cur.len());
                    for row in cur.iter_mut() {
                        let mut arg_row = Vec::with_capacity(in_cols / window);
                        let mut out = Vec::with_capacity(in_cols / window);
                        for wi in 0..in_cols / window {
                            let seg = &row[wi * window..(wi + 1) * window];
                            // First maximum wins, matching the sign test's
                            // zero-counts-as-nonnegative tie rule.
                            let mut best = 0usize;
                            for (j, v) in seg.iter().enumerate() {
                                if *v > seg[best] {
                                    best = j;
                                }
                            }
                            arg_row.push(best);
                            out.push(seg[best]);
                        }
                        *row = out;
                        args.push(arg_row);
                    }
                    if with_tape {
                        tapes.push(PlainTape::Maxpool { arg: args, window: *window, in_cols });
                    }
                }
                LayerSpec::Dropout { .. } => unreachable!("rejected at construction"),
            }
        }
        Ok((cur, tapes))
    }

    pub fn logits(&self, x: &[Vec<i128>]) -> Result<Vec<Vec<i128>>> {
        Ok(self.forward_rows(x, false)?.0)
    }

    pub fn predict(&self, x: &[Vec<i128>]) -> Result<Vec<usize>> {
        Ok(self
            .logits(x)?
            .iter()
            .map(|row| {
                let mut best = 0usize;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// One SGD step on a batch: forward, squared-error gradient on the
    /// logits, backward, and the η/B-scaled update, all in encoded integers.
    pub fn sgd_step(&mut self, x: &[Vec<i128>], targets: &[Vec<i128>], lr_step: i128) -> Result<()> {
        let (logits, tapes) = self.forward_rows(x, true)?;
        let mut g: Vec<Vec<i128>> = logits
            .iter()
            .zip(targets)
            .map(|(y, t)| y.iter().zip(t).map(|(a, b)| a - b).collect())
            .collect();
        let mut grads: Vec<Option<Vec<i128>>> = vec![None; self.weights.len()];
        for (li, tape) in tapes.iter().enumerate().rev() {
            match tape {
                PlainTape::Linear { x, widx } => {
                    let (inputs, outputs) = match self.model.layers[li] {
                        LayerSpec::Linear { inputs, outputs } => (inputs, outputs),
                        _ => unreachable!(),
                    };
                    let w = &self.weights[*widx];
                    let mut dw = vec![0i128; inputs * outputs];
                    for (row, grow) in x.iter().zip(&g) {
                        for s in 0..inputs {
                            for c in 0..outputs {
                                dw[s * outputs + c] += row[s] * grow[c];
                            }
                        }
                    }
                    let dw = dw
                        .into_iter()
                        .map(|v| self.check_value(self.rescale(v)?))
                        .collect::<Result<Vec<_>>>()?;
                    grads[*widx] = Some(dw);
                    if li > 0 {
                        let mut next = Vec::with_capacity(g.len());
                        for grow in &g {
                            let mut dr = Vec::with_capacity(inputs);
                            for s in 0..inputs {
                                let mut acc = 0i128;
                                for c in 0..outputs {
                                    acc += grow[c] * w[s * outputs + c];
                                }
                                dr.push(self.check_value(self.rescale(acc)?)?);
                            }
                            next.push(dr);
                        }
                        g = next;
                    }
                }
                PlainTape::Relu { keep } => {
                    for (grow, k) in g.iter_mut().zip(keep) {
                        for (v, keep) in grow.iter_mut().zip(k) {
                            if !keep {
                                *v = 0;
                            }
                        }
                    }
                }
                PlainTape::Conv { x, geom, filters, widx } => {
                    let pl = geom.patch_len();
                    let np = geom.patches();
                    let w = &self.weights[*widx];
                    let mut dw = vec![0i128; filters * pl];
                    for (row, grow) in x.iter().zip(&g) {
                        for pr in 0..np {
                            for oc in 0..*filters {
                                let gv = grow[oc * np + pr];
                                for col in 0..pl {
                                    if let Some(src) = geom.source(pr, col) {
                                        dw[oc * pl + col] += row[src] * gv;
                                    }
                                }
                            }
                        }
                    }
                    let dw = dw
                        .into_iter()
                        .map(|v| self.check_value(self.rescale(v)?))
                        .collect::<Result<Vec<_>>>()?;
                    grads[*widx] = Some(dw);
                    if li > 0 {
                        let mut next = Vec::with_capacity(g.len());
                        for grow in &g {
                            // dP = G·Wᵀ rescaled, then scattered back through
                            // the lowering exactly like the protocol path.
                            let mut dx = vec![0i128; geom.channels * geom.height * geom.width];
                            for pr in 0..np {
                                for col in 0..pl {
                                    let mut acc = 0i128;
                                    for oc in 0..*filters {
                                        acc += grow[oc * np + pr] * w[oc * pl + col];
                                    }
                                    let dp = self.rescale(acc)?;
                                    if let Some(src) = geom.source(pr, col) {
                                        dx[src] += dp;
                                    }
                                }
                            }
                            for v in &dx {
                                self.check_value(*v)?;
                            }
                            next.push(dx);
                        }
                        g = next;
                    }
                }
                PlainTape::Maxpool { arg, window, in_cols } => {
                    let mut next = Vec::with_capacity(g.len());
                    for (grow, args) in g.iter().zip(arg) {
                        let mut dx = vec![0i128; *in_cols];
                        for (wi, a) in args.iter().enumerate() {
                            dx[wi * window + a] = grow[wi];
                        }
                        next.push(dx);
                    }
                    g = next;
                }
            }
        }
        for (w, dw) in self.weights.iter_mut().zip(grads) {
            let dw = dw.expect("every trainable layer produced a gradient");
            let kf = (self.p.k() + self.p.f) as u32;
            for (wv, dv) in w.iter_mut().zip(dw) {
                let scaled = dv * lr_step;
                if scaled.unsigned_abs() >= 1u128 << (kf - 1) {
                    return Err(Error::Params("dynamic range exceeded in the update".into()));
                }
                *wv -= scaled.div_euclid(1 << self.p.f);
            }
        }
        Ok(())
    }

    pub fn train_epoch(
        &mut self,
        x: &[Vec<i128>],
        targets: &[Vec<i128>],
        batch: usize,
        lr_step: i128,
    ) -> Result<()> {
        if x.len() % batch != 0 {
            return Err(Error::Params("training set size must be a multiple of the batch".into()));
        }
        for b in 0..x.len() / batch {
            self.sgd_step(&x[b * batch..(b + 1) * batch], &targets[b * batch..(b + 1) * batch], lr_step)?;
        }
        Ok(())
    }
}

/// Encode real-valued rows for the reference pipeline.
pub fn encode_rows(rows: &[Vec<f64>], p: &FxParams) -> Result<Vec<Vec<i128>>> {
    rows.iter()
        .map(|r| r.iter().map(|x| fx_encode_int(*x, p)).collect())
        .collect()
}

/// One-hot targets (encoded 1.0/0.0 rows) for integer labels.
pub fn one_hot_rows(labels: &[usize], classes: usize, p: &FxParams) -> Result<Vec<Vec<i128>>> {
    let one = fx_encode_int(1.0, p)?;
    labels
        .iter()
        .map(|l| {
            if *l >= classes {
                return Err(Error::Params(format!("label {l} outside {classes} classes")));
            }
            Ok((0..classes).map(|c| if c == *l { one } else { 0 }).collect())
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LabeledData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Linearly separable class blobs: class centers at ±1 patterns offset by the
/// class index, uniform ±0.5 noise, labels assigned round-robin. Fully
/// deterministic in the seed.
pub fn synthetic_blobs(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let row: Vec<f64> = (0..dim)
            .map(|j| {
                let center = if (j + class) % classes == 0 { 1.0 } else { -1.0 };
                center + rng.gen_range(-0.5..0.5)
            })
            .collect();
        features.push(row);
        labels.push(class);
    }
    LabeledData { features, labels }
}

/// Fraction of positions where the two prediction vectors agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

// ---------------------------------------------------------------------------
// Secure weights and data
// ---------------------------------------------------------------------------

/// Secret-shared model parameters, one tensor per trainable layer.
#[derive(Debug, Clone)]
pub struct Weights {
    pub tensors: Vec<ShareTensor>,
}

/// Share the public deterministic initialization: every party derives the
/// same encoded values and turns them into constant shares, so
/// initialization costs no communication. (The data is the secret being
/// protected; the starting point of optimization is public.)
pub fn init_weights(ctx: &mut PartyCtx, spec: &TrainSpec) -> Result<Weights> {
    spec.validate()?;
    let p = &spec.params;
    let vals = init_weight_values(&spec.model, p, spec.init_seed)?;
    let session = ctx.mac_session_mut(&p.q)?;
    let key_id = session.key_id;
    let alpha = session.alpha_share.clone();
    let me = ctx.index;
    let mut tensors = Vec::with_capacity(vals.len());
    for ((_, dims), layer_vals) in spec.model.trainable().into_iter().zip(vals) {
        let data: Vec<FxShare> = layer_vals
            .into_iter()
            .map(|v| {
                let c = p.q.reduce_int(&BigInt::from(v));
                FxShare {
                    inner: AuthShare::from_public(&c, me, &alpha, key_id, &p.q),
                    params: p.clone(),
                }
            })
            .collect();
        tensors.push(ShareTensor::new(dims, data)?);
    }
    Ok(Weights { tensors })
}

/// Flatten weight shares to (value, MAC) residues, e.g. to carry them across
/// session boundaries when the offline store is refilled between epochs.
pub fn export_weights(w: &Weights) -> Vec<(BigUint, BigUint)> {
    w.tensors
        .iter()
        .flat_map(|t| {
            t.data
                .iter()
                .map(|s| (s.inner.value.value.clone(), s.inner.mac.value.clone()))
        })
        .collect()
}

/// Rebuild weight tensors from exported residues under the current MAC
/// session. The MAC key must be the same one the export was taken under.
pub fn import_weights(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    flat: &[(BigUint, BigUint)],
) -> Result<Weights> {
    spec.validate()?;
    let p = &spec.params;
    let key_id = ctx.mac_session_mut(&p.q)?.key_id;
    let me = ctx.index;
    let shapes = spec.model.trainable();
    let total: usize = shapes.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if flat.len() != total {
        return Err(Error::Params(format!(
            "expected {total} exported weights, got {}",
            flat.len()
        )));
    }
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut off = 0usize;
    for (_, dims) in shapes {
        let count: usize = dims.iter().product();
        let data: Vec<FxShare> = flat[off..off + count]
            .iter()
            .map(|(v, m)| FxShare {
                inner: AuthShare::new(
                    Share::new(me, v.clone(), &p.q),
                    Share::new(me, m.clone(), &p.q),
                    key_id,
                ),
                params: p.clone(),
            })
            .collect();
        off += count;
        tensors.push(ShareTensor::new(dims, data)?);
    }
    Ok(Weights { tensors })
}

/// Share `rows` (held by `owner`) as an authenticated [n_rows, width] tensor.
pub fn share_rows(
    ctx: &mut PartyCtx,
    owner: usize,
    rows: Option<&[Vec<f64>]>,
    n_rows: usize,
    width: usize,
    p: &FxParams,
) -> Result<ShareTensor> {
    let flat: Option<Vec<f64>> = match rows {
        Some(rs) if ctx.index == owner => {
            if rs.len() != n_rows || rs.iter().any(|r| r.len() != width) {
                return Err(Error::Params("input rows do not match the declared shape".into()));
            }
            Some(rs.iter().flatten().copied().collect())
        }
        _ => None,
    };
    let shares = fx_share_input(ctx, owner, flat.as_deref(), n_rows * width, p)?;
    ShareTensor::matrix(n_rows, width, shares)
}

/// Share one-hot targets for the owner's labels.
pub fn share_targets(
    ctx: &mut PartyCtx,
    owner: usize,
    labels: Option<&[usize]>,
    n_rows: usize,
    classes: usize,
    p: &FxParams,
) -> Result<ShareTensor> {
    let rows: Option<Vec<Vec<f64>>> = match labels {
        Some(ls) if ctx.index == owner => Some(
            one_hot_rows(ls, classes, p)?
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as f64 / f64::powi(2.0, p.f as i32)).collect())
                .collect(),
        ),
        _ => None,
    };
    share_rows(ctx, owner, rows.as_deref(), n_rows, classes, p)
}

fn row_slice(x: &ShareTensor, lo: usize, hi: usize) -> Result<ShareTensor> {
    let (r, c) = x.dims2()?;
    if lo >= hi || hi > r {
        return Err(Error::Params("row slice out of range".into()));
    }
    ShareTensor::matrix(hi - lo, c, x.data[lo * c..hi * c].to_vec())
}

// ---------------------------------------------------------------------------
// Secure forward/backward
// ---------------------------------------------------------------------------

enum Tape {
    Linear { x: ShareTensor, widx: usize },
    Relu { signs: Vec<AuthShare> },
    Conv { x: ShareTensor, geom: ConvGeom, filters: usize, widx: usize },
    Maxpool { traces: Vec<MaxpoolTrace>, window: usize, in_cols: usize },
    Dropout { mask: DropoutMask },
}

/// Stack every sample's im2col patches into one [batch·patches, patch_len]
/// matrix so the whole batch convolves in a single matrix-triple round.
fn batched_patches(x: &ShareTensor, geom: &ConvGeom) -> Result<ShareTensor> {
    let (rows, _) = x.dims2()?;
    let mut data = Vec::with_capacity(rows * geom.patches() * geom.patch_len());
    for r in 0..rows {
        let plane = sample_plane(x, r, geom)?;
        let cols = im2col(&plane, geom)?;
        data.extend(cols.data);
    }
    ShareTensor::matrix(rows * geom.patches(), geom.patch_len(), data)
}

fn sample_plane(x: &ShareTensor, row: usize, geom: &ConvGeom) -> Result<ShareTensor> {
    let (_, width) = x.dims2()?;
    ShareTensor::new(
        vec![geom.channels, geom.height, geom.width],
        x.data[row * width..(row + 1) * width].to_vec(),
    )
}

fn forward(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &Weights,
    x: &ShareTensor,
    training: bool,
) -> Result<(ShareTensor, Vec<Tape>)> {
    let p = &spec.params;
    let mut cur = x.clone();
    let mut tapes = Vec::new();
    let mut widx = 0usize;
    for layer in &spec.model.layers {
        match layer {
            LayerSpec::Linear { .. } => {
                let next = linear_forward(ctx, &cur, &w.tensors[widx])?;
                tapes.push(Tape::Linear { x: cur, widx });
                widx += 1;
                cur = next;
            }
            LayerSpec::Relu => {
                let (next, signs) = relu(ctx, &cur)?;
                tapes.push(Tape::Relu { signs });
                cur = next;
            }
            LayerSpec::Conv2d { filters, .. } => {
                let geom = layer.geometry()?.expect("conv");
                let (rows, _) = cur.dims2()?;
                let next = ctx.scoped("conv2d", |ctx| {
                    let patches = batched_patches(&cur, &geom)?;
                    let wm = w.tensors[widx]
                        .reshape(vec![*filters, geom.patch_len()])?
                        .transpose2()?;
                    let raw = mat_mul(ctx, &patches, &wm)?;
                    let y = trunc_pr_width(ctx, &raw.data, p.f, p.k() + p.f)?;
                    let y = ShareTensor::matrix(rows * geom.patches(), *filters, y)?;
                    let mut data = Vec::with_capacity(rows * filters * geom.patches());
                    for r in 0..rows {
                        let seg = row_slice(&y, r * geom.patches(), (r + 1) * geom.patches())?;
                        data.extend(seg.transpose2()?.data);
                    }
                    ShareTensor::matrix(rows, filters * geom.patches(), data)
                })?;
                tapes.push(Tape::Conv { x: cur, geom, filters: *filters, widx });
                widx += 1;
                cur = next;
            }
            LayerSpec::Maxpool { window } => {
                let (rows, in_cols) = cur.dims2()?;
                let mut windows = Vec::with_capacity(rows * in_cols / window);
                for r in 0..rows {
                    for wi in 0..in_cols / window {
                        windows.push(
                            (0..*window)
                                .map(|j| cur.at2(r, wi * window + j).clone())
                                .collect::<Vec<_>>(),
                        );
                    }
                }
                let pooled = maxpool_many(ctx, &windows)?;
                let mut maxes = Vec::with_capacity(pooled.len());
                let mut traces = Vec::with_capacity(pooled.len());
                for (m, tr) in pooled {
                    maxes.push(m);
                    traces.push(tr);
                }
                let next = ShareTensor::matrix(rows, in_cols / window, maxes)?;
                tapes.push(Tape::Maxpool { traces, window: *window, in_cols });
                cur = next;
            }
            LayerSpec::Dropout { p: drop_p } => {
                if training {
                    let (next, mask) = dropout(ctx, &cur, *drop_p)?;
                    tapes.push(Tape::Dropout { mask });
                    cur = next;
                }
                // Inference applies the identity: the 1/(1−p) compensation at
                // training time keeps activation scale constant.
            }
        }
    }
    Ok((cur, tapes))
}

/// Gradients of the squared-error-on-logits loss with respect to every
/// trainable layer, in layer order. Does not update the weights.
pub fn loss_gradients(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &Weights,
    x: &ShareTensor,
    targets: &ShareTensor,
) -> Result<Vec<ShareTensor>> {
    let p = &spec.params;
    let (logits, tapes) = forward(ctx, spec, w, x, true)?;
    let mut g = logits.sub(targets)?;
    let mut grads: Vec<Option<ShareTensor>> = vec![None; w.tensors.len()];
    for (li, tape) in tapes.into_iter().enumerate().rev() {
        match tape {
            Tape::Linear { x, widx } => {
                if li > 0 {
                    let (dx, dw) = linear_backward(ctx, &x, &w.tensors[widx], &g)?;
                    grads[widx] = Some(dw);
                    g = dx;
                } else {
                    // First layer: nothing upstream needs dx, save the triple.
                    let dw = ctx.scoped("linear_bwd", |ctx| {
                        let raw = mat_mul(ctx, &x.transpose2()?, &g)?;
                        let data = trunc_pr_width(ctx, &raw.data, p.f, p.k() + p.f)?;
                        ShareTensor::new(raw.dims.clone(), data)
                    })?;
                    grads[widx] = Some(dw);
                }
            }
            Tape::Relu { signs } => {
                g = drelu(ctx, &g, &signs)?;
            }
            Tape::Conv { x, geom, filters, widx } => {
                let (rows, _) = x.dims2()?;
                let np = geom.patches();
                let (dw, dx) = ctx.scoped("conv2d_bwd", |ctx| {
                    // Upstream gradient, un-transposed back to patch rows.
                    let mut gm_data = Vec::with_capacity(rows * np * filters);
                    for r in 0..rows {
                        for pr in 0..np {
                            for oc in 0..filters {
                                gm_data.push(g.at2(r, oc * np + pr).clone());
                            }
                        }
                    }
                    let gm = ShareTensor::matrix(rows * np, filters, gm_data)?;
                    let patches = batched_patches(&x, &geom)?;
                    let raw_dw = mat_mul(ctx, &patches.transpose2()?, &gm)?;
                    let dwm_data = trunc_pr_width(ctx, &raw_dw.data, p.f, p.k() + p.f)?;
                    let dwm = ShareTensor::matrix(geom.patch_len(), filters, dwm_data)?;
                    let dfilters = dwm.transpose2()?.reshape(vec![
                        filters,
                        geom.channels,
                        geom.kh,
                        geom.kw,
                    ])?;
                    let dx = if li > 0 {
                        let wm = w.tensors[widx].reshape(vec![filters, geom.patch_len()])?;
                        let raw_dp = mat_mul(ctx, &gm, &wm)?;
                        let dp_data = trunc_pr_width(ctx, &raw_dp.data, p.f, p.k() + p.f)?;
                        let dp = ShareTensor::matrix(rows * np, geom.patch_len(), dp_data)?;
                        let mut data = Vec::new();
                        for r in 0..rows {
                            let seg = row_slice(&dp, r * np, (r + 1) * np)?;
                            let plane = col2im(&seg, &geom)?;
                            data.extend(plane.data);
                        }
                        Some(ShareTensor::matrix(
                            rows,
                            geom.channels * geom.height * geom.width,
                            data,
                        )?)
                    } else {
                        None
                    };
                    Ok((dfilters, dx))
                })?;
                grads[widx] = Some(dw);
                if let Some(dx) = dx {
                    g = dx;
                }
            }
            Tape::Maxpool { traces, window, in_cols } => {
                let (rows, out_cols) = g.dims2()?;
                g = ctx.scoped("maxpool_bwd", |ctx| {
                    let onehots = dmaxpool_many(ctx, &traces)?;
                    let mut xs = Vec::with_capacity(rows * in_cols);
                    let mut bits = Vec::with_capacity(rows * in_cols);
                    for r in 0..rows {
                        for wi in 0..out_cols {
                            let hot = &onehots[r * out_cols + wi];
                            for b in hot {
                                xs.push(g.at2(r, wi).clone());
                                bits.push(b.clone());
                            }
                        }
                    }
                    debug_assert_eq!(out_cols * window, in_cols);
                    let scattered = mul_by_bits(ctx, &xs, &bits)?;
                    ShareTensor::matrix(rows, in_cols, scattered)
                })?;
            }
            Tape::Dropout { mut mask } => {
                g = ddropout(ctx, &g, &mut mask)?;
            }
        }
    }
    grads
        .into_iter()
        .map(|g| g.ok_or_else(|| Error::Params("missing gradient for a trainable layer".into())))
        .collect()
}

/// One mini-batch SGD step: gradients, then w ← w − (η/B)·Δ via integer
/// scaling and probabilistic truncation.
pub fn sgd_step(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &mut Weights,
    x: &ShareTensor,
    targets: &ShareTensor,
) -> Result<()> {
    let grads = loss_gradients(ctx, spec, w, x, targets)?;
    apply_update(ctx, spec, w, &grads)
}

fn apply_update(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &mut Weights,
    grads: &[ShareTensor],
) -> Result<()> {
    let p = &spec.params;
    let lr = spec.lr_step()?;
    let lr_u = BigUint::from(lr.unsigned_abs());
    let width = p.k() + lr_u.bits() as usize;
    for (wt, gt) in w.tensors.iter_mut().zip(grads) {
        let scaled: Vec<FxShare> = gt.data.iter().map(|s| s.scale_int(&lr_u)).collect();
        let step = trunc_pr_width(ctx, &scaled, p.f, width)?;
        let stepped = ShareTensor::new(gt.dims.clone(), step)?;
        *wt = wt.sub(&stepped)?;
    }
    Ok(())
}

/// One pass over the shared training set in batch order.
pub fn run_epoch(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &mut Weights,
    x: &ShareTensor,
    targets: &ShareTensor,
) -> Result<()> {
    let (n, _) = x.dims2()?;
    if n % spec.batch != 0 {
        return Err(Error::Params("training set size must be a multiple of the batch".into()));
    }
    for b in 0..n / spec.batch {
        let xb = row_slice(x, b * spec.batch, (b + 1) * spec.batch)?;
        let tb = row_slice(targets, b * spec.batch, (b + 1) * spec.batch)?;
        sgd_step(ctx, spec, w, &xb, &tb)?;
    }
    Ok(())
}

/// Evaluate and open class predictions, nothing else: logits go through the
/// pooling argmax and only the one-hot indicator is opened.
pub fn predict_open(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    w: &Weights,
    x: &ShareTensor,
) -> Result<Vec<usize>> {
    let (logits, _) = forward(ctx, spec, w, x, false)?;
    let (rows, classes) = logits.dims2()?;
    let windows: Vec<Vec<FxShare>> = (0..rows)
        .map(|r| (0..classes).map(|c| logits.at2(r, c).clone()).collect())
        .collect();
    let pooled = maxpool_many(ctx, &windows)?;
    let traces: Vec<MaxpoolTrace> = pooled.into_iter().map(|(_, tr)| tr).collect();
    let onehots = dmaxpool_many(ctx, &traces)?;
    let flat: Vec<AuthShare> = onehots.iter().flatten().cloned().collect();
    let opened = open_auth(ctx, &flat)?;
    let mut preds = Vec::with_capacity(rows);
    let mut off = 0usize;
    for hot in &onehots {
        let seg = &opened[off..off + hot.len()];
        off += hot.len();
        let pos = seg.iter().position(|v| v.is_one()).unwrap_or(0);
        preds.push(pos);
    }
    Ok(preds)
}

// ---------------------------------------------------------------------------
// The full training job
// ---------------------------------------------------------------------------

/// Per-epoch metrics record. `line` is the log format; `deterministic_line`
/// drops wall-clock seconds so equal-seed runs compare byte-identical.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_proxy: f64,
    pub accuracy: f64,
    pub rounds: u64,
    pub bytes: u64,
    pub seconds: f64,
}

impl EpochStats {
    pub fn deterministic_line(&self) -> String {
        format!(
            "epoch={} loss_proxy={:.6} accuracy={:.6} rounds={} bytes={}",
            self.epoch, self.loss_proxy, self.accuracy, self.rounds, self.bytes
        )
    }

    pub fn line(&self) -> String {
        format!("{} seconds={:.3}", self.deterministic_line(), self.seconds)
    }
}

/// Train a model over shared data. `owner` provides the training features
/// and labels and the evaluation features; evaluation labels are public
/// (they only ever meet opened predictions, inside the metric).
#[allow(clippy::too_many_arguments)]
pub fn train(
    ctx: &mut PartyCtx,
    spec: &TrainSpec,
    owner: usize,
    data: Option<&LabeledData>,
    n_train: usize,
    eval: Option<&LabeledData>,
    eval_labels: &[usize],
) -> Result<(Weights, Vec<EpochStats>)> {
    spec.validate()?;
    let p = spec.params.clone();
    let classes = spec.model.output_dim()?;
    if eval_labels.is_empty() {
        return Err(Error::Params("training needs a nonempty evaluation set".into()));
    }
    let mut w = init_weights(ctx, spec)?;
    let x = share_rows(
        ctx,
        owner,
        data.map(|d| d.features.as_slice()),
        n_train,
        spec.model.input,
        &p,
    )?;
    let targets = share_targets(
        ctx,
        owner,
        data.map(|d| d.labels.as_slice()),
        n_train,
        classes,
        &p,
    )?;
    let ex = share_rows(
        ctx,
        owner,
        eval.map(|d| d.features.as_slice()),
        eval_labels.len(),
        spec.model.input,
        &p,
    )?;
    let mut stats = Vec::with_capacity(spec.epochs);
    for epoch in 1..=spec.epochs {
        let t0 = Instant::now();
        let rounds0 = ctx.counters.total_rounds;
        let bytes0 = ctx.counters.total_bytes_sent;
        run_epoch(ctx, spec, &mut w, &x, &targets)?;
        let preds = predict_open(ctx, spec, &w, &ex)?;
        // Settle every deferred tag comparison before trusting the epoch's
        // opened values in the metrics.
        mac_check(ctx, &p.q)?;
        let acc = agreement(&preds, eval_labels);
        stats.push(EpochStats {
            epoch,
            loss_proxy: 1.0 - acc,
            accuracy: acc,
            rounds: ctx.counters.total_rounds - rounds0,
            bytes: ctx.counters.total_bytes_sent - bytes0,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok((w, stats))
}
