//! Preprocessing store: per-party queues of offline material (triples, shared
//! bits, random values, matrix triples, biased bits, MAC key shares), with a
//! binary file format and a seeded dealer for hybrid-model test setups.
//!
//! Record layout: `[1-byte kind][4-byte modulus length][modulus bytes]`
//! `[length-prefixed integer list]`. Every record is consumed at most once;
//! consumption is tallied per kind for auditing.

use crate::modular::{split_additive, Modulus};
use crate::{Error, Result};
use num_bigint::BigUint;
use num_traits::Zero;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

pub const KIND_TRIPLE: u8 = 1;
pub const KIND_BIT: u8 = 2;
pub const KIND_RNDINT: u8 = 3;
pub const KIND_MATRIX: u8 = 4;
pub const KIND_PBIT: u8 = 5;
pub const KIND_MACKEY: u8 = 6;

/// One party's slice of a Beaver triple, MAC shares optional.
#[derive(Debug, Clone)]
pub struct TripleRec {
    pub a: BigUint,
    pub b: BigUint,
    pub c: BigUint,
    pub macs: Option<(BigUint, BigUint, BigUint)>,
}

#[derive(Debug, Clone)]
pub struct BitRec {
    pub b: BigUint,
    pub mac: Option<BigUint>,
}

#[derive(Debug, Clone)]
pub struct RndIntRec {
    pub r: BigUint,
    pub mac: Option<BigUint>,
}

/// Matrix triple slice with row-major flattened entries; dims are
/// (rows of A, inner, cols of B).
#[derive(Debug, Clone)]
pub struct MatrixTripleRec {
    pub dims: (usize, usize, usize),
    pub a: Vec<BigUint>,
    pub b: Vec<BigUint>,
    pub c: Vec<BigUint>,
    pub macs: Option<(Vec<BigUint>, Vec<BigUint>, Vec<BigUint>)>,
}

/// Bernoulli bit with bias key = round(p * 2^16).
#[derive(Debug, Clone)]
pub struct PBitRec {
    pub p_key: u32,
    pub b: BigUint,
    pub mac: Option<BigUint>,
}

type ModKey = Vec<u8>;

fn mod_key(t: &Modulus) -> ModKey {
    t.value().to_bytes_be()
}

#[derive(Default)]
pub struct PreprocStore {
    triples: BTreeMap<ModKey, VecDeque<TripleRec>>,
    bits: BTreeMap<ModKey, VecDeque<BitRec>>,
    rndints: BTreeMap<ModKey, VecDeque<RndIntRec>>,
    matrices: BTreeMap<(ModKey, (usize, usize, usize)), VecDeque<MatrixTripleRec>>,
    pbits: BTreeMap<(ModKey, u32), VecDeque<PBitRec>>,
    mac_keys: BTreeMap<ModKey, BigUint>,
    consumed: BTreeMap<String, u64>,
}

impl PreprocStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn consume(&mut self, label: String) {
        *self.consumed.entry(label).or_default() += 1;
    }

    pub fn push_triple(&mut self, t: &Modulus, rec: TripleRec) {
        self.triples.entry(mod_key(t)).or_default().push_back(rec);
    }

    pub fn take_triple(&mut self, t: &Modulus) -> Result<TripleRec> {
        let rec = self
            .triples
            .get_mut(&mod_key(t))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::OfflineDepleted(format!("triple mod {}", t.value())))?;
        self.consume(format!("triple/{}", t.value()));
        Ok(rec)
    }

    pub fn push_bit(&mut self, t: &Modulus, rec: BitRec) {
        self.bits.entry(mod_key(t)).or_default().push_back(rec);
    }

    pub fn take_bit(&mut self, t: &Modulus) -> Result<BitRec> {
        let rec = self
            .bits
            .get_mut(&mod_key(t))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::OfflineDepleted(format!("bit mod {}", t.value())))?;
        self.consume(format!("bit/{}", t.value()));
        Ok(rec)
    }

    pub fn push_rndint(&mut self, t: &Modulus, rec: RndIntRec) {
        self.rndints.entry(mod_key(t)).or_default().push_back(rec);
    }

    pub fn take_rndint(&mut self, t: &Modulus) -> Result<RndIntRec> {
        let rec = self
            .rndints
            .get_mut(&mod_key(t))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| Error::OfflineDepleted(format!("rndint mod {}", t.value())))?;
        self.consume(format!("rndint/{}", t.value()));
        Ok(rec)
    }

    pub fn push_matrix(&mut self, t: &Modulus, rec: MatrixTripleRec) {
        self.matrices
            .entry((mod_key(t), rec.dims))
            .or_default()
            .push_back(rec);
    }

    pub fn take_matrix(
        &mut self,
        t: &Modulus,
        dims: (usize, usize, usize),
    ) -> Result<MatrixTripleRec> {
        let rec = self
            .matrices
            .get_mut(&(mod_key(t), dims))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| {
                Error::OfflineDepleted(format!("matrix triple {dims:?} mod {}", t.value()))
            })?;
        self.consume(format!("matrix{:?}/{}", rec.dims, t.value()));
        Ok(rec)
    }

    pub fn push_pbit(&mut self, t: &Modulus, rec: PBitRec) {
        self.pbits
            .entry((mod_key(t), rec.p_key))
            .or_default()
            .push_back(rec);
    }

    pub fn take_pbit(&mut self, t: &Modulus, p_key: u32) -> Result<PBitRec> {
        let rec = self
            .pbits
            .get_mut(&(mod_key(t), p_key))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| {
                Error::OfflineDepleted(format!("pbit({p_key}) mod {}", t.value()))
            })?;
        self.consume(format!("pbit({p_key})/{}", t.value()));
        Ok(rec)
    }

    pub fn set_mac_key(&mut self, t: &Modulus, alpha_share: BigUint) {
        self.mac_keys.insert(mod_key(t), alpha_share);
    }

    pub fn mac_key(&self, t: &Modulus) -> Option<&BigUint> {
        self.mac_keys.get(&mod_key(t))
    }

    pub fn count_triples(&self, t: &Modulus) -> usize {
        self.triples.get(&mod_key(t)).map_or(0, |q| q.len())
    }

    pub fn count_bits(&self, t: &Modulus) -> usize {
        self.bits.get(&mod_key(t)).map_or(0, |q| q.len())
    }

    pub fn count_rndints(&self, t: &Modulus) -> usize {
        self.rndints.get(&mod_key(t)).map_or(0, |q| q.len())
    }

    pub fn count_matrices(&self, t: &Modulus, dims: (usize, usize, usize)) -> usize {
        self.matrices.get(&(mod_key(t), dims)).map_or(0, |q| q.len())
    }

    pub fn count_pbits(&self, t: &Modulus, p_key: u32) -> usize {
        self.pbits.get(&(mod_key(t), p_key)).map_or(0, |q| q.len())
    }

    /// Per-kind totals consumed so far, for audit output.
    pub fn consumption_log(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.consumed {
            out.push_str(&format!("{k}: {v}\n"));
        }
        out
    }

    // ---- serialization ----------------------------------------------------

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for (mk, q) in &self.mac_keys {
            write_record(w, KIND_MACKEY, mk, &[q.clone()])?;
        }
        for (mk, q) in &self.triples {
            for rec in q {
                let mut ints = vec![rec.a.clone(), rec.b.clone(), rec.c.clone()];
                if let Some((ma, mb, mc)) = &rec.macs {
                    ints.extend([ma.clone(), mb.clone(), mc.clone()]);
                }
                write_record(w, KIND_TRIPLE, mk, &ints)?;
            }
        }
        for (mk, q) in &self.bits {
            for rec in q {
                let mut ints = vec![rec.b.clone()];
                if let Some(m) = &rec.mac {
                    ints.push(m.clone());
                }
                write_record(w, KIND_BIT, mk, &ints)?;
            }
        }
        for (mk, q) in &self.rndints {
            for rec in q {
                let mut ints = vec![rec.r.clone()];
                if let Some(m) = &rec.mac {
                    ints.push(m.clone());
                }
                write_record(w, KIND_RNDINT, mk, &ints)?;
            }
        }
        for ((mk, dims), q) in &self.matrices {
            for rec in q {
                let mut ints = vec![
                    BigUint::from(dims.0),
                    BigUint::from(dims.1),
                    BigUint::from(dims.2),
                ];
                ints.extend(rec.a.iter().cloned());
                ints.extend(rec.b.iter().cloned());
                ints.extend(rec.c.iter().cloned());
                if let Some((ma, mb, mc)) = &rec.macs {
                    ints.extend(ma.iter().cloned());
                    ints.extend(mb.iter().cloned());
                    ints.extend(mc.iter().cloned());
                }
                write_record(w, KIND_MATRIX, mk, &ints)?;
            }
        }
        for ((mk, p_key), q) in &self.pbits {
            for rec in q {
                let mut ints = vec![BigUint::from(*p_key)];
                ints.push(rec.b.clone());
                if let Some(m) = &rec.mac {
                    ints.push(m.clone());
                }
                write_record(w, KIND_PBIT, mk, &ints)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut store = PreprocStore::new();
        let mut at = 0usize;
        while at < bytes.len() {
            let (kind, mk, ints, next) = read_record(&bytes, at)?;
            at = next;
            let t = Modulus::new(BigUint::from_bytes_be(&mk));
            match kind {
                KIND_MACKEY => {
                    expect_len(&ints, 1, "mac key")?;
                    store.set_mac_key(&t, ints[0].clone());
                }
                KIND_TRIPLE => {
                    let macs = match ints.len() {
                        3 => None,
                        6 => Some((ints[3].clone(), ints[4].clone(), ints[5].clone())),
                        n => return Err(Error::Codec(format!("triple with {n} entries"))),
                    };
                    store.push_triple(
                        &t,
                        TripleRec {
                            a: ints[0].clone(),
                            b: ints[1].clone(),
                            c: ints[2].clone(),
                            macs,
                        },
                    );
                }
                KIND_BIT => {
                    let mac = match ints.len() {
                        1 => None,
                        2 => Some(ints[1].clone()),
                        n => return Err(Error::Codec(format!("bit with {n} entries"))),
                    };
                    store.push_bit(&t, BitRec { b: ints[0].clone(), mac });
                }
                KIND_RNDINT => {
                    let mac = match ints.len() {
                        1 => None,
                        2 => Some(ints[1].clone()),
                        n => return Err(Error::Codec(format!("rndint with {n} entries"))),
                    };
                    store.push_rndint(&t, RndIntRec { r: ints[0].clone(), mac });
                }
                KIND_MATRIX => {
                    if ints.len() < 3 {
                        return Err(Error::Codec("matrix record missing dims".into()));
                    }
                    let dims = (
                        to_usize(&ints[0])?,
                        to_usize(&ints[1])?,
                        to_usize(&ints[2])?,
                    );
                    let (r0, s0, t0) = dims;
                    let na = r0 * s0;
                    let nb = s0 * t0;
                    let nc = r0 * t0;
                    let body = &ints[3..];
                    let plain = na + nb + nc;
                    let macs;
                    if body.len() == plain {
                        macs = None;
                    } else if body.len() == 2 * plain {
                        macs = Some((
                            body[plain..plain + na].to_vec(),
                            body[plain + na..plain + na + nb].to_vec(),
                            body[plain + na + nb..].to_vec(),
                        ));
                    } else {
                        return Err(Error::Codec(format!(
                            "matrix record with {} entries for dims {dims:?}",
                            body.len()
                        )));
                    }
                    store.push_matrix(
                        &t,
                        MatrixTripleRec {
                            dims,
                            a: body[..na].to_vec(),
                            b: body[na..na + nb].to_vec(),
                            c: body[na + nb..na + nb + nc].to_vec(),
                            macs,
                        },
                    );
                }
                KIND_PBIT => {
                    if ints.len() < 2 || ints.len() > 3 {
                        return Err(Error::Codec(format!("pbit with {} entries", ints.len())));
                    }
                    let p_key = to_usize(&ints[0])? as u32;
                    let mac = ints.get(2).cloned();
                    store.push_pbit(&t, PBitRec { p_key, b: ints[1].clone(), mac });
                }
                other => return Err(Error::Codec(format!("unknown record kind {other}"))),
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}

fn expect_len(ints: &[BigUint], n: usize, what: &str) -> Result<()> {
    if ints.len() != n {
        return Err(Error::Codec(format!("{what}: expected {n} entries, got {}", ints.len())));
    }
    Ok(())
}

fn to_usize(v: &BigUint) -> Result<usize> {
    u64::try_from(v)
        .map(|x| x as usize)
        .map_err(|_| Error::Codec("oversized dimension".into()))
}

fn write_record<W: Write>(w: &mut W, kind: u8, mk: &[u8], ints: &[BigUint]) -> Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(mk.len() as u32).to_be_bytes())?;
    w.write_all(mk)?;
    w.write_all(&crate::wire::encode_ints(ints))?;
    Ok(())
}

fn read_record(bytes: &[u8], mut at: usize) -> Result<(u8, Vec<u8>, Vec<BigUint>, usize)> {
    if bytes.len() < at + 5 {
        return Err(Error::Codec("truncated record header".into()));
    }
    let kind = bytes[at];
    at += 1;
    let mlen = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    at += 4;
    if bytes.len() < at + mlen + 4 {
        return Err(Error::Codec("truncated record modulus".into()));
    }
    let mk = bytes[at..at + mlen].to_vec();
    at += mlen;
    let count = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let mut scan = at + 4;
    for _ in 0..count {
        if bytes.len() < scan + 4 {
            return Err(Error::Codec("truncated record integer".into()));
        }
        let len = u32::from_be_bytes(bytes[scan..scan + 4].try_into().unwrap()) as usize;
        scan += 4 + len;
        if bytes.len() < scan {
            return Err(Error::Codec("truncated record integer body".into()));
        }
    }
    let ints = crate::wire::decode_ints(&bytes[at..scan])?;
    Ok((kind, mk, ints, scan))
}

// ---- dealer ---------------------------------------------------------------

/// Seeded dealer producing consistent offline material across all parties.
/// Stands in for the generation pipeline in hybrid-model tests and the
/// training acceptance run; the protocol generators live in `triples`.
pub struct Dealer {
    rng: ChaCha20Rng,
    n: usize,
}

impl Dealer {
    pub fn new(seed: u64, n: usize) -> Self {
        Dealer { rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6465_616c_6572), n }
    }

    /// Deal a MAC key: returns per-party alpha shares and installs them.
    pub fn deal_mac_key(&mut self, t: &Modulus, stores: &mut [PreprocStore]) -> BigUint {
        let alpha = t.sample(&mut self.rng);
        let shares = split_additive(t, &alpha, self.n, &mut self.rng);
        for (store, sh) in stores.iter_mut().zip(shares) {
            store.set_mac_key(t, sh);
        }
        alpha
    }

    fn deal_value(
        &mut self,
        t: &Modulus,
        value: &BigUint,
        alpha: Option<&BigUint>,
    ) -> (Vec<BigUint>, Option<Vec<BigUint>>) {
        let shares = split_additive(t, value, self.n, &mut self.rng);
        let macs = alpha.map(|a| {
            let tag = t.mul(a, value);
            split_additive(t, &tag, self.n, &mut self.rng)
        });
        (shares, macs)
    }

    pub fn deal_triples(
        &mut self,
        t: &Modulus,
        stores: &mut [PreprocStore],
        count: usize,
        alpha: Option<&BigUint>,
    ) {
        for _ in 0..count {
            let a = t.sample(&mut self.rng);
            let b = t.sample(&mut self.rng);
            let c = t.mul(&a, &b);
            let (sa, ma) = self.deal_value(t, &a, alpha);
            let (sb, mb) = self.deal_value(t, &b, alpha);
            let (sc, mc) = self.deal_value(t, &c, alpha);
            for i in 0..self.n {
                let macs = match (&ma, &mb, &mc) {
                    (Some(x), Some(y), Some(z)) => {
                        Some((x[i].clone(), y[i].clone(), z[i].clone()))
                    }
                    _ => None,
                };
                stores[i].push_triple(
                    t,
                    TripleRec { a: sa[i].clone(), b: sb[i].clone(), c: sc[i].clone(), macs },
                );
            }
        }
    }

    pub fn deal_bits(
        &mut self,
        t: &Modulus,
        stores: &mut [PreprocStore],
        count: usize,
        alpha: Option<&BigUint>,
    ) {
        for _ in 0..count {
            let bit = BigUint::from(self.rng.next_u32() & 1);
            let (sb, mb) = self.deal_value(t, &bit, alpha);
            for i in 0..self.n {
                stores[i].push_bit(
                    t,
                    BitRec { b: sb[i].clone(), mac: mb.as_ref().map(|m| m[i].clone()) },
                );
            }
        }
    }

    pub fn deal_rndints(
        &mut self,
        t: &Modulus,
        stores: &mut [PreprocStore],
        count: usize,
        alpha: Option<&BigUint>,
    ) {
        for _ in 0..count {
            let r = t.sample(&mut self.rng);
            let (sr, mr) = self.deal_value(t, &r, alpha);
            for i in 0..self.n {
                stores[i].push_rndint(
                    t,
                    RndIntRec { r: sr[i].clone(), mac: mr.as_ref().map(|m| m[i].clone()) },
                );
            }
        }
    }

    pub fn deal_matrix_triples(
        &mut self,
        t: &Modulus,
        stores: &mut [PreprocStore],
        dims: (usize, usize, usize),
        count: usize,
        alpha: Option<&BigUint>,
    ) {
        let (r, s, c) = dims;
        for _ in 0..count {
            let a: Vec<BigUint> = (0..r * s).map(|_| t.sample(&mut self.rng)).collect();
            let b: Vec<BigUint> = (0..s * c).map(|_| t.sample(&mut self.rng)).collect();
            let mut prod = vec![BigUint::zero(); r * c];
            for i in 0..r {
                for k in 0..s {
                    for j in 0..c {
                        let term = t.mul(&a[i * s + k], &b[k * c + j]);
                        prod[i * c + j] = t.add(&prod[i * c + j], &term);
                    }
                }
            }
            // deal entrywise: matrices[party][0..3] = A, B, C share vectors
            let deal_all = |me: &mut Self, vals: &[BigUint]| {
                let mut shares: Vec<Vec<BigUint>> = vec![Vec::new(); me.n];
                let mut macs: Vec<Vec<BigUint>> = vec![Vec::new(); me.n];
                for v in vals {
                    let (sv, mv) = me.deal_value(t, v, alpha);
                    for i in 0..me.n {
                        shares[i].push(sv[i].clone());
                        if let Some(m) = &mv {
                            macs[i].push(m[i].clone());
                        }
                    }
                }
                (shares, macs)
            };
            let (sa, ma) = deal_all(self, &a);
            let (sb, mb) = deal_all(self, &b);
            let (sc, mc) = deal_all(self, &prod);
            for i in 0..self.n {
                let macs = alpha.map(|_| (ma[i].clone(), mb[i].clone(), mc[i].clone()));
                stores[i].push_matrix(
                    t,
                    MatrixTripleRec {
                        dims,
                        a: sa[i].clone(),
                        b: sb[i].clone(),
                        c: sc[i].clone(),
                        macs,
                    },
                );
            }
        }
    }

    pub fn deal_pbits(
        &mut self,
        t: &Modulus,
        stores: &mut [PreprocStore],
        p: f64,
        count: usize,
        alpha: Option<&BigUint>,
    ) {
        let p_key = p_key_of(p);
        for _ in 0..count {
            let draw = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let bit = BigUint::from(u32::from(draw >= p)); // 0 = dropped
            let (sb, mb) = self.deal_value(t, &bit, alpha);
            for i in 0..self.n {
                stores[i].push_pbit(
                    t,
                    PBitRec {
                        p_key,
                        b: sb[i].clone(),
                        mac: mb.as_ref().map(|m| m[i].clone()),
                    },
                );
            }
        }
    }
}

/// Bias key used to index Bernoulli bits in the store.
pub fn p_key_of(p: f64) -> u32 {
    (p * 65536.0).round() as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modular::sum_mod;

    #[test]
    fn dealer_material_reconstructs() {
        let t = Modulus::from_u64(101);
        let mut stores: Vec<PreprocStore> = (0..3).map(|_| PreprocStore::new()).collect();
        let mut dealer = Dealer::new(9, 3);
        let alpha = dealer.deal_mac_key(&t, &mut stores);
        dealer.deal_triples(&t, &mut stores, 5, Some(&alpha));
        for _ in 0..5 {
            let recs: Vec<TripleRec> =
                stores.iter_mut().map(|s| s.take_triple(&t).unwrap()).collect();
            let a = sum_mod(&t, &recs.iter().map(|r| r.a.clone()).collect::<Vec<_>>());
            let b = sum_mod(&t, &recs.iter().map(|r| r.b.clone()).collect::<Vec<_>>());
            let c = sum_mod(&t, &recs.iter().map(|r| r.c.clone()).collect::<Vec<_>>());
            assert_eq!(t.mul(&a, &b), c);
            let mc = sum_mod(
                &t,
                &recs.iter().map(|r| r.macs.clone().unwrap().2).collect::<Vec<_>>(),
            );
            assert_eq!(t.mul(&alpha, &c), mc);
        }
        assert!(stores[0].take_triple(&t).is_err(), "store must deplete");
    }

    #[test]
    fn store_file_roundtrip() {
        let t = Modulus::from_u64(97);
        let mut stores: Vec<PreprocStore> = (0..2).map(|_| PreprocStore::new()).collect();
        let mut dealer = Dealer::new(4, 2);
        let alpha = dealer.deal_mac_key(&t, &mut stores);
        dealer.deal_triples(&t, &mut stores, 2, Some(&alpha));
        dealer.deal_bits(&t, &mut stores, 3, Some(&alpha));
        dealer.deal_rndints(&t, &mut stores, 1, None);
        dealer.deal_matrix_triples(&t, &mut stores, (2, 2, 2), 1, Some(&alpha));
        dealer.deal_pbits(&t, &mut stores, 0.25, 2, Some(&alpha));

        let mut buf = Vec::new();
        stores[0].write_to(&mut buf).unwrap();
        let mut reread = PreprocStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(reread.count_triples(&t), 2);
        assert_eq!(reread.count_bits(&t), 3);
        assert_eq!(reread.count_rndints(&t), 1);
        assert_eq!(reread.count_matrices(&t, (2, 2, 2)), 1);
        assert_eq!(reread.count_pbits(&t, p_key_of(0.25)), 2);
        assert_eq!(reread.mac_key(&t), stores[0].mac_key(&t));
        let orig = stores[0].take_triple(&t).unwrap();
        let back = reread.take_triple(&t).unwrap();
        assert_eq!(orig.a, back.a);
        assert_eq!(orig.macs.unwrap().0, back.macs.unwrap().0);
    }

    #[test]
    fn corrupted_record_flagged() {
        let t = Modulus::from_u64(97);
        let mut stores: Vec<PreprocStore> = (0..2).map(|_| PreprocStore::new()).collect();
        let mut dealer = Dealer::new(4, 2);
        dealer.deal_triples(&t, &mut stores, 1, None);
        let mut buf = Vec::new();
        stores[0].write_to(&mut buf).unwrap();
        let at = buf.len() - 1;
        buf.truncate(at); // chop one byte
        assert!(PreprocStore::read_from(&mut buf.as_slice()).is_err());
    }
}
