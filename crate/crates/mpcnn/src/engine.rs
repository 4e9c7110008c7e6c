//! Per-party protocol engine: collectives over a transport, scoped counters,
//! deterministic randomness, commitments, and the deferred MAC queue.

use crate::counters::Counters;
use crate::modular::Modulus;
use crate::store::PreprocStore;
use crate::transport::Transport;
use crate::wire::{Frame, FrameKind};
use crate::{Error, Result};
use num_bigint::BigUint;
use num_traits::Zero;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::time::Duration;

/// Hook for fault-injection tests. Implementations corrupt selected protocol
/// actions; the default passes everything through honestly.
pub trait Adversary: Send {
    /// Called before a frame is sent; may tamper with the payload.
    fn on_send(
        &mut self,
        _scope: Option<&str>,
        _kind: FrameKind,
        _round: u32,
        _to: usize,
        _ints: &mut Vec<BigUint>,
    ) {
    }

    /// Called when this party contributes a locally chosen value
    /// (e.g. the bit it deals into a shared-bit generation).
    fn contribute(&mut self, _label: &str, honest: BigUint) -> BigUint {
        honest
    }
}

struct NullAdversary;
impl Adversary for NullAdversary {}

/// Deferred MAC state for authenticated openings over one modulus.
pub struct MacSession {
    pub modulus: Modulus,
    pub alpha_share: BigUint,
    /// Key epoch; bumped when the key share is replaced (e.g. after the
    /// ring-to-field key conversion).
    pub key_id: u32,
    /// (opened value, this party's mac share) pairs awaiting a batched check.
    pub queue: Vec<(BigUint, BigUint)>,
}

pub struct PartyCtx {
    pub index: usize,
    pub n: usize,
    pub session: u64,
    pub rng: ChaCha20Rng,
    pub counters: Counters,
    pub store: PreprocStore,
    pub macs: Vec<MacSession>,
    pub round_latency: Option<Duration>,
    transport: Box<dyn Transport>,
    round: u32,
    transcript: Sha256,
    transcript_bytes: u64,
    adversary: Box<dyn Adversary>,
}

impl PartyCtx {
    pub fn new(transport: Box<dyn Transport>, session: u64, seed: u64) -> Self {
        let index = transport.index();
        let n = transport.party_count();
        PartyCtx {
            index,
            n,
            session,
            rng: party_rng(seed, index),
            counters: Counters::new(),
            store: PreprocStore::new(),
            macs: Vec::new(),
            round_latency: None,
            transport,
            round: 0,
            transcript: Sha256::new(),
            transcript_bytes: 0,
            adversary: Box::new(NullAdversary),
        }
    }

    pub fn set_adversary(&mut self, a: Box<dyn Adversary>) {
        self.adversary = a;
    }

    /// Honest contribution values route through the adversary hook so tests
    /// can inject corruptions.
    pub fn contribute(&mut self, label: &str, honest: BigUint) -> BigUint {
        self.adversary.contribute(label, honest)
    }

    /// Install (or replace) this party's MAC key share for modulus `t`.
    /// Replacing an existing key starts a new epoch.
    pub fn install_mac_key(&mut self, t: &Modulus, alpha_share: BigUint) -> u32 {
        if let Some(s) = self.macs.iter_mut().find(|s| s.modulus.same(t)) {
            s.alpha_share = alpha_share;
            s.key_id += 1;
            s.queue.clear();
            return s.key_id;
        }
        self.macs.push(MacSession {
            modulus: t.clone(),
            alpha_share,
            key_id: 0,
            queue: Vec::new(),
        });
        0
    }

    pub fn mac_session(&self, t: &Modulus) -> Option<&MacSession> {
        self.macs.iter().find(|s| s.modulus.same(t))
    }

    /// MAC session for `t`, created on first use from the key share in the
    /// preprocessing store.
    pub fn mac_session_mut(&mut self, t: &Modulus) -> Result<&mut MacSession> {
        if let Some(i) = self.macs.iter().position(|s| s.modulus.same(t)) {
            return Ok(&mut self.macs[i]);
        }
        let share = self
            .store
            .mac_key(t)
            .cloned()
            .ok_or_else(|| Error::Params(format!("no MAC key for modulus of {} bits", t.bits())))?;
        self.macs.push(MacSession {
            modulus: t.clone(),
            alpha_share: share,
            key_id: 0,
            queue: Vec::new(),
        });
        Ok(self.macs.last_mut().unwrap())
    }

    /// Run `f` with a named counter scope open.
    pub fn scoped<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        self.counters.push_scope(name);
        let out = f(self);
        self.counters.pop_scope();
        out
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    /// Digest of every frame sent and received by this party, in order.
    pub fn transcript_hash(&self) -> [u8; 32] {
        self.transcript.clone().finalize().into()
    }

    pub fn transcript_bytes(&self) -> u64 {
        self.transcript_bytes
    }

    fn log_frame(&mut self, outgoing: bool, peer: usize, bytes: &[u8]) {
        self.transcript.update([outgoing as u8]);
        self.transcript.update((peer as u16).to_be_bytes());
        self.transcript.update(bytes);
        self.transcript_bytes += bytes.len() as u64;
    }

    fn send_frame(
        &mut self,
        to: usize,
        kind: FrameKind,
        fallback: &str,
        mut ints: Vec<BigUint>,
    ) -> Result<()> {
        let scope = self.counters.current_scope().map(|s| s.to_string());
        self.adversary
            .on_send(scope.as_deref(), kind, self.round, to, &mut ints);
        let frame = Frame::new(kind, self.session, self.round, ints);
        let bytes = frame.encode();
        self.counters.record_sent(fallback, bytes.len() as u64);
        self.log_frame(true, to, &bytes);
        self.transport.send(to, &bytes)
    }

    fn recv_frame(&mut self, from: usize, kind: FrameKind, fallback: &str) -> Result<Vec<BigUint>> {
        let bytes = self.transport.recv(from)?;
        self.counters.record_received(fallback, bytes.len() as u64);
        self.log_frame(false, from, &bytes);
        let frame = Frame::decode(&bytes)?;
        if frame.session != self.session || frame.kind != kind || frame.round != self.round {
            return Err(Error::Desync {
                expected: format!("kind {kind:?} round {} session {}", self.round, self.session),
                got: format!(
                    "kind {:?} round {} session {}",
                    frame.kind, frame.round, frame.session
                ),
            });
        }
        Ok(frame.ints)
    }

    fn finish_round(&mut self) {
        self.round += 1;
        if let Some(d) = self.round_latency {
            std::thread::sleep(d);
        }
    }

    /// Broadcast `ints` to every peer and collect everyone's batch.
    /// Returns `out[i]` = party i's integers (own batch included). One round.
    pub fn exchange(
        &mut self,
        kind: FrameKind,
        fallback: &str,
        ints: Vec<BigUint>,
    ) -> Result<Vec<Vec<BigUint>>> {
        self.counters.record_round(fallback);
        for to in 0..self.n {
            if to != self.index {
                self.send_frame(to, kind, fallback, ints.clone())?;
            }
        }
        let mut out = vec![Vec::new(); self.n];
        for from in 0..self.n {
            if from == self.index {
                out[from] = ints.clone();
            } else {
                out[from] = self.recv_frame(from, kind, fallback)?;
            }
        }
        self.finish_round();
        Ok(out)
    }

    /// Send `rows[j]` to party j and collect what each party sent here.
    /// `out[i]` = party i's row for this party (own row kept). One round.
    pub fn scatter(
        &mut self,
        kind: FrameKind,
        fallback: &str,
        rows: Vec<Vec<BigUint>>,
    ) -> Result<Vec<Vec<BigUint>>> {
        assert_eq!(rows.len(), self.n);
        self.counters.record_round(fallback);
        for (to, row) in rows.iter().enumerate() {
            if to != self.index {
                self.send_frame(to, kind, fallback, row.clone())?;
            }
        }
        let mut out = vec![Vec::new(); self.n];
        for from in 0..self.n {
            if from == self.index {
                out[from] = rows[from].clone();
            } else {
                out[from] = self.recv_frame(from, kind, fallback)?;
            }
        }
        self.finish_round();
        Ok(out)
    }

    /// Every party sends its batch to `owner`. The owner gets all batches
    /// (own included); everyone else gets `None`. One round.
    pub fn gather_to(
        &mut self,
        owner: usize,
        kind: FrameKind,
        fallback: &str,
        ints: Vec<BigUint>,
    ) -> Result<Option<Vec<Vec<BigUint>>>> {
        self.counters.record_round(fallback);
        let out = if self.index == owner {
            let mut all = vec![Vec::new(); self.n];
            for from in 0..self.n {
                if from == owner {
                    all[from] = ints.clone();
                } else {
                    all[from] = self.recv_frame(from, kind, fallback)?;
                }
            }
            Some(all)
        } else {
            self.send_frame(owner, kind, fallback, ints)?;
            None
        };
        self.finish_round();
        Ok(out)
    }

    /// `owner` broadcasts a batch everyone returns. One round.
    pub fn broadcast_from(
        &mut self,
        owner: usize,
        kind: FrameKind,
        fallback: &str,
        ints: Vec<BigUint>,
    ) -> Result<Vec<BigUint>> {
        self.counters.record_round(fallback);
        let out = if self.index == owner {
            for to in 0..self.n {
                if to != owner {
                    self.send_frame(to, kind, fallback, ints.clone())?;
                }
            }
            ints
        } else {
            self.recv_frame(owner, kind, fallback)?
        };
        self.finish_round();
        Ok(out)
    }

    /// Commit-then-reveal exchange of integer batches: two rounds, binding via
    /// SHA-256 over the encoded batch plus a 32-byte nonce.
    pub fn commit_reveal(
        &mut self,
        fallback: &str,
        ints: Vec<BigUint>,
    ) -> Result<Vec<Vec<BigUint>>> {
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let digest = commitment_digest(&ints, &nonce);
        let commits = self.exchange(FrameKind::Commit, fallback, vec![digest])?;

        let mut reveal = ints.clone();
        reveal.push(BigUint::from_bytes_be(&nonce));
        let reveals = self.exchange(FrameKind::Reveal, fallback, reveal)?;

        let mut out = vec![Vec::new(); self.n];
        for party in 0..self.n {
            let mut batch = reveals[party].clone();
            if batch.is_empty() {
                return Err(Error::CommitmentMismatch { party });
            }
            let nonce_int = batch.pop().unwrap();
            let mut nonce_bytes = nonce_int.to_bytes_be();
            if nonce_bytes.len() > 32 {
                return Err(Error::CommitmentMismatch { party });
            }
            while nonce_bytes.len() < 32 {
                nonce_bytes.insert(0, 0);
            }
            let expect = commitment_digest(&batch, nonce_bytes.as_slice().try_into().unwrap());
            if commits[party].len() != 1 || commits[party][0] != expect {
                return Err(Error::CommitmentMismatch { party });
            }
            out[party] = batch;
        }
        Ok(out)
    }

    /// Jointly sample `count` public residues mod `t` by commit-reveal seed
    /// contribution. Two rounds regardless of `count`.
    pub fn coin_flip(&mut self, t: &Modulus, count: usize) -> Result<Vec<BigUint>> {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        let contributions =
            self.commit_reveal("coin", vec![BigUint::from_bytes_be(&seed)])?;
        let mut h = Sha256::new();
        for c in &contributions {
            let bytes = c[0].to_bytes_be();
            h.update((bytes.len() as u32).to_be_bytes());
            h.update(&bytes);
        }
        let joint: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(joint);
        Ok((0..count).map(|_| t.sample(&mut rng)).collect())
    }

    /// Fresh sharings of zero: every party deals a random zero-sum vector and
    /// shares are summed columnwise. One round.
    pub fn zero_shares(&mut self, t: &Modulus, count: usize) -> Result<Vec<BigUint>> {
        let mut rows: Vec<Vec<BigUint>> = vec![Vec::with_capacity(count); self.n];
        for _ in 0..count {
            let mut acc = BigUint::zero();
            for row in rows.iter_mut().take(self.n - 1) {
                let s = t.sample(&mut self.rng);
                acc = t.add(&acc, &s);
                row.push(s);
            }
            rows[self.n - 1].push(t.neg(&acc));
        }
        let got = self.scatter(FrameKind::Deal, "zero", rows)?;
        let mut out = vec![BigUint::zero(); count];
        for batch in got {
            for (o, v) in out.iter_mut().zip(batch) {
                *o = t.add(o, &t.reduce(&v));
            }
        }
        Ok(out)
    }
}

fn commitment_digest(ints: &[BigUint], nonce: &[u8; 32]) -> BigUint {
    let mut h = Sha256::new();
    h.update(crate::wire::encode_ints(ints));
    h.update(nonce);
    BigUint::from_bytes_be(&h.finalize())
}

/// Per-party deterministic generator derived from the session seed.
pub fn party_rng(seed: u64, index: usize) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(b"party");
    h.update((index as u64).to_be_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(digest)
}
