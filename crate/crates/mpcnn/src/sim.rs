//! Session drivers: run all parties in one process over the channel mesh, or
//! over loopback/nontrivial TCP. Each party runs on its own thread; protocols
//! are written in blocking style and synchronize purely through messages, so
//! identical seeds yield identical transcripts in either mode.

use crate::counters::Counters;
use crate::engine::PartyCtx;
use crate::transport::{local_mesh, TcpTransport};
use crate::Result;
use std::net::SocketAddr;
use std::sync::Arc;

pub struct PartyOutcome<T> {
    pub result: Result<T>,
    pub counters: Counters,
    pub transcript: [u8; 32],
    pub transcript_bytes: u64,
}

/// Run `job` for `n` parties over the in-process mesh. `setup` may install
/// offline material, MAC keys, latency, or adversaries before the threads
/// start.
pub fn run_simulated<T, F>(
    n: usize,
    session: u64,
    seed: u64,
    setup: impl FnOnce(&mut [PartyCtx]),
    job: F,
) -> Vec<PartyOutcome<T>>
where
    T: Send + 'static,
    F: Fn(&mut PartyCtx) -> Result<T> + Send + Sync + 'static,
{
    let mut ctxs: Vec<PartyCtx> = local_mesh(n)
        .into_iter()
        .map(|t| PartyCtx::new(Box::new(t), session, seed))
        .collect();
    setup(&mut ctxs);
    run_threads(ctxs, job)
}

/// Run `job` for `n` parties over TCP; party `i` binds `endpoints[i]`.
pub fn run_networked<T, F>(
    endpoints: Vec<SocketAddr>,
    session: u64,
    seed: u64,
    setup: impl FnOnce(&mut [PartyCtx]),
    job: F,
) -> Vec<PartyOutcome<T>>
where
    T: Send + 'static,
    F: Fn(&mut PartyCtx) -> Result<T> + Send + Sync + 'static,
{
    let n = endpoints.len();
    let handles: Vec<_> = (0..n)
        .map(|i| {
            let eps = endpoints.clone();
            std::thread::spawn(move || TcpTransport::connect(i, &eps))
        })
        .collect();
    let mut ctxs = Vec::with_capacity(n);
    for h in handles {
        let transport = h.join().expect("connect thread panicked");
        match transport {
            Ok(t) => ctxs.push(PartyCtx::new(Box::new(t), session, seed)),
            Err(e) => panic!("tcp mesh setup failed: {e}"),
        }
    }
    ctxs.sort_by_key(|c| c.index);
    setup(&mut ctxs);
    run_threads(ctxs, job)
}

fn run_threads<T, F>(ctxs: Vec<PartyCtx>, job: F) -> Vec<PartyOutcome<T>>
where
    T: Send + 'static,
    F: Fn(&mut PartyCtx) -> Result<T> + Send + Sync + 'static,
{
    let job = Arc::new(job);
    let handles: Vec<_> = ctxs
        .into_iter()
        .map(|mut ctx| {
            let job = Arc::clone(&job);
            std::thread::Builder::new()
                .stack_size(16 << 20)
                .spawn(move || {
                    let result = job(&mut ctx);
                    PartyOutcome {
                        result,
                        counters: ctx.counters.clone(),
                        transcript: ctx.transcript_hash(),
                        transcript_bytes: ctx.transcript_bytes(),
                    }
                })
                .expect("spawn party thread")
        })
        .collect();
    handles
        .into_iter()
        .map(|h| h.join().expect("party thread panicked"))
        .collect()
}

/// Unwrap every party's result, panicking with the first error encountered.
pub fn unwrap_all<T>(outcomes: Vec<PartyOutcome<T>>) -> (Vec<T>, Vec<Counters>) {
    let mut values = Vec::with_capacity(outcomes.len());
    let mut counters = Vec::with_capacity(outcomes.len());
    for (i, o) in outcomes.into_iter().enumerate() {
        match o.result {
            Ok(v) => {
                values.push(v);
                counters.push(o.counters);
            }
            Err(e) => panic!("party {i} failed: {e}"),
        }
    }
    (values, counters)
}
