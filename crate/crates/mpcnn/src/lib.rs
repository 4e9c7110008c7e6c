//! n-party maliciously secure MPC for privacy-preserving neural network training.
//!
//! Additive secret sharing with information-theoretic MACs over a prime field
//! drives the online phase; the offline phase generates Beaver triples with a
//! threshold Paillier cryptosystem over an RSA modulus and converts them into
//! the online field through a share-conversion pipeline (lift, drop, wrap).
//! On top sit fixed-point arithmetic, secure comparison, and the layer
//! protocols (linear, convolution, ReLU, maxpool, dropout) needed to train
//! small networks under a dishonest majority with abort.

pub mod modular;
pub mod primes;
pub mod wire;
pub mod counters;
pub mod transport;
pub mod engine;
pub mod store;
pub mod paillier;
pub mod sharing;
pub mod triples;
pub mod comparison;
pub mod conversion;
pub mod fixedpoint;
pub mod tensor;
pub mod nn;
pub mod train;
pub mod sim;
pub mod planner;
pub mod config;
pub mod idx;
pub mod cli;

use thiserror::Error;

/// Errors surfaced by protocol execution and the surrounding runtime.
#[derive(Error, Debug)]
pub enum Error {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Codec(String),
    #[error("modulus mismatch: {0}")]
    ModulusMismatch(String),
    #[error("mac check failed: batch of {opened} opened values does not verify")]
    MacCheckFailed { opened: usize },
    #[error("commitment mismatch from party {party}")]
    CommitmentMismatch { party: usize },
    #[error("joint decryption validity check failed")]
    DecryptionCheckFailed,
    #[error("triple sacrifice detected an incorrect triple")]
    SacrificeFailed,
    #[error("shared bit validity check failed")]
    BitCheckFailed,
    #[error("offline material depleted: {0}")]
    OfflineDepleted(String),
    #[error("parameter error: {0}")]
    Params(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("protocol desync: expected {expected}, got {got}")]
    Desync { expected: String, got: String },
    #[error("session aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;
