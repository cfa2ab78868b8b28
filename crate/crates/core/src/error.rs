use std::io;

use thiserror::Error;

use crate::cas::Cid;
use crate::PeerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("shard is empty")]
    DegenerateShard,
    #[error("nothing to aggregate")]
    EmptyAggregation,
    #[error("trim ratio {ratio} leaves no values out of {n}")]
    InfeasibleTrim { n: usize, ratio: f64 },
    #[error("gradient contains non-finite values")]
    InvalidGradient,
    #[error("round {round} is outside the schedule of {total} rounds")]
    Schedule { round: u64, total: u64 },
    #[error("ciphertexts were produced under different keys")]
    KeyMismatch,
    #[error("plaintext out of range: {0}")]
    PlaintextRange(String),
    #[error("content not found: {0}")]
    NotFound(Cid),
    #[error("content of {0} bytes exceeds the store limit")]
    SizeLimit(u64),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rejections raised by the simulated contracts. A rejected call leaves no
/// trace on the chain.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("contract #{0} is not deployed")]
    NotDeployed(u8),
    #[error("contract #{0} is already deployed")]
    AlreadyDeployed(u8),
    #[error("peer {0} is not registered")]
    Unregistered(PeerId),
    #[error("peer {0} is already registered")]
    DuplicatePeer(PeerId),
    #[error("credential is already registered")]
    DuplicateCredential,
    #[error("cluster centers have not been saved")]
    ClusteringIncomplete,
    #[error("peer {0} has no segment assigned")]
    NotAssigned(PeerId),
    #[error("update {cid} from peer {peer} was already recorded")]
    Replay { peer: PeerId, cid: Cid },
    #[error("no registered peers")]
    NoPeers,
    #[error("peer {peer} is not the leader for tick {tick}")]
    NotLeader { peer: PeerId, tick: u64 },
    #[error("no global model has been recorded")]
    NoGlobalModel,
}
