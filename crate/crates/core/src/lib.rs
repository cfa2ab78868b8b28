//! Segmented gossip learning over a simulated ledger.
//!
//! Peers are registered and clustered once by their label distributions
//! (K-Means++ seeding with Paillier-protected centroid aggregation). Each
//! cluster then owns a contiguous slice of the model's last layer and trains
//! it asynchronously, exchanging clipped and noised deltas through a
//! content-addressed store whose identifiers are recorded on the ledger. An
//! elected leader periodically rebuilds the full model with coordinate-wise
//! trimmed means.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] parameter container, segmentation and canonical bytes
//! * [`partition`] Dirichlet sharding and label distributions
//! * [`paillier`] additively homomorphic encryption with fixed-point encoding
//! * [`dp`] clipping, Gaussian noise and the linear noise schedule
//! * [`clustering`] one-shot federated K-Means++
//! * [`aggregation`] trimmed and plain means
//! * [`cas`] content-addressed block store with a two-level Merkle DAG
//! * [`ledger`] append-only chain, contract state and gas metering
//! * [`trainer`] one-hidden-layer MLP with exact gradients
//! * [`peer`] per-peer gossip iteration, leader duty and global sync
//! * [`sim`] run configuration, both phases and artifact export

pub mod aggregation;
pub mod cas;
pub mod clustering;
pub mod dp;
pub mod error;
pub mod ledger;
pub mod model;
pub mod paillier;
pub mod partition;
pub mod peer;
pub mod sim;
pub mod trainer;

mod digest;

/// Identifier of a participating peer.
pub type PeerId = u32;

pub use aggregation::{plain_mean, trimmed_mean, TrimConfig};
pub use cas::{CasStore, Cid};
pub use clustering::ClusterAssignment;
pub use dp::DpConfig;
pub use error::{Error, LedgerError, Result};
pub use ledger::{GasTable, Ledger, LedgerBlock, PeerRecord};
pub use model::{ModelDelta, ModelParams, SegmentSpec, Tensor};
pub use paillier::{Ciphertext, PaillierKeyPair};
pub use partition::{LabelDistribution, LabeledDataset, Sample};
pub use peer::{PeerState, PrivatizedUpdate};
pub use sim::{FaultPlan, RunConfig, RunReport};
pub use trainer::TrainConfig;
