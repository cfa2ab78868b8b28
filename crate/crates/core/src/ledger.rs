//! Simulated chain with two contract facades and gas metering.
//!
//! Contract #1 holds the registry, the Paillier public key, cluster centers
//! and segment assignments. Contract #2 holds update hashes, token balances
//! and global-model references. Every accepted call becomes a transaction
//! charged from the [`GasTable`]; rejected calls leave no trace. All
//! mutations go through one mutex, which linearizes concurrent callers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::cas::Cid;
use crate::digest::{sha256, sha256_parts, Digest32};
use crate::error::{Error, LedgerError, Result};
use crate::model::SegmentSpec;
use crate::PeerId;

pub const DEFAULT_INITIAL_BALANCE: u64 = 1000;
pub const DUMP_HEADER: &str = "# fedbgs ledger v1";

type LedgerResult<T> = std::result::Result<T, LedgerError>;

/// Gas charged per operation. Defaults are the measured costs of the
/// reference deployment; `reward`, `elect_leader` and `save_global_model`
/// have no measured cost and reuse the closest measured operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasTable {
    pub sc1_deployment: u64,
    pub sc2_deployment: u64,
    pub registration: u64,
    pub reset_balance: u64,
    pub token_penalization: u64,
    pub save_hash: u64,
    pub save_cluster_centers: u64,
    pub assign_segment: u64,
    pub retrieve_segment_boundaries: u64,
    pub validate_segment_update: u64,
    pub reward: u64,
    pub elect_leader: u64,
    pub save_global_model: u64,
}

impl Default for GasTable {
    fn default() -> Self {
        Self {
            sc1_deployment: 1_418_084,
            sc2_deployment: 1_566_634,
            registration: 100_340,
            reset_balance: 257_032,
            token_penalization: 77_102,
            save_hash: 50_527,
            save_cluster_centers: 257_000,
            assign_segment: 120_450,
            retrieve_segment_boundaries: 35_210,
            validate_segment_update: 65_800,
            reward: 77_102,
            elect_leader: 35_210,
            save_global_model: 50_527,
        }
    }
}

impl GasTable {
    pub fn validate(&self) -> Result<()> {
        if TxOp::ALL.iter().any(|op| self.cost(*op) == 0) {
            return Err(Error::InvalidConfig("all gas costs must be positive".into()));
        }
        Ok(())
    }

    pub fn cost(&self, op: TxOp) -> u64 {
        match op {
            TxOp::DeployRegistry => self.sc1_deployment,
            TxOp::DeployGossip => self.sc2_deployment,
            TxOp::Register => self.registration,
            TxOp::SaveClusterCenters => self.save_cluster_centers,
            TxOp::AssignSegment => self.assign_segment,
            TxOp::GetSegment => self.retrieve_segment_boundaries,
            TxOp::SaveHash => self.save_hash,
            TxOp::ValidateUpdate => self.validate_segment_update,
            TxOp::Penalize => self.token_penalization,
            TxOp::Reward => self.reward,
            TxOp::ResetBalance => self.reset_balance,
            TxOp::ElectLeader => self.elect_leader,
            TxOp::SaveGlobalModel => self.save_global_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TxOp {
    DeployRegistry,
    DeployGossip,
    Register,
    SaveClusterCenters,
    AssignSegment,
    GetSegment,
    SaveHash,
    ValidateUpdate,
    Penalize,
    Reward,
    ResetBalance,
    ElectLeader,
    SaveGlobalModel,
}

impl TxOp {
    pub const ALL: [TxOp; 13] = [
        TxOp::DeployRegistry,
        TxOp::DeployGossip,
        TxOp::Register,
        TxOp::SaveClusterCenters,
        TxOp::AssignSegment,
        TxOp::GetSegment,
        TxOp::SaveHash,
        TxOp::ValidateUpdate,
        TxOp::Penalize,
        TxOp::Reward,
        TxOp::ResetBalance,
        TxOp::ElectLeader,
        TxOp::SaveGlobalModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TxOp::DeployRegistry => "deploy_sc1",
            TxOp::DeployGossip => "deploy_sc2",
            TxOp::Register => "register",
            TxOp::SaveClusterCenters => "save_cluster_centers",
            TxOp::AssignSegment => "assign_segment",
            TxOp::GetSegment => "get_segment",
            TxOp::SaveHash => "save_hash",
            TxOp::ValidateUpdate => "validate_update",
            TxOp::Penalize => "penalize",
            TxOp::Reward => "reward",
            TxOp::ResetBalance => "reset_balance",
            TxOp::ElectLeader => "elect_leader",
            TxOp::SaveGlobalModel => "save_global_model",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|op| op.name() == name)
    }

    /// Which contract (1 or 2) serves this operation.
    pub fn contract(self) -> u8 {
        match self {
            TxOp::DeployRegistry
            | TxOp::Register
            | TxOp::SaveClusterCenters
            | TxOp::AssignSegment
            | TxOp::GetSegment => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for TxOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub op: TxOp,
    pub caller: Option<PeerId>,
    pub gas: u64,
    pub payload_digest: Digest32,
    pub tick: u64,
}

impl Transaction {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        let name = self.op.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        match self.caller {
            Some(p) => {
                out.push(1);
                out.extend_from_slice(&p.to_le_bytes());
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.gas.to_le_bytes());
        out.extend_from_slice(&self.payload_digest);
        out.extend_from_slice(&self.tick.to_le_bytes());
        out
    }

    pub fn hash(&self) -> Digest32 {
        sha256(&self.encode())
    }
}

/// Transaction receipt returned by every accepted call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub op: TxOp,
    pub gas_used: u64,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerBlock {
    pub height: u64,
    pub prev_hash: Digest32,
    pub tx_merkle_root: Digest32,
    pub transactions: Vec<Transaction>,
    pub gas_used: u64,
    pub timestamp: u64,
}

impl LedgerBlock {
    pub fn hash(&self) -> Digest32 {
        sha256_parts(&[
            &self.height.to_le_bytes(),
            &self.prev_hash,
            &self.tx_merkle_root,
            &self.gas_used.to_le_bytes(),
            &self.timestamp.to_le_bytes(),
        ])
    }
}

/// Binary Merkle root over transaction hashes; an odd node is paired with
/// itself. The empty list has the all-zero root.
pub fn merkle_root(txs: &[Transaction]) -> Digest32 {
    if txs.is_empty() {
        return [0; 32];
    }
    let mut level: Vec<Digest32> = txs.iter().map(Transaction::hash).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| sha256_parts(&[&pair[0], pair.get(1).unwrap_or(&pair[0])]))
            .collect();
    }
    level[0]
}

/// Recomputes every Merkle root, gas total and back-link.
pub fn verify_blocks(blocks: &[LedgerBlock]) -> Result<()> {
    let mut prev = [0u8; 32];
    for (i, b) in blocks.iter().enumerate() {
        if b.height != i as u64 {
            return Err(Error::Integrity(format!("block {i} has height {}", b.height)));
        }
        if b.prev_hash != prev {
            return Err(Error::Integrity(format!("block {i} does not link to its parent")));
        }
        if merkle_root(&b.transactions) != b.tx_merkle_root {
            return Err(Error::Integrity(format!("block {i} merkle root mismatch")));
        }
        if b.transactions.iter().map(|t| t.gas).sum::<u64>() != b.gas_used {
            return Err(Error::Integrity(format!("block {i} gas total mismatch")));
        }
        prev = b.hash();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub peer_id: PeerId,
    pub credential: String,
    pub token_balance: u64,
    pub cluster_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoundTag {
    /// Global-model epoch the update is relative to.
    pub epoch: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashRecord {
    pub peer: PeerId,
    pub cid: Cid,
    pub tag: RoundTag,
    pub claimed_loss: f64,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalRecord {
    pub cid: Cid,
    pub epoch: u64,
    pub leader: Option<PeerId>,
    pub tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyReason {
    Integrity,
    LossDeviation,
    Manual,
}

impl PenaltyReason {
    fn code(self) -> u8 {
        match self {
            PenaltyReason::Integrity => 0,
            PenaltyReason::LossDeviation => 1,
            PenaltyReason::Manual => 2,
        }
    }
}

#[derive(Debug, Default)]
struct LedgerState {
    tick: u64,
    registry_key: Option<(String, String)>,
    gossip_deployed: bool,
    peers: BTreeMap<PeerId, PeerRecord>,
    credentials: HashSet<String>,
    centroids: Option<Vec<Vec<f64>>>,
    segments: BTreeMap<PeerId, SegmentSpec>,
    recorded: HashSet<(PeerId, Cid)>,
    hash_records: HashMap<Cid, HashRecord>,
    latest_update: BTreeMap<PeerId, HashRecord>,
    globals: Vec<GlobalRecord>,
    current_leader: Option<(u64, PeerId)>,
    penalties: Vec<(PeerId, PenaltyReason)>,
    pending: Vec<Transaction>,
    blocks: Vec<LedgerBlock>,
}

impl LedgerState {
    fn tip_hash(&self) -> Digest32 {
        self.blocks.last().map(LedgerBlock::hash).unwrap_or([0; 32])
    }

    fn require_registry(&self) -> LedgerResult<()> {
        self.registry_key.as_ref().map(|_| ()).ok_or(LedgerError::NotDeployed(1))
    }

    fn require_gossip(&self) -> LedgerResult<()> {
        if self.gossip_deployed {
            Ok(())
        } else {
            Err(LedgerError::NotDeployed(2))
        }
    }

    fn require_peer(&self, peer: PeerId) -> LedgerResult<()> {
        if self.peers.contains_key(&peer) {
            Ok(())
        } else {
            Err(LedgerError::Unregistered(peer))
        }
    }

    fn require_caller(&self, caller: Option<PeerId>) -> LedgerResult<()> {
        caller.map_or(Ok(()), |p| self.require_peer(p))
    }

    fn leader_for(&self, tick: u64) -> LedgerResult<PeerId> {
        if self.peers.is_empty() {
            return Err(LedgerError::NoPeers);
        }
        let d = sha256_parts(&[&self.tip_hash(), &tick.to_le_bytes()]);
        let r = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let idx = (r % self.peers.len() as u64) as usize;
        Ok(*self.peers.keys().nth(idx).expect("index below len"))
    }
}

/// Shared ledger service.
#[derive(Debug)]
pub struct Ledger {
    gas: GasTable,
    initial_balance: u64,
    state: Mutex<LedgerState>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new(GasTable::default(), DEFAULT_INITIAL_BALANCE)
    }
}

impl Ledger {
    pub fn new(gas: GasTable, initial_balance: u64) -> Self {
        Self {
            gas,
            initial_balance,
            state: Mutex::new(LedgerState::default()),
        }
    }

    pub fn gas_table(&self) -> &GasTable {
        &self.gas
    }

    pub fn initial_balance(&self) -> u64 {
        self.initial_balance
    }

    fn lock(&self) -> MutexGuard<'_, LedgerState> {
        self.state.lock().expect("ledger lock poisoned")
    }

    fn record(&self, st: &mut LedgerState, op: TxOp, caller: Option<PeerId>, payload: &[&[u8]]) -> Receipt {
        let gas = self.gas.cost(op);
        let tick = st.tick;
        st.pending.push(Transaction {
            op,
            caller,
            gas,
            payload_digest: sha256_parts(payload),
            tick,
        });
        Receipt { op, gas_used: gas, tick }
    }

    /// Sets the logical clock stamped on subsequent transactions.
    pub fn set_tick(&self, tick: u64) {
        self.lock().tick = tick;
    }

    pub fn tick(&self) -> u64 {
        self.lock().tick
    }

    /// Deploys contract #1 carrying the Paillier public key (decimal `n`, `g`).
    pub fn deploy_registry(&self, public_key: (String, String)) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        if st.registry_key.is_some() {
            return Err(LedgerError::AlreadyDeployed(1));
        }
        let r = self.record(
            &mut st,
            TxOp::DeployRegistry,
            None,
            &[public_key.0.as_bytes(), b"|", public_key.1.as_bytes()],
        );
        st.registry_key = Some(public_key);
        Ok(r)
    }

    pub fn deploy_gossip(&self) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        if st.gossip_deployed {
            return Err(LedgerError::AlreadyDeployed(2));
        }
        let r = self.record(&mut st, TxOp::DeployGossip, None, &[b"sc2"]);
        st.gossip_deployed = true;
        Ok(r)
    }

    pub fn registry_public_key(&self) -> Option<(String, String)> {
        self.lock().registry_key.clone()
    }

    pub fn register(&self, peer: PeerId, credential: &str) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_registry()?;
        if st.peers.contains_key(&peer) {
            return Err(LedgerError::DuplicatePeer(peer));
        }
        if st.credentials.contains(credential) {
            return Err(LedgerError::DuplicateCredential);
        }
        let r = self.record(&mut st, TxOp::Register, Some(peer), &[&peer.to_le_bytes(), credential.as_bytes()]);
        st.credentials.insert(credential.to_string());
        st.peers.insert(
            peer,
            PeerRecord {
                peer_id: peer,
                credential: credential.to_string(),
                token_balance: self.initial_balance,
                cluster_id: None,
            },
        );
        Ok(r)
    }

    /// Stores the cluster centers; `caller` is the submitting peer or `None`
    /// for the bootstrap.
    pub fn save_cluster_centers(&self, caller: Option<PeerId>, centroids: &[Vec<f64>]) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_registry()?;
        st.require_caller(caller)?;
        let bytes: Vec<u8> = centroids
            .iter()
            .flat_map(|c| c.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let r = self.record(
            &mut st,
            TxOp::SaveClusterCenters,
            caller,
            &[&(centroids.len() as u32).to_le_bytes(), &bytes],
        );
        st.centroids = Some(centroids.to_vec());
        Ok(r)
    }

    pub fn cluster_centers(&self) -> Option<Vec<Vec<f64>>> {
        self.lock().centroids.clone()
    }

    pub fn assign_segment(&self, peer: PeerId, spec: SegmentSpec) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_registry()?;
        st.require_peer(peer)?;
        if st.centroids.is_none() {
            return Err(LedgerError::ClusteringIncomplete);
        }
        let r = self.record(&mut st, TxOp::AssignSegment, Some(peer), &[&peer.to_le_bytes(), &segment_bytes(&spec)]);
        st.segments.insert(peer, spec);
        if let Some(rec) = st.peers.get_mut(&peer) {
            rec.cluster_id = Some(spec.cluster_id);
        }
        Ok(r)
    }

    /// Charged retrieval of the caller's segment boundaries.
    pub fn get_segment(&self, peer: PeerId) -> LedgerResult<SegmentSpec> {
        let mut st = self.lock();
        st.require_registry()?;
        st.require_peer(peer)?;
        let spec = *st.segments.get(&peer).ok_or(LedgerError::NotAssigned(peer))?;
        self.record(&mut st, TxOp::GetSegment, Some(peer), &[&peer.to_le_bytes(), &segment_bytes(&spec)]);
        Ok(spec)
    }

    /// Uncharged view of an assignment, for audits and harnesses.
    pub fn segment_of(&self, peer: PeerId) -> Option<SegmentSpec> {
        self.lock().segments.get(&peer).copied()
    }

    pub fn save_hash(&self, peer: PeerId, cid: Cid, tag: RoundTag, claimed_loss: f64) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_peer(peer)?;
        if st.recorded.contains(&(peer, cid)) {
            return Err(LedgerError::Replay { peer, cid });
        }
        let r = self.record(
            &mut st,
            TxOp::SaveHash,
            Some(peer),
            &[
                &peer.to_le_bytes(),
                cid.as_bytes(),
                &tag.epoch.to_le_bytes(),
                &tag.iteration.to_le_bytes(),
                &claimed_loss.to_le_bytes(),
            ],
        );
        let rec = HashRecord {
            peer,
            cid,
            tag,
            claimed_loss,
            tick: st.tick,
        };
        st.recorded.insert((peer, cid));
        st.hash_records.entry(cid).or_insert(rec);
        st.latest_update.insert(peer, rec);
        Ok(r)
    }

    /// Charged check that `recomputed` (the CID the caller derived from the
    /// bytes it fetched) equals the recorded `cid`. Unknown CIDs yield false.
    pub fn validate_update(&self, caller: Option<PeerId>, cid: Cid, recomputed: Cid) -> LedgerResult<bool> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_caller(caller)?;
        self.record(&mut st, TxOp::ValidateUpdate, caller, &[cid.as_bytes(), recomputed.as_bytes()]);
        Ok(st.hash_records.contains_key(&cid) && cid == recomputed)
    }

    pub fn hash_record(&self, cid: &Cid) -> Option<HashRecord> {
        self.lock().hash_records.get(cid).copied()
    }

    pub fn latest_update(&self, peer: PeerId) -> Option<HashRecord> {
        self.lock().latest_update.get(&peer).copied()
    }

    pub fn latest_updates(&self) -> BTreeMap<PeerId, HashRecord> {
        self.lock().latest_update.clone()
    }

    pub fn is_recorded(&self, peer: PeerId, cid: &Cid) -> bool {
        self.lock().recorded.contains(&(peer, *cid))
    }

    /// Debits `amount` from `target`, flooring at zero.
    pub fn penalize(
        &self,
        issuer: Option<PeerId>,
        target: PeerId,
        amount: u64,
        reason: PenaltyReason,
    ) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_caller(issuer)?;
        st.require_peer(target)?;
        let r = self.record(
            &mut st,
            TxOp::Penalize,
            issuer,
            &[&target.to_le_bytes(), &amount.to_le_bytes(), &[reason.code()]],
        );
        let rec = st.peers.get_mut(&target).expect("checked above");
        rec.token_balance = rec.token_balance.saturating_sub(amount);
        st.penalties.push((target, reason));
        Ok(r)
    }

    /// Credits freshly minted tokens to `target`.
    pub fn reward(&self, issuer: Option<PeerId>, target: PeerId, amount: u64) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_caller(issuer)?;
        st.require_peer(target)?;
        let r = self.record(&mut st, TxOp::Reward, issuer, &[&target.to_le_bytes(), &amount.to_le_bytes()]);
        let rec = st.peers.get_mut(&target).expect("checked above");
        rec.token_balance = rec.token_balance.saturating_add(amount);
        Ok(r)
    }

    pub fn reset_balance(&self, peer: PeerId) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_peer(peer)?;
        let r = self.record(&mut st, TxOp::ResetBalance, Some(peer), &[&peer.to_le_bytes()]);
        st.peers.get_mut(&peer).expect("checked above").token_balance = self.initial_balance;
        Ok(r)
    }

    pub fn balance(&self, peer: PeerId) -> Option<u64> {
        self.lock().peers.get(&peer).map(|r| r.token_balance)
    }

    pub fn peer(&self, peer: PeerId) -> Option<PeerRecord> {
        self.lock().peers.get(&peer).cloned()
    }

    pub fn peers(&self) -> Vec<PeerRecord> {
        self.lock().peers.values().cloned().collect()
    }

    /// Penalties applied so far, in order, as `(target, reason)`.
    pub fn penalties(&self) -> Vec<(PeerId, PenaltyReason)> {
        self.lock().penalties.clone()
    }

    /// Leader for `tick` under the current chain tip, without recording.
    pub fn leader_for(&self, tick: u64) -> LedgerResult<PeerId> {
        self.lock().leader_for(tick)
    }

    /// Elects the leader from `hash(tip ‖ tick)` and records the election.
    pub fn elect_leader(&self, tick: u64) -> LedgerResult<PeerId> {
        let mut st = self.lock();
        st.require_gossip()?;
        let leader = st.leader_for(tick)?;
        self.record(&mut st, TxOp::ElectLeader, None, &[&tick.to_le_bytes(), &leader.to_le_bytes()]);
        st.current_leader = Some((tick, leader));
        Ok(leader)
    }

    pub fn current_leader(&self) -> Option<(u64, PeerId)> {
        self.lock().current_leader
    }

    /// Records a new global reference. Only the elected leader, or the
    /// bootstrap (`None`) before any election, may do so.
    pub fn save_global_model(&self, caller: Option<PeerId>, cid: Cid, epoch: u64) -> LedgerResult<Receipt> {
        let mut st = self.lock();
        st.require_gossip()?;
        st.require_caller(caller)?;
        match (caller, st.current_leader) {
            (Some(p), Some((_, leader))) if p == leader => {}
            (None, None) => {}
            (Some(p), other) => {
                return Err(LedgerError::NotLeader {
                    peer: p,
                    tick: other.map(|(t, _)| t).unwrap_or(st.tick),
                })
            }
            (None, Some(_)) => return Err(LedgerError::NotLeader { peer: 0, tick: st.tick }),
        }
        let r = self.record(&mut st, TxOp::SaveGlobalModel, caller, &[cid.as_bytes(), &epoch.to_le_bytes()]);
        let tick = st.tick;
        st.globals.push(GlobalRecord {
            cid,
            epoch,
            leader: caller,
            tick,
        });
        Ok(r)
    }

    pub fn latest_global(&self) -> LedgerResult<GlobalRecord> {
        self.lock().globals.last().copied().ok_or(LedgerError::NoGlobalModel)
    }

    pub fn globals(&self) -> Vec<GlobalRecord> {
        self.lock().globals.clone()
    }

    /// Seals pending transactions into a block; `None` if nothing is pending.
    pub fn seal_block(&self) -> Option<LedgerBlock> {
        let mut st = self.lock();
        if st.pending.is_empty() {
            return None;
        }
        let transactions = std::mem::take(&mut st.pending);
        let block = LedgerBlock {
            height: st.blocks.len() as u64,
            prev_hash: st.tip_hash(),
            tx_merkle_root: merkle_root(&transactions),
            gas_used: transactions.iter().map(|t| t.gas).sum(),
            timestamp: st.tick,
            transactions,
        };
        st.blocks.push(block.clone());
        Some(block)
    }

    pub fn blocks(&self) -> Vec<LedgerBlock> {
        self.lock().blocks.clone()
    }

    pub fn pending_len(&self) -> usize {
        self.lock().pending.len()
    }

    /// Gas over sealed blocks.
    pub fn total_gas(&self) -> u64 {
        self.lock().blocks.iter().map(|b| b.gas_used).sum()
    }

    /// Gas over sealed blocks and pending transactions.
    pub fn gas_so_far(&self) -> u64 {
        let st = self.lock();
        st.blocks.iter().map(|b| b.gas_used).sum::<u64>() + st.pending.iter().map(|t| t.gas).sum::<u64>()
    }

    pub fn verify_chain(&self) -> Result<()> {
        verify_blocks(&self.lock().blocks)
    }

    /// Sealed transactions per operation.
    pub fn op_counts(&self) -> BTreeMap<TxOp, u64> {
        let st = self.lock();
        let mut out = BTreeMap::new();
        for t in st.blocks.iter().flat_map(|b| &b.transactions) {
            *out.entry(t.op).or_insert(0) += 1;
        }
        out
    }

    pub fn gas_report(&self) -> GasReport {
        let st = self.lock();
        GasReport::from_transactions(st.blocks.iter().flat_map(|b| &b.transactions).map(|t| (t.op.name(), t.gas)))
    }

    /// Text export of sealed blocks: a `#`-prefixed header per block and one
    /// tab-separated line per transaction
    /// (`height op caller gas payload_digest`).
    pub fn dump(&self) -> String {
        let st = self.lock();
        let mut out = String::new();
        out.push_str(DUMP_HEADER);
        out.push('\n');
        out.push_str("# height\top\tcaller\tgas\tpayload\n");
        for b in &st.blocks {
            out.push_str(&format!(
                "# block {} tick {} gas {} hash {} merkle {}\n",
                b.height,
                b.timestamp,
                b.gas_used,
                hex::encode(b.hash()),
                hex::encode(b.tx_merkle_root)
            ));
            for t in &b.transactions {
                let caller = t.caller.map_or_else(|| "-".to_string(), |p| p.to_string());
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    b.height,
                    t.op.name(),
                    caller,
                    t.gas,
                    hex::encode(t.payload_digest)
                ));
            }
        }
        out
    }
}

fn segment_bytes(spec: &SegmentSpec) -> Vec<u8> {
    [spec.cluster_id as u64, spec.start as u64, spec.end as u64]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GasReportRow {
    pub op: String,
    pub count: u64,
    pub total_gas: u64,
}

/// Per-operation transaction counts and gas.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GasReport {
    pub rows: Vec<GasReportRow>,
    pub total_gas: u64,
}

impl GasReport {
    fn from_transactions<'a>(txs: impl Iterator<Item = (&'a str, u64)>) -> Self {
        let mut by_op: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for (op, gas) in txs {
            let e = by_op.entry(op.to_string()).or_default();
            e.0 += 1;
            e.1 += gas;
        }
        let rows: Vec<GasReportRow> = TxOp::ALL
            .iter()
            .map(|op| op.name().to_string())
            .chain(by_op.keys().filter(|k| TxOp::from_name(k).is_none()).cloned().collect::<Vec<_>>())
            .map(|op| {
                let (count, total_gas) = by_op.get(&op).copied().unwrap_or_default();
                GasReportRow { op, count, total_gas }
            })
            .collect();
        let total_gas = rows.iter().map(|r| r.total_gas).sum();
        Self { rows, total_gas }
    }

    /// Rebuilds the report from a ledger dump.
    pub fn from_dump(text: &str) -> Result<Self> {
        let mut txs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Serialization(format!("dump line {} has {} columns", n + 1, cols.len())));
            }
            let gas: u64 = cols[3]
                .parse()
                .map_err(|e| Error::Serialization(format!("dump line {}: bad gas: {e}", n + 1)))?;
            txs.push((cols[1].to_string(), gas));
        }
        Ok(Self::from_transactions(txs.iter().map(|(op, g)| (op.as_str(), *g))))
    }
}

impl fmt::Display for GasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>10}{:>16}", "operation", "count", "gas")?;
        for r in &self.rows {
            writeln!(f, "{:<24}{:>10}{:>16}", r.op, r.count, r.total_gas)?;
        }
        write!(f, "{:<24}{:>10}{:>16}", "total", self.rows.iter().map(|r| r.count).sum::<u64>(), self.total_gas)
    }
}
