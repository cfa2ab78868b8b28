//! Per-peer gossip iteration, leader aggregation and global sync.
//!
//! A peer's published update is its cumulative delta since the last global
//! sync, restricted to the coordinates it owns (all lower layers plus its
//! segment's last-layer rows and bias entries), clipped and noised. Updates
//! live in the CAS; the ledger holds their CIDs.

use std::collections::BTreeMap;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{plain_mean, trimmed_mean, TrimConfig};
use crate::cas::{compute_cid, CasStore, Cid};
use crate::dp::{self, DpConfig};
use crate::error::{Error, LedgerError, Result};
use crate::ledger::{HashRecord, Ledger, PenaltyReason, RoundTag};
use crate::model::{assemble_global, canonical_bytes, decode_canonical, mask_to_segment, ModelDelta, ModelParams, SegmentSpec};
use crate::partition::{LabeledDataset, Sample};
use crate::trainer::{self, TrainConfig};
use crate::PeerId;

const UPDATE_MAGIC: [u8; 4] = *b"FBGU";
const UPDATE_VERSION: u16 = 1;
const UPDATE_HEADER_LEN: usize = 4 + 2 + 4 * 4 + 8 * 3;

/// A published, privatized delta with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedUpdate {
    pub peer: PeerId,
    pub segment: SegmentSpec,
    pub tag: RoundTag,
    pub claimed_loss: f64,
    /// Full-shape delta, zero outside the owned coordinates.
    pub delta: ModelDelta,
}

impl PrivatizedUpdate {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = canonical_bytes(&self.delta)?;
        let mut out = Vec::with_capacity(UPDATE_HEADER_LEN + body.len());
        out.extend_from_slice(&UPDATE_MAGIC);
        out.extend_from_slice(&UPDATE_VERSION.to_le_bytes());
        for v in [
            self.peer,
            self.segment.cluster_id as u32,
            self.segment.start as u32,
            self.segment.end as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.tag.epoch.to_le_bytes());
        out.extend_from_slice(&self.tag.iteration.to_le_bytes());
        out.extend_from_slice(&self.claimed_loss.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < UPDATE_HEADER_LEN || bytes[..4] != UPDATE_MAGIC {
            return Err(Error::Serialization("not an update record".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != UPDATE_VERSION {
            return Err(Error::Serialization(format!("unsupported update version {version}")));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
        let segment = SegmentSpec {
            cluster_id: u32_at(10) as usize,
            start: u32_at(14) as usize,
            end: u32_at(18) as usize,
        };
        Ok(Self {
            peer: u32_at(6),
            segment,
            tag: RoundTag {
                epoch: u64_at(22),
                iteration: u64_at(30),
            },
            claimed_loss: f64::from_bits(u64_at(38)),
            delta: decode_canonical(&bytes[UPDATE_HEADER_LEN..])?,
        })
    }
}

/// What a receiver learns from a ledger hash record. The claimed loss is
/// advisory only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GossipMessage {
    pub sender: PeerId,
    pub cid: Cid,
    pub round_tag: RoundTag,
    pub claimed_loss: f64,
}

impl From<HashRecord> for GossipMessage {
    fn from(r: HashRecord) -> Self {
        Self {
            sender: r.peer,
            cid: r.cid,
            round_tag: r.tag,
            claimed_loss: r.claimed_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Behavior {
    Honest,
    /// Publishes `±magnitude` on every owned coordinate and never trains.
    HugeNorm { magnitude: f64 },
}

/// Protocol parameters shared by all peers of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GossipConfig {
    pub dp: DpConfig,
    pub trim: TrimConfig,
    pub train: TrainConfig,
    pub fanout: usize,
    pub reward: u64,
    pub penalty: u64,
    pub penalty_loss_delta: f64,
    pub eval_batch: usize,
}

/// Shared services a peer talks to.
#[derive(Debug, Clone, Copy)]
pub struct Services<'a> {
    pub ledger: &'a Ledger,
    pub cas: &'a CasStore,
}

#[derive(Debug, Clone)]
pub struct PeerState {
    pub peer_id: PeerId,
    pub segment: SegmentSpec,
    pub current_params: ModelParams,
    /// Parameters of the last synced global model.
    pub base_params: ModelParams,
    pub base_epoch: u64,
    pub last_global_cid: Option<Cid>,
    pub iteration_counter: u64,
    pub rng: ChaCha8Rng,
    pub shard: Vec<usize>,
    pub behavior: Behavior,
}

impl PeerState {
    pub fn new(peer_id: PeerId, segment: SegmentSpec, params: ModelParams, shard: Vec<usize>, seed: u64) -> Self {
        Self {
            peer_id,
            segment,
            base_params: params.clone(),
            current_params: params,
            base_epoch: 0,
            last_global_cid: None,
            iteration_counter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(peer_id) << 32 | 0x9e37)),
            shard,
            behavior: Behavior::Honest,
        }
    }

    pub fn cluster(&self) -> usize {
        self.segment.cluster_id
    }

    /// Last-layer rows outside the segment that differ bitwise from the last
    /// synced global model.
    pub fn segment_violations(&self) -> usize {
        let cur = &self.current_params;
        let base = &self.base_params;
        (0..cur.num_output_units())
            .filter(|&r| !self.segment.contains(r))
            .filter(|&r| {
                let rows_differ = cur
                    .last_row(r)
                    .iter()
                    .zip(base.last_row(r))
                    .any(|(a, b)| a.to_bits() != b.to_bits());
                rows_differ || cur.last_bias().data()[r].to_bits() != base.last_bias().data()[r].to_bits()
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Incentive {
    Reward,
    Penalty,
    Neutral,
}

/// Reward a strict loss decrease, penalize an increase above `tau`.
pub fn incentive_check(loss_before: f64, loss_after: f64, tau: f64) -> Incentive {
    if loss_after < loss_before {
        Incentive::Reward
    } else if loss_after - loss_before > tau {
        Incentive::Penalty
    } else {
        Incentive::Neutral
    }
}

/// Robust combination used by both gossip and the leader: the trimmed mean
/// when the trim is feasible for `n`, otherwise `fallback`.
fn robust_combine(updates: &[Vec<f64>], trim: TrimConfig, fallback: Fallback) -> Result<Vec<f64>> {
    if trim.is_feasible(updates.len()) {
        return trimmed_mean(updates, trim.trim_ratio);
    }
    match fallback {
        Fallback::First => updates.first().cloned().ok_or(Error::EmptyAggregation),
        Fallback::Mean => plain_mean(updates),
    }
}

#[derive(Debug, Clone, Copy)]
enum Fallback {
    First,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Synced { epoch: u64 },
    Unchanged,
    Rejected,
}

/// Adopts the latest global model if it changed and verifies against its CID.
/// A failed verification keeps the current parameters.
pub fn sync_global(state: &mut PeerState, svc: Services<'_>) -> Result<SyncOutcome> {
    let g = svc.ledger.latest_global()?;
    if state.last_global_cid == Some(g.cid) {
        return Ok(SyncOutcome::Unchanged);
    }
    let bytes = match svc.cas.get(&g.cid) {
        Ok(b) => b,
        Err(e @ (Error::Integrity(_) | Error::NotFound(_))) => {
            warn!("peer {}: integrity alarm on global {}: {e}", state.peer_id, g.cid);
            return Ok(SyncOutcome::Rejected);
        }
        Err(e) => return Err(e),
    };
    let params = decode_canonical(&bytes)?;
    state.current_params.check_shape(&params)?;
    state.current_params = params.clone();
    state.base_params = params;
    state.base_epoch = g.epoch;
    state.last_global_cid = Some(g.cid);
    Ok(SyncOutcome::Synced { epoch: g.epoch })
}

/// Fetches `cid` from the store as an untrusted receiver would and checks it
/// against the ledger. `Ok(None)` means the check failed.
fn fetch_validated(svc: Services<'_>, caller: PeerId, cid: Cid) -> Result<Option<Vec<u8>>> {
    let bytes = match svc.cas.fetch_unverified(&cid) {
        Ok(b) => b,
        Err(Error::NotFound(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let recomputed = compute_cid(&bytes, svc.cas.block_size())?;
    if svc.ledger.validate_update(Some(caller), cid, recomputed)? {
        Ok(Some(bytes))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationOutcome {
    pub published: Option<Cid>,
    /// Neighbor updates that passed validation and entered the combination.
    pub consumed: Vec<(PeerId, Cid)>,
    /// Neighbor updates that failed validation.
    pub detections: Vec<(PeerId, Cid)>,
    pub rewards: usize,
    pub penalties: usize,
    pub loss: f64,
    pub synced: Option<SyncOutcome>,
}

fn owned_values(delta: &ModelDelta, idx: &[usize]) -> Vec<f64> {
    let flat = delta.flatten();
    idx.iter().map(|&i| flat[i]).collect()
}

/// One gossip cycle: sync if a newer global exists, train locally inside the
/// segment, publish the privatized cumulative delta, pull and validate up to
/// `fanout` same-cluster updates of the current epoch, and combine. On a
/// ledger rejection the state is left untouched.
pub fn peer_iteration(
    state: &mut PeerState,
    svc: Services<'_>,
    cfg: &GossipConfig,
    data: &LabeledDataset,
) -> Result<IterationOutcome> {
    let mut next = state.clone();
    let outcome = iterate(&mut next, svc, cfg, data)?;
    *state = next;
    Ok(outcome)
}

fn iterate(st: &mut PeerState, svc: Services<'_>, cfg: &GossipConfig, data: &LabeledDataset) -> Result<IterationOutcome> {
    let me = st.peer_id;
    let mut out = IterationOutcome::default();
    let seg = svc.ledger.get_segment(me)?;
    st.segment = seg;
    if svc.ledger.latest_global().is_ok() {
        out.synced = Some(sync_global(st, svc)?);
    }
    let idx = st.base_params.owned_indices(&seg)?;
    let eval: Vec<&Sample> = trainer::sample_batch(data, &st.shard, cfg.eval_batch, &mut st.rng)?;

    let (raw, published_vals) = match st.behavior {
        Behavior::Honest => {
            for _ in 0..cfg.train.local_steps {
                let batch = trainer::sample_batch(data, &st.shard, cfg.train.batch_size, &mut st.rng)?;
                let step = trainer::gradient(&st.current_params, &batch)?.scale(-cfg.train.learning_rate);
                st.current_params = st.current_params.apply_in_segment(&step, &seg)?;
            }
            let raw = owned_values(&st.current_params.sub(&st.base_params)?, &idx);
            let sigma = dp::sigma_clamped(st.iteration_counter, &cfg.dp);
            let noised = dp::clip_and_noise(&raw, cfg.dp.clip_threshold, sigma, &mut st.rng)?;
            (Some(raw), noised)
        }
        Behavior::HugeNorm { magnitude } => {
            let vals = (0..idx.len())
                .map(|_| if st.rng.gen_bool(0.5) { magnitude } else { -magnitude })
                .collect();
            (None, vals)
        }
    };
    out.loss = trainer::forward_loss(&st.current_params, &eval)?.0;

    let tag = RoundTag {
        epoch: st.base_epoch,
        iteration: st.iteration_counter,
    };
    let update = PrivatizedUpdate {
        peer: me,
        segment: seg,
        tag,
        claimed_loss: out.loss,
        delta: st.base_params.zeros_like().with_owned_offsets(&seg, &published_vals)?,
    };
    let bytes = update.encode()?;
    let cid = match svc.cas.put(&bytes).or_else(|_| svc.cas.put(&bytes)) {
        Ok(c) => Some(c),
        Err(e) => {
            warn!("peer {me}: publish skipped after CAS failure: {e}");
            None
        }
    };
    if let Some(cid) = cid {
        svc.ledger.save_hash(me, cid, tag, out.loss)?;
        out.published = Some(cid);
    }
    st.iteration_counter += 1;

    let Some(raw) = raw else {
        return Ok(out);
    };

    let mut candidates: Vec<GossipMessage> = svc
        .ledger
        .peers()
        .into_iter()
        .filter(|p| p.peer_id != me && p.cluster_id == Some(seg.cluster_id))
        .filter_map(|p| svc.ledger.latest_update(p.peer_id))
        .filter(|r| r.tag.epoch == st.base_epoch)
        .map(GossipMessage::from)
        .collect();
    candidates.sort_by_key(|m| m.sender);
    let chosen: Vec<GossipMessage> = candidates.choose_multiple(&mut st.rng, cfg.fanout).copied().collect();

    let own_loss = out.loss;
    let mut updates = vec![raw];
    for msg in chosen {
        let Some(bytes) = fetch_validated(svc, me, msg.cid)? else {
            svc.ledger.penalize(Some(me), msg.sender, cfg.penalty, PenaltyReason::Integrity)?;
            out.penalties += 1;
            out.detections.push((msg.sender, msg.cid));
            continue;
        };
        let upd = match PrivatizedUpdate::decode(&bytes) {
            Ok(u) if u.peer == msg.sender && u.delta.same_shape(&st.base_params) => u,
            _ => {
                debug!("peer {me}: malformed update {} from {}", msg.cid, msg.sender);
                continue;
            }
        };
        let vals = owned_values(&mask_to_segment(&upd.delta, &seg)?, &idx);
        out.consumed.push((msg.sender, msg.cid));
        let candidate = st.base_params.with_owned_offsets(&seg, &vals)?;
        let cand_loss = trainer::forward_loss(&candidate, &eval)?.0;
        match incentive_check(own_loss, cand_loss, cfg.penalty_loss_delta) {
            Incentive::Reward => {
                svc.ledger.reward(Some(me), msg.sender, cfg.reward)?;
                out.rewards += 1;
            }
            Incentive::Penalty => {
                svc.ledger.penalize(Some(me), msg.sender, cfg.penalty, PenaltyReason::LossDeviation)?;
                out.penalties += 1;
            }
            Incentive::Neutral => {}
        }
        updates.push(vals);
    }
    let combined = robust_combine(&updates, cfg.trim, Fallback::First)?;
    st.current_params = st.base_params.with_owned_offsets(&seg, &combined)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderOutcome {
    pub cid: Cid,
    pub epoch: u64,
    /// Updates that entered aggregation.
    pub aggregated: Vec<(PeerId, Cid)>,
    pub detections: Vec<(PeerId, Cid)>,
    /// Clusters without any update this epoch.
    pub carried_over: Vec<usize>,
}

/// Global reconstruction by the elected leader: validate every peer's latest
/// update of the current epoch, trimmed-mean each segment's rows within its
/// cluster and the lower layers across all peers, assemble, store and record
/// the new global model.
pub fn leader_duty(
    leader: PeerId,
    tick: u64,
    svc: Services<'_>,
    trim: TrimConfig,
    penalty: u64,
    specs: &[SegmentSpec],
) -> Result<LeaderOutcome> {
    match svc.ledger.current_leader() {
        Some((t, p)) if t == tick && p == leader => {}
        _ => return Err(LedgerError::NotLeader { peer: leader, tick }.into()),
    }
    let g = svc.ledger.latest_global()?;
    let base = decode_canonical(&svc.cas.get(&g.cid)?)?;

    let mut aggregated = Vec::new();
    let mut detections = Vec::new();
    let mut per_cluster: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    let mut lower: Vec<Vec<f64>> = Vec::new();
    let lower_idx = base.lower_indices();

    for (peer, rec) in svc.ledger.latest_updates() {
        if rec.tag.epoch != g.epoch {
            continue;
        }
        let Some(bytes) = fetch_validated(svc, leader, rec.cid)? else {
            svc.ledger.penalize(Some(leader), peer, penalty, PenaltyReason::Integrity)?;
            detections.push((peer, rec.cid));
            continue;
        };
        let Some(seg) = svc.ledger.segment_of(peer) else {
            continue;
        };
        let upd = match PrivatizedUpdate::decode(&bytes) {
            Ok(u) if u.peer == peer && u.delta.same_shape(&base) => u,
            _ => {
                debug!("leader {leader}: malformed update {} from {peer}", rec.cid);
                continue;
            }
        };
        let masked = mask_to_segment(&upd.delta, &seg)?;
        per_cluster
            .entry(seg.cluster_id)
            .or_default()
            .push(owned_values(&masked, &base.segment_row_indices(&seg)?));
        lower.push(owned_values(&masked, &lower_idx));
        aggregated.push((peer, rec.cid));
    }

    let mut deltas = BTreeMap::new();
    let mut carried_over = Vec::new();
    for spec in specs {
        let Some(rows) = per_cluster.get(&spec.cluster_id) else {
            debug!("leader {leader}: segment {} carries over", spec.cluster_id);
            carried_over.push(spec.cluster_id);
            continue;
        };
        let combined = robust_combine(rows, trim, Fallback::Mean)?;
        let mut flat = vec![0.0; base.num_params()];
        for (i, v) in base.segment_row_indices(spec)?.into_iter().zip(combined) {
            flat[i] = v;
        }
        deltas.insert(spec.cluster_id, base.unflatten_like(&flat)?);
    }
    let lower_delta = if lower.is_empty() {
        None
    } else {
        let combined = robust_combine(&lower, trim, Fallback::Mean)?;
        let mut flat = vec![0.0; base.num_params()];
        for (i, v) in lower_idx.into_iter().zip(combined) {
            flat[i] = v;
        }
        Some(base.unflatten_like(&flat)?)
    };
    let global = assemble_global(&base, &deltas, specs, lower_delta.as_ref())?;
    let cid = svc.cas.put(&canonical_bytes(&global)?)?;
    let epoch = g.epoch + 1;
    svc.ledger.save_global_model(Some(leader), cid, epoch)?;
    Ok(LeaderOutcome {
        cid,
        epoch,
        aggregated,
        detections,
        carried_over,
    })
}
