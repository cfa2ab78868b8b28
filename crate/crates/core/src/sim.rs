//! Run configuration, bootstrap (registration, clustering, segmentation),
//! the discrete-event gossip phase and artifact export.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::aggregation::TrimConfig;
use crate::cas::{CasStore, Cid, DEFAULT_BLOCK_SIZE};
use crate::clustering::{one_shot_cluster, AssignmentNoise, ClusterAssignment};
use crate::dp::{self, DpConfig};
use crate::error::{Error, Result};
use crate::ledger::{GasReport, GasTable, Ledger, PenaltyReason};
use crate::model::{canonical_bytes, segment_boundaries, SegmentSpec};
use crate::paillier::{self, PaillierKeyPair};
use crate::partition::{dirichlet_partition, label_distribution, load_idx, synthetic_blobs, BlobSpec, LabeledDataset};
use crate::peer::{self, Behavior, GossipConfig, PeerState, Services};
use crate::trainer::{self, TrainConfig};
use crate::PeerId;

pub const METRICS_VERSION_LINE: &str = "# fedbgs metrics v1";
pub const METRICS_HEADER: [&str; 8] = [
    "tick",
    "peer_id",
    "cluster_id",
    "iteration",
    "loss",
    "accuracy",
    "tokens",
    "cumulative_gas",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(BlobSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(BlobSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSettings {
    pub clip_threshold: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// Schedule length in per-peer iterations; derived from the scheduler
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_rounds: Option<u64>,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self {
            clip_threshold: 5.0,
            sigma_max: 0.01,
            sigma_min: 0.001,
            total_rounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub duration_ticks: u64,
    pub leader_period: u64,
    pub interval_min: u64,
    pub interval_max: u64,
    pub fanout: usize,
    pub block_period: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            duration_ticks: 500,
            leader_period: 50,
            interval_min: 5,
            interval_max: 15,
            fanout: 2,
            block_period: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cas_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics_out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger_out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gas_report_out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_peers: usize,
    pub num_clusters: usize,
    pub beta: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub trim_ratio: f64,
    pub paillier_bits: u64,
    pub fixed_point_scale: u64,
    pub initial_balance: u64,
    pub reward: u64,
    pub penalty: u64,
    pub penalty_loss_delta: f64,
    pub cluster_dp: bool,
    pub eval_batch: usize,
    pub dataset: DatasetSpec,
    pub dp: DpSettings,
    pub scheduler: SchedulerConfig,
    pub train: TrainConfig,
    pub gas: GasTable,
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_peers: 8,
            num_clusters: 2,
            beta: 1.0,
            seed: 42,
            deterministic: false,
            trim_ratio: 0.2,
            paillier_bits: paillier::DEFAULT_KEY_BITS,
            fixed_point_scale: paillier::DEFAULT_SCALE,
            initial_balance: crate::ledger::DEFAULT_INITIAL_BALANCE,
            reward: 10,
            penalty: 10,
            penalty_loss_delta: 0.5,
            cluster_dp: false,
            eval_batch: 64,
            dataset: DatasetSpec::default(),
            dp: DpSettings::default(),
            scheduler: SchedulerConfig::default(),
            train: TrainConfig::default(),
            gas: GasTable::default(),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_peers == 0 || self.num_clusters == 0 {
            return Err(Error::InvalidConfig("need at least one peer and one cluster".into()));
        }
        if self.num_clusters > self.num_peers {
            return Err(Error::InvalidConfig(format!(
                "{} clusters exceed {} peers",
                self.num_clusters, self.num_peers
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        let classes = match &self.dataset {
            DatasetSpec::Synthetic(b) => b.num_classes,
            DatasetSpec::Idx { num_classes, .. } => *num_classes,
        };
        if self.num_clusters > classes {
            return Err(Error::InvalidConfig(format!(
                "{} segments exceed {classes} output units",
                self.num_clusters
            )));
        }
        TrimConfig {
            trim_ratio: self.trim_ratio,
        }
        .validate()?;
        self.dp_config().validate()?;
        self.train.validate()?;
        self.gas.validate()?;
        let s = &self.scheduler;
        if s.leader_period == 0 || s.block_period == 0 || s.interval_min == 0 || s.interval_min > s.interval_max {
            return Err(Error::InvalidConfig(
                "need leader_period, block_period > 0 and 0 < interval_min <= interval_max".into(),
            ));
        }
        if self.paillier_bits < paillier::MIN_KEY_BITS {
            return Err(Error::InvalidConfig(format!(
                "paillier key must have at least {} bits",
                paillier::MIN_KEY_BITS
            )));
        }
        if self.fixed_point_scale < paillier::MIN_SCALE {
            return Err(Error::InvalidConfig("fixed-point scale too small".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidConfig("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// DP schedule; without an explicit length, the expected number of
    /// iterations per peer over the run.
    pub fn dp_config(&self) -> DpConfig {
        let s = &self.scheduler;
        let mean_interval = ((s.interval_min + s.interval_max) as f64 / 2.0).max(1.0);
        let derived = (s.duration_ticks as f64 / mean_interval).ceil().max(1.0) as u64;
        DpConfig {
            clip_threshold: self.dp.clip_threshold,
            sigma_max: self.dp.sigma_max,
            sigma_min: self.dp.sigma_min,
            total_rounds: self.dp.total_rounds.unwrap_or(derived),
        }
    }

    pub fn gossip_config(&self) -> GossipConfig {
        GossipConfig {
            dp: self.dp_config(),
            trim: TrimConfig {
                trim_ratio: self.trim_ratio,
            },
            train: self.train,
            fanout: self.scheduler.fanout,
            reward: self.reward,
            penalty: self.penalty,
            penalty_loss_delta: self.penalty_loss_delta,
            eval_batch: self.eval_batch,
        }
    }
}

/// Everything the bootstrap produces.
#[derive(Debug)]
pub struct Phase1Result {
    pub ledger: Ledger,
    pub keys: PaillierKeyPair,
    pub assignment: ClusterAssignment,
    pub specs: Vec<SegmentSpec>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub shards: Vec<Vec<usize>>,
}

impl Phase1Result {
    pub fn segment_of(&self, peer: PeerId) -> SegmentSpec {
        self.specs[self.assignment.cluster_of(peer).expect("every peer is assigned")]
    }
}

fn load_datasets(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => synthetic_blobs(spec, cfg.seed),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            num_classes,
        } => Ok((
            load_idx(train_images, train_labels, *num_classes)?,
            load_idx(test_images, test_labels, *num_classes)?,
        )),
    }
}

fn crypto_rng(cfg: &RunConfig, stream: u64) -> ChaCha20Rng {
    if cfg.deterministic {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        rng
    } else {
        ChaCha20Rng::from_entropy()
    }
}

/// Registration, one-shot clustering and segment assignment.
pub fn run_phase1(cfg: &RunConfig) -> Result<Phase1Result> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let shards = dirichlet_partition(&train, cfg.num_peers, cfg.beta, cfg.seed.wrapping_add(1))?;
    let keys = PaillierKeyPair::generate(cfg.paillier_bits, &mut crypto_rng(cfg, 1))?;

    let ledger = Ledger::new(cfg.gas, cfg.initial_balance);
    ledger.set_tick(0);
    ledger.deploy_registry(keys.public().to_decimal())?;
    ledger.deploy_gossip()?;
    let mut distributions = BTreeMap::new();
    for (p, shard) in shards.iter().enumerate() {
        let p = p as PeerId;
        ledger.register(p, &format!("peer-{p}-{:016x}", cfg.seed))?;
        distributions.insert(p, label_distribution(shard, &train)?);
    }

    let noise = cfg.cluster_dp.then(|| AssignmentNoise {
        clip: 1.0,
        sigma: cfg.dp.sigma_max,
    });
    let assignment = one_shot_cluster(
        &distributions,
        cfg.num_clusters,
        &mut crypto_rng(cfg, 2),
        &keys,
        cfg.fixed_point_scale,
        noise,
    )?;
    ledger.save_cluster_centers(None, &assignment.centroids)?;

    let specs = segment_boundaries(train.num_classes(), cfg.num_clusters)?;
    for (&p, &k) in &assignment.assignments {
        ledger.assign_segment(p, specs[k])?;
    }
    for &p in assignment.assignments.keys() {
        ledger.get_segment(p)?;
    }
    ledger.seal_block();
    info!(
        "phase 1 done: {} peers in clusters {:?}",
        cfg.num_peers,
        assignment.membership()
    );
    Ok(Phase1Result {
        ledger,
        keys,
        assignment,
        specs,
        train,
        test,
        shards,
    })
}

/// Test-harness faults injected during the gossip phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultPlan {
    pub adversaries: BTreeMap<PeerId, Behavior>,
    /// 1-based leader round before which one current-epoch update block is
    /// corrupted in the store.
    pub tamper_at_leader_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub tick: u64,
    pub peer_id: PeerId,
    pub cluster_id: usize,
    pub iteration: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: u64,
    pub cumulative_gas: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub clusters: BTreeMap<PeerId, usize>,
    pub initial_accuracy: BTreeMap<PeerId, f64>,
    pub final_accuracy: BTreeMap<PeerId, f64>,
    pub final_loss: BTreeMap<PeerId, f64>,
    pub iterations: BTreeMap<PeerId, u64>,
    pub tokens: BTreeMap<PeerId, u64>,
    pub budget_spent: BTreeMap<PeerId, f64>,
    pub total_gas: u64,
    pub gas_report: GasReport,
    pub global_epochs: u64,
    pub final_model_cid: Cid,
    pub final_model_bytes: Vec<u8>,
    pub ledger_dump: String,
    pub metrics: Vec<MetricRow>,
    /// Failed validations seen by receivers and leaders.
    pub integrity_detections: Vec<(PeerId, Cid)>,
    pub integrity_penalties: usize,
    pub tampered: Vec<(PeerId, Cid)>,
    pub aggregated: BTreeSet<Cid>,
    pub consumed: BTreeSet<Cid>,
    /// Gossip merges of content that had already been tampered with.
    pub tampered_consumed: usize,
    pub consumed_without_record: usize,
    pub audits: u64,
    pub segment_violations: u64,
    pub aborted_iterations: u64,
    pub rejected_syncs: u64,
    pub chain_verified: bool,
}

impl RunReport {
    pub fn accuracy_growth(&self) -> BTreeMap<PeerId, f64> {
        self.final_accuracy
            .iter()
            .map(|(p, a)| (*p, a - self.initial_accuracy[p]))
            .collect()
    }

    /// Mean final accuracy over peers not in `exclude`.
    pub fn mean_accuracy(&self, exclude: &BTreeSet<PeerId>) -> f64 {
        let vals: Vec<f64> = self
            .final_accuracy
            .iter()
            .filter(|(p, _)| !exclude.contains(p))
            .map(|(_, a)| *a)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn summary(&self) -> String {
        let none = BTreeSet::new();
        let mut s = String::new();
        s.push_str(&format!("final model  {}\n", self.final_model_cid));
        s.push_str(&format!("epochs       {}\n", self.global_epochs));
        s.push_str(&format!("mean acc     {:.4}\n", self.mean_accuracy(&none)));
        s.push_str(&format!("total gas    {}\n", self.total_gas));
        s.push_str(&format!(
            "integrity    {} detections, {} penalties\n",
            self.integrity_detections.len(),
            self.integrity_penalties
        ));
        s.push_str(&format!("audits       {} ({} violations)\n", self.audits, self.segment_violations));
        s.push_str("peer  cluster  iters  init_acc  final_acc  growth  tokens\n");
        let growth = self.accuracy_growth();
        for (p, a) in &self.final_accuracy {
            s.push_str(&format!(
                "{:<6}{:<9}{:<7}{:<10.4}{:<11.4}{:<8.4}{}\n",
                p, self.clusters[p], self.iterations[p], self.initial_accuracy[p], a, growth[p], self.tokens[p]
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Seal,
    Tamper,
    Leader,
    PeerWake(PeerId),
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{METRICS_VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(file);
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(METRICS_HEADER).map_err(ser)?;
    for r in rows {
        w.write_record([
            r.tick.to_string(),
            r.peer_id.to_string(),
            r.cluster_id.to_string(),
            r.iteration.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.accuracy),
            r.tokens.to_string(),
            r.cumulative_gas.to_string(),
        ])
        .map_err(ser)?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(cfg: &RunConfig, ledger: &Ledger, rows: &[MetricRow], model: Option<(&Cid, &[u8])>) -> Result<()> {
    let out = &cfg.output;
    if let Some(p) = &out.metrics_out {
        write_metrics(p, rows)?;
    }
    if let Some(p) = &out.ledger_out {
        fs::write(p, ledger.dump())?;
    }
    if let Some(p) = &out.gas_report_out {
        fs::write(p, format!("{}\n", ledger.gas_report()))?;
    }
    if let (Some(p), Some((cid, bytes))) = (&out.model_out, model) {
        fs::write(p, bytes)?;
        let mut cid_path = p.clone().into_os_string();
        cid_path.push(".cid");
        fs::write(cid_path, format!("{cid}\n"))?;
    }
    Ok(())
}

struct Phase2<'a> {
    cfg: &'a RunConfig,
    p1: &'a Phase1Result,
    gossip: GossipConfig,
    cas: CasStore,
    peers: Vec<PeerState>,
    rows: Vec<MetricRow>,
    report: Accumulators,
    tamper_round: Option<usize>,
}

#[derive(Default)]
struct Accumulators {
    detections: Vec<(PeerId, Cid)>,
    tampered: Vec<(PeerId, Cid)>,
    aggregated: BTreeSet<Cid>,
    consumed: Vec<(PeerId, Cid)>,
    tampered_consumed: usize,
    audits: u64,
    violations: u64,
    aborted: u64,
    rejected_syncs: u64,
}

impl Phase2<'_> {
    fn services(&self) -> Services<'_> {
        Services {
            ledger: &self.p1.ledger,
            cas: &self.cas,
        }
    }

    fn evaluate(&mut self, i: usize, tick: u64) -> Result<(f64, f64)> {
        let st = &self.peers[i];
        let (acc, loss) = trainer::evaluate(&st.current_params, &self.p1.test)?;
        let ledger = &self.p1.ledger;
        self.rows.push(MetricRow {
            tick,
            peer_id: st.peer_id,
            cluster_id: st.cluster(),
            iteration: st.iteration_counter,
            loss,
            accuracy: acc,
            tokens: ledger.balance(st.peer_id).unwrap_or(0),
            cumulative_gas: ledger.gas_so_far(),
        });
        Ok((acc, loss))
    }

    fn after_iteration(&mut self, i: usize, tick: u64, res: Result<peer::IterationOutcome>) -> Result<()> {
        match res {
            Ok(out) => {
                if out.synced == Some(peer::SyncOutcome::Rejected) {
                    self.report.rejected_syncs += 1;
                }
                self.report.detections.extend(out.detections);
                let tampered = &self.report.tampered;
                self.report.tampered_consumed +=
                    out.consumed.iter().filter(|c| tampered.iter().any(|t| t.1 == c.1)).count();
                self.report.consumed.extend(out.consumed);
                if self.peers[i].behavior == Behavior::Honest {
                    self.report.audits += 1;
                    self.report.violations += self.peers[i].segment_violations() as u64;
                }
            }
            Err(Error::Ledger(e)) => {
                warn!("peer {} iteration aborted at tick {tick}: {e}", self.peers[i].peer_id);
                self.report.aborted += 1;
            }
            Err(e) => return Err(e),
        }
        self.evaluate(i, tick)?;
        Ok(())
    }

    fn run_wakes(&mut self, tick: u64, batch: &[usize]) -> Result<()> {
        let svc = Services {
            ledger: &self.p1.ledger,
            cas: &self.cas,
        };
        let gossip = &self.gossip;
        let data = &self.p1.train;
        let results: Vec<(usize, Result<peer::IterationOutcome>)> = if self.cfg.deterministic || batch.len() == 1 {
            batch
                .iter()
                .map(|&i| (i, peer::peer_iteration(&mut self.peers[i], svc, gossip, data)))
                .collect()
        } else {
            let wanted: BTreeSet<usize> = batch.iter().copied().collect();
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .peers
                    .iter_mut()
                    .enumerate()
                    .filter(|(i, _)| wanted.contains(i))
                    .map(|(i, st)| (i, s.spawn(move || peer::peer_iteration(st, svc, gossip, data))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(i, h)| (i, h.join().expect("peer thread panicked")))
                    .collect()
            })
        };
        for (i, res) in results {
            self.after_iteration(i, tick, res)?;
        }
        Ok(())
    }

    fn tamper<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let ledger = &self.p1.ledger;
        let epoch = ledger.latest_global()?.epoch;
        let victims: Vec<_> = ledger
            .latest_updates()
            .into_values()
            .filter(|r| r.tag.epoch == epoch)
            .collect();
        if victims.is_empty() {
            warn!("tamper skipped: no update in epoch {epoch}");
            return Ok(());
        }
        let v = victims[rng.gen_range(0..victims.len())];
        let offset = rng.gen_range(0..usize::MAX);
        self.cas.tamper_block(&v.cid, offset)?;
        info!("tampered update {} of peer {}", v.cid, v.peer);
        self.report.tampered.push((v.peer, v.cid));
        Ok(())
    }

    fn leader(&mut self, tick: u64) -> Result<()> {
        let ledger = &self.p1.ledger;
        let leader = ledger.elect_leader(tick)?;
        let out = peer::leader_duty(leader, tick, self.services(), self.gossip.trim, self.cfg.penalty, &self.p1.specs)?;
        info!("tick {tick}: leader {leader} published epoch {} as {}", out.epoch, out.cid);
        self.report.detections.extend(out.detections);
        self.report.aggregated.extend(out.aggregated.into_iter().map(|(_, c)| c));
        Ok(())
    }
}

/// Discrete-event gossip phase followed by a closing leader round and a
/// final sync of every peer.
pub fn run_phase2(cfg: &RunConfig, p1: &Phase1Result, faults: &FaultPlan) -> Result<RunReport> {
    let cas = match &cfg.output.cas_dir {
        Some(dir) => CasStore::open_dir(dir, DEFAULT_BLOCK_SIZE)?,
        None => CasStore::in_memory(),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let init = trainer::init_params(p1.train.feature_dim(), cfg.train.hidden_dim, p1.train.num_classes(), &mut init_rng)?;
    let ledger = &p1.ledger;
    let peers = (0..cfg.num_peers as PeerId)
        .map(|p| {
            let mut st = PeerState::new(p, p1.segment_of(p), init.clone(), p1.shards[p as usize].clone(), cfg.seed);
            st.behavior = faults.adversaries.get(&p).copied().unwrap_or(Behavior::Honest);
            st
        })
        .collect();
    let mut run = Phase2 {
        cfg,
        p1,
        gossip: cfg.gossip_config(),
        cas,
        peers,
        rows: Vec::new(),
        report: Accumulators::default(),
        tamper_round: faults.tamper_at_leader_round,
    };
    let result = drive(&mut run, &init);
    if result.is_err() {
        if let Err(e) = write_artifacts(cfg, ledger, &run.rows, None) {
            warn!("could not flush partial artifacts: {e}");
        }
    }
    result
}

fn drive(run: &mut Phase2<'_>, init: &crate::model::ModelParams) -> Result<RunReport> {
    let cfg = run.cfg;
    let ledger = &run.p1.ledger;
    let sched = cfg.scheduler;
    let duration = sched.duration_ticks;

    ledger.set_tick(0);
    let init_cid = run.cas.put(&canonical_bytes(init)?)?;
    ledger.save_global_model(None, init_cid, 0)?;

    let mut initial_accuracy = BTreeMap::new();
    for i in 0..run.peers.len() {
        let (acc, _) = run.evaluate(i, 0)?;
        initial_accuracy.insert(run.peers[i].peer_id, acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5c4e_d01e);
    let mut queue: BinaryHeap<Reverse<(u64, EventKind, u64)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |q: &mut BinaryHeap<_>, tick: u64, kind: EventKind| {
        q.push(Reverse((tick, kind, seq)));
        seq += 1;
    };
    if duration > 0 {
        push(&mut queue, sched.block_period.min(duration), EventKind::Seal);
        let mut leader_ticks: Vec<u64> = (1..).map(|k| k * sched.leader_period).take_while(|&t| t < duration).collect();
        leader_ticks.push(duration);
        for (round, &t) in leader_ticks.iter().enumerate() {
            if run.tamper_round == Some(round + 1) {
                push(&mut queue, t, EventKind::Tamper);
            }
            if t < duration {
                push(&mut queue, t, EventKind::Leader);
            }
        }
        for p in 0..run.peers.len() as PeerId {
            let t = rng.gen_range(sched.interval_min..=sched.interval_max);
            if t < duration {
                push(&mut queue, t, EventKind::PeerWake(p));
            }
        }
    }

    while let Some(Reverse((tick, kind, _))) = queue.pop() {
        ledger.set_tick(tick);
        match kind {
            EventKind::Seal => {
                ledger.seal_block();
                let next = tick + sched.block_period;
                if next <= duration {
                    push(&mut queue, next, EventKind::Seal);
                }
            }
            EventKind::Tamper => run.tamper(&mut rng)?,
            EventKind::Leader => run.leader(tick)?,
            EventKind::PeerWake(p) => {
                let mut batch = vec![p as usize];
                while let Some(Reverse((t, EventKind::PeerWake(q), _))) = queue.peek().copied() {
                    if t != tick {
                        break;
                    }
                    queue.pop();
                    batch.push(q as usize);
                }
                run.run_wakes(tick, &batch)?;
                for &i in &batch {
                    let next = tick + rng.gen_range(sched.interval_min..=sched.interval_max);
                    if next < duration {
                        push(&mut queue, next, EventKind::PeerWake(i as PeerId));
                    }
                }
            }
        }
    }

    if duration > 0 {
        ledger.set_tick(duration);
        run.leader(duration)?;
        for i in 0..run.peers.len() {
            let svc = Services {
                ledger,
                cas: &run.cas,
            };
            let outcome = peer::sync_global(&mut run.peers[i], svc)?;
            if outcome == peer::SyncOutcome::Rejected {
                run.report.rejected_syncs += 1;
            }
        }
    }

    let mut final_accuracy = BTreeMap::new();
    let mut final_loss = BTreeMap::new();
    for i in 0..run.peers.len() {
        let (acc, loss) = if duration > 0 {
            run.evaluate(i, duration)?
        } else {
            trainer::evaluate(&run.peers[i].current_params, &run.p1.test)?
        };
        final_accuracy.insert(run.peers[i].peer_id, acc);
        final_loss.insert(run.peers[i].peer_id, loss);
    }
    ledger.seal_block();

    let global = ledger.latest_global()?;
    let final_model_bytes = run.cas.get(&global.cid)?;
    write_artifacts(cfg, ledger, &run.rows, Some((&global.cid, &final_model_bytes)))?;

    let dp_cfg = run.gossip.dp;
    let acc = std::mem::take(&mut run.report);
    let consumed_without_record = acc.consumed.iter().filter(|(p, c)| !ledger.is_recorded(*p, c)).count();
    Ok(RunReport {
        clusters: run.peers.iter().map(|s| (s.peer_id, s.cluster())).collect(),
        initial_accuracy,
        final_accuracy,
        final_loss,
        iterations: run.peers.iter().map(|s| (s.peer_id, s.iteration_counter)).collect(),
        tokens: run
            .peers
            .iter()
            .map(|s| (s.peer_id, ledger.balance(s.peer_id).unwrap_or(0)))
            .collect(),
        budget_spent: run
            .peers
            .iter()
            .map(|s| (s.peer_id, dp::budget_spent(s.iteration_counter, &dp_cfg)))
            .collect(),
        total_gas: ledger.total_gas(),
        gas_report: ledger.gas_report(),
        global_epochs: global.epoch,
        final_model_cid: global.cid,
        final_model_bytes,
        ledger_dump: ledger.dump(),
        metrics: std::mem::take(&mut run.rows),
        integrity_detections: acc.detections,
        integrity_penalties: ledger
            .penalties()
            .iter()
            .filter(|(_, r)| *r == PenaltyReason::Integrity)
            .count(),
        tampered: acc.tampered,
        aggregated: acc.aggregated,
        consumed: acc.consumed.iter().map(|(_, c)| *c).collect(),
        consumed_without_record,
        tampered_consumed: acc.tampered_consumed,
        audits: acc.audits,
        segment_violations: acc.violations,
        aborted_iterations: acc.aborted,
        rejected_syncs: acc.rejected_syncs,
        chain_verified: ledger.verify_chain().is_ok(),
    })
}

/// Both phases back to back.
pub fn run(cfg: &RunConfig, faults: &FaultPlan) -> Result<(Phase1Result, RunReport)> {
    let p1 = run_phase1(cfg)?;
    let report = run_phase2(cfg, &p1, faults)?;
    Ok((p1, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> RunConfig {
        RunConfig {
            num_peers: 4,
            num_clusters: 2,
            deterministic: true,
            paillier_bits: paillier::TEST_KEY_BITS,
            dataset: DatasetSpec::Synthetic(BlobSpec {
                num_classes: 4,
                feature_dim: 4,
                train_per_class: 40,
                test_per_class: 10,
                center_scale: 3.0,
                spread: 0.7,
            }),
            scheduler: SchedulerConfig {
                duration_ticks: 60,
                leader_period: 20,
                ..SchedulerConfig::default()
            },
            train: TrainConfig {
                hidden_dim: 8,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_roundtrip() {
        let cfg = small_config();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert!(RunConfig::from_toml("num_peers = 1\nnum_clusters = 2").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn derived_dp_rounds() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.dp_config().total_rounds, 50);
    }

    #[test]
    fn phase1_transactions() {
        let cfg = small_config();
        let p1 = run_phase1(&cfg).unwrap();
        let counts = p1.ledger.op_counts();
        use crate::ledger::TxOp;
        assert_eq!(counts[&TxOp::Register], 4);
        assert_eq!(counts[&TxOp::SaveClusterCenters], 1);
        assert_eq!(counts[&TxOp::AssignSegment], 4);
        assert_eq!(counts[&TxOp::GetSegment], 4);
        for p in 0..4 {
            assert_eq!(p1.ledger.segment_of(p), Some(p1.segment_of(p)));
        }
    }

    #[test]
    fn zero_duration_reports_initial_metrics() {
        let mut cfg = small_config();
        cfg.scheduler.duration_ticks = 0;
        let (_, report) = run(&cfg, &FaultPlan::default()).unwrap();
        assert_eq!(report.metrics.len(), 4);
        assert_eq!(report.global_epochs, 0);
        assert_eq!(report.final_accuracy, report.initial_accuracy);
    }

    #[test]
    fn short_run_is_consistent() {
        let (_, report) = run(&small_config(), &FaultPlan::default()).unwrap();
        assert_eq!(report.global_epochs, 3);
        assert!(report.chain_verified);
        assert_eq!(report.segment_violations, 0);
        assert_eq!(report.consumed_without_record, 0);
        assert!(report.iterations.values().all(|&n| n > 0));
        assert_eq!(report.gas_report.total_gas, report.total_gas);
    }
}
