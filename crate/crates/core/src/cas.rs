//! Content-addressed block store.
//!
//! Content is cut into fixed-size leaves. A single leaf is its own root;
//! otherwise an interior root lists `(child cid, child size)` links in order.
//! Node encodings are domain-separated by a leading tag byte and a node's
//! CID is the SHA-256 of its encoding. Every block is re-hashed on read.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::digest::sha256;
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 256 * 1024;
pub const MAX_CONTENT_BYTES: u64 = 64 * 1024 * 1024 * 1024;

const LEAF_TAG: u8 = 0x00;
const INTERIOR_TAG: u8 = 0x01;
const LINK_LEN: usize = 32 + 8;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cid([u8; 32]);

impl Cid {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Cid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cid({})", &self.to_hex()[..12])
    }
}

impl FromStr for Cid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::InvalidInput(format!("bad cid {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::InvalidInput(format!("cid {s:?} is not 32 bytes")))?;
        Ok(Self(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub cid: Cid,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagNode {
    pub links: Vec<Link>,
    pub data: Vec<u8>,
}

impl DagNode {
    fn leaf(data: &[u8]) -> Self {
        Self {
            links: Vec::new(),
            data: data.to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        if self.links.is_empty() {
            let mut out = Vec::with_capacity(1 + self.data.len());
            out.push(LEAF_TAG);
            out.extend_from_slice(&self.data);
            out
        } else {
            let mut out = Vec::with_capacity(5 + self.links.len() * LINK_LEN + self.data.len());
            out.push(INTERIOR_TAG);
            out.extend_from_slice(&(self.links.len() as u32).to_le_bytes());
            for l in &self.links {
                out.extend_from_slice(&l.cid.0);
                out.extend_from_slice(&l.size.to_le_bytes());
            }
            out.extend_from_slice(&self.data);
            out
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.first() {
            Some(&LEAF_TAG) => Ok(Self::leaf(&bytes[1..])),
            Some(&INTERIOR_TAG) => {
                let count = bytes
                    .get(1..5)
                    .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                    .ok_or_else(|| Error::Integrity("truncated interior node".into()))?;
                let body = &bytes[5..];
                if body.len() < count.saturating_mul(LINK_LEN) {
                    return Err(Error::Integrity("truncated link list".into()));
                }
                let links = body[..count * LINK_LEN]
                    .chunks_exact(LINK_LEN)
                    .map(|c| Link {
                        cid: Cid(c[..32].try_into().expect("32 bytes")),
                        size: u64::from_le_bytes(c[32..].try_into().expect("8 bytes")),
                    })
                    .collect();
                Ok(Self {
                    links,
                    data: body[count * LINK_LEN..].to_vec(),
                })
            }
            _ => Err(Error::Integrity("unknown node tag".into())),
        }
    }

    pub fn cid(&self) -> Cid {
        Cid(sha256(&self.encode()))
    }
}

/// Builds the DAG for `content` without storing it: `(root, blocks)` with
/// leaves first and the root last.
fn build_dag(content: &[u8], block_size: usize) -> Result<(Cid, Vec<(Cid, Vec<u8>)>)> {
    if content.len() as u64 > MAX_CONTENT_BYTES {
        return Err(Error::SizeLimit(content.len() as u64));
    }
    let leaves: Vec<DagNode> = if content.is_empty() {
        vec![DagNode::leaf(&[])]
    } else {
        content.chunks(block_size).map(DagNode::leaf).collect()
    };
    let mut blocks: Vec<(Cid, Vec<u8>)> = leaves
        .iter()
        .map(|n| {
            let enc = n.encode();
            (Cid(sha256(&enc)), enc)
        })
        .collect();
    if blocks.len() == 1 {
        return Ok((blocks[0].0, blocks));
    }
    let root = DagNode {
        links: blocks
            .iter()
            .zip(&leaves)
            .map(|((cid, _), leaf)| Link {
                cid: *cid,
                size: leaf.data.len() as u64,
            })
            .collect(),
        data: Vec::new(),
    };
    let enc = root.encode();
    let root_cid = Cid(sha256(&enc));
    blocks.push((root_cid, enc));
    Ok((root_cid, blocks))
}

/// Root CID `content` would receive with the given block size.
pub fn compute_cid(content: &[u8], block_size: usize) -> Result<Cid> {
    Ok(build_dag(content, block_size)?.0)
}

enum Backend {
    Memory(RwLock<HashMap<Cid, Vec<u8>>>),
    Disk(PathBuf),
}

pub struct CasStore {
    backend: Backend,
    block_size: usize,
    tmp_counter: AtomicU64,
}

impl fmt::Debug for CasStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.backend {
            Backend::Memory(_) => "memory".to_string(),
            Backend::Disk(p) => p.display().to_string(),
        };
        f.debug_struct("CasStore")
            .field("backend", &kind)
            .field("block_size", &self.block_size)
            .finish()
    }
}

impl CasStore {
    pub fn in_memory() -> Self {
        Self::in_memory_with_block_size(DEFAULT_BLOCK_SIZE)
    }

    pub fn in_memory_with_block_size(block_size: usize) -> Self {
        Self {
            backend: Backend::Memory(RwLock::new(HashMap::new())),
            block_size: block_size.max(1),
            tmp_counter: AtomicU64::new(0),
        }
    }

    /// Opens (creating if needed) a store keeping one file per block, named
    /// by the block's hex digest.
    pub fn open_dir(dir: impl AsRef<Path>, block_size: usize) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            backend: Backend::Disk(dir.as_ref().to_path_buf()),
            block_size: block_size.max(1),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn read_block(&self, cid: &Cid) -> Result<Vec<u8>> {
        match &self.backend {
            Backend::Memory(map) => map
                .read()
                .expect("cas lock poisoned")
                .get(cid)
                .cloned()
                .ok_or(Error::NotFound(*cid)),
            Backend::Disk(dir) => match fs::read(dir.join(cid.to_hex())) {
                Ok(b) => Ok(b),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Err(Error::NotFound(*cid)),
                Err(e) => Err(e.into()),
            },
        }
    }

    fn write_block(&self, cid: &Cid, bytes: &[u8]) -> Result<()> {
        match &self.backend {
            Backend::Memory(map) => {
                map.write()
                    .expect("cas lock poisoned")
                    .entry(*cid)
                    .or_insert_with(|| bytes.to_vec());
                Ok(())
            }
            Backend::Disk(dir) => {
                let path = dir.join(cid.to_hex());
                if path.exists() {
                    return Ok(());
                }
                let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
                let tmp = dir.join(format!(".{}.{}.{n}.tmp", cid.to_hex(), std::process::id()));
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_all()?;
                fs::rename(&tmp, &path)?;
                Ok(())
            }
        }
    }

    /// Stores `content` and returns its root CID. Storing the same bytes
    /// again writes nothing new.
    pub fn put(&self, content: &[u8]) -> Result<Cid> {
        let (root, blocks) = build_dag(content, self.block_size)?;
        for (cid, bytes) in &blocks {
            self.write_block(cid, bytes)?;
        }
        Ok(root)
    }

    fn read_node(&self, cid: &Cid, verify: bool) -> Result<DagNode> {
        let bytes = self.read_block(cid)?;
        if verify && sha256(&bytes) != cid.0 {
            return Err(Error::Integrity(format!("block {cid} does not match its address")));
        }
        DagNode::decode(&bytes)
    }

    fn assemble(&self, cid: &Cid, verify: bool) -> Result<Vec<u8>> {
        let root = self.read_node(cid, verify)?;
        if root.links.is_empty() {
            return Ok(root.data);
        }
        let mut out = Vec::with_capacity(root.links.iter().map(|l| l.size as usize).sum());
        for link in &root.links {
            let child = self.read_node(&link.cid, verify)?;
            if !child.links.is_empty() {
                return Err(Error::Integrity("DAG deeper than two levels".into()));
            }
            if verify && child.data.len() as u64 != link.size {
                return Err(Error::Integrity(format!("block {} has the wrong size", link.cid)));
            }
            out.extend_from_slice(&child.data);
        }
        Ok(out)
    }

    /// Reassembles `cid`, verifying every block hash and link size.
    pub fn get(&self, cid: &Cid) -> Result<Vec<u8>> {
        let out = self.assemble(cid, true)?;
        if compute_cid(&out, self.block_size)? != *cid {
            return Err(Error::Integrity(format!("content of {cid} does not match its address")));
        }
        Ok(out)
    }

    /// Reassembles whatever bytes are stored under `cid` without checking
    /// them, as an untrusted fetch would. Callers validate the result against
    /// the ledger record.
    pub fn fetch_unverified(&self, cid: &Cid) -> Result<Vec<u8>> {
        self.assemble(cid, false)
    }

    /// True iff `content` hashes to `cid` under this store's chunking.
    pub fn verify(&self, cid: &Cid, content: &[u8]) -> bool {
        compute_cid(content, self.block_size).map(|c| c == *cid).unwrap_or(false)
    }

    pub fn contains(&self, cid: &Cid) -> bool {
        self.read_block(cid).is_ok()
    }

    pub fn block_count(&self) -> Result<usize> {
        match &self.backend {
            Backend::Memory(map) => Ok(map.read().expect("cas lock poisoned").len()),
            Backend::Disk(dir) => Ok(fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
                .count()),
        }
    }

    /// CIDs of the blocks reachable from `root`, root first.
    pub fn block_cids(&self, root: &Cid) -> Result<Vec<Cid>> {
        let node = self.read_node(root, false)?;
        let mut out = vec![*root];
        out.extend(node.links.iter().map(|l| l.cid));
        Ok(out)
    }

    /// Fault injection: flips the low bit of byte `offset` (modulo the block
    /// length) of the stored block `cid`, bypassing addressing.
    pub fn tamper_block(&self, cid: &Cid, offset: usize) -> Result<()> {
        let mut bytes = self.read_block(cid)?;
        if bytes.is_empty() {
            return Err(Error::InvalidInput("cannot tamper with an empty block".into()));
        }
        let at = offset % bytes.len();
        bytes[at] ^= 0x01;
        match &self.backend {
            Backend::Memory(map) => {
                map.write().expect("cas lock poisoned").insert(*cid, bytes);
            }
            Backend::Disk(dir) => fs::write(dir.join(cid.to_hex()), bytes)?,
        }
        Ok(())
    }
}
