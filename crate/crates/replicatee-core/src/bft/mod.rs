//! MinBFT-replicated key-value storage.
//!
//! 2f+1 replicas totally order client PUT/GET requests and tolerate f
//! Byzantine members. The protocol is the USIG-based two-phase one: the
//! primary wraps each request in a PREPARE certified by its trusted
//! counter, backups acknowledge with COMMITs, and a request executes once
//! f+1 distinct replicas have certified it (the PREPARE counting as the
//! primary's certification). Counter sequentiality per sender replaces the
//! extra round classical BFT needs against equivocation.

pub mod client;
pub mod kv;
pub mod messages;
pub mod replica;

use std::collections::BTreeMap;

use crate::crypto::{sha256, SymKey};
use crate::ids::{NodeId, SimTime};
use crate::wire::{WireDecode, WireEncode, WireError, WireReader, WireWriter};

use kv::{KvResult, KvStore};

/// Per-client execution record: highest executed sequence number and the
/// cached result for it (re-sent when the client retries).
pub type ClientTable = BTreeMap<NodeId, (u64, KvResult)>;

/// Protocol timeouts, in simulated time units.
#[derive(Clone, Copy, Debug)]
pub struct BftTimeouts {
    /// Verified request unexecuted for this long → ask for a view change.
    pub request_stall: SimTime,
    /// VIEW-CHANGE sent, no NEW-VIEW → escalate to the next view.
    pub new_view_stall: SimTime,
    /// Hold-back queue stuck on a counter gap → consider skipping.
    pub gap_probe: SimTime,
    /// Client-side rebroadcast interval.
    pub client_retry: SimTime,
}

impl Default for BftTimeouts {
    fn default() -> Self {
        BftTimeouts {
            request_stall: 300,
            new_view_stall: 400,
            gap_probe: 150,
            client_retry: 250,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub f: u8,
    pub checkpoint_interval: u64,
    /// Authorized clients and their pre-shared request keys — the
    /// allow-list. Requests from anyone else are dropped.
    pub client_keys: BTreeMap<NodeId, SymKey>,
    pub timeouts: BftTimeouts,
}

impl ClusterConfig {
    pub fn new(f: u8, client_keys: BTreeMap<NodeId, SymKey>) -> Self {
        let cfg = ClusterConfig {
            f,
            checkpoint_interval: 64,
            client_keys,
            timeouts: BftTimeouts::default(),
        };
        cfg.validate();
        cfg
    }

    pub fn validate(&self) {
        // The view-change O-log is anchored one stable checkpoint back,
        // which covers all in-flight evidence only while the number of
        // concurrently outstanding requests (≤ one per closed-loop client)
        // stays within one checkpoint interval.
        assert!(
            self.client_keys.len() as u64 <= self.checkpoint_interval,
            "concurrent clients must not exceed the checkpoint interval"
        );
        assert!(self.checkpoint_interval > 0);
    }

    pub fn n(&self) -> u8 {
        2 * self.f + 1
    }

    pub fn quorum(&self) -> usize {
        self.f as usize + 1
    }

    pub fn replicas(&self) -> impl Iterator<Item = NodeId> {
        (0..self.n()).map(NodeId::Replica)
    }

    pub fn primary_of(&self, view: u64) -> NodeId {
        NodeId::Replica((view % self.n() as u64) as u8)
    }

    pub fn is_replica(&self, id: NodeId) -> bool {
        matches!(id, NodeId::Replica(i) if i < self.n())
    }
}

/// Serializes the full replicated state (KV map + client dedup table); its
/// hash is what checkpoint certificates vouch for.
pub fn encode_state(kv: &KvStore, clients: &ClientTable) -> Vec<u8> {
    let mut w = WireWriter::new();
    kv.encode_snapshot(&mut w);
    w.put_u32(clients.len() as u32);
    for (client, (seq, result)) in clients {
        w.put_node(*client);
        w.put_u64(*seq);
        result.encode_into(&mut w);
    }
    w.finish()
}

pub fn decode_state(bytes: &[u8]) -> Result<(KvStore, ClientTable), WireError> {
    let mut r = WireReader::new(bytes);
    let kv = KvStore::decode_snapshot(&mut r)?;
    let n = r.get_u32()? as usize;
    let mut clients = ClientTable::new();
    for _ in 0..n {
        let client = r.get_node()?;
        let seq = r.get_u64()?;
        let result = KvResult::decode_from(&mut r)?;
        clients.insert(client, (seq, result));
    }
    r.expect_end()?;
    Ok((kv, clients))
}

pub fn state_digest(kv: &KvStore, clients: &ClientTable) -> [u8; 32] {
    sha256(&encode_state(kv, clients))
}

/// Digest of the empty (genesis) state.
pub fn genesis_digest() -> [u8; 32] {
    state_digest(&KvStore::new(), &ClientTable::new())
}
