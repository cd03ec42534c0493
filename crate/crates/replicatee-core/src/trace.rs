//! Structured execution traces.
//!
//! Every node reports semantically meaningful steps as [`TraceEvent`]s; the
//! runtime stamps them with time and emitting node into [`TraceRecord`]s.
//! The trace is the single source the invariant checkers read, and its
//! rendered text feeds the determinism check: two runs of the same seeded
//! scenario must produce byte-identical rendered traces.
//!
//! Rendering must therefore be deterministic — no addresses, no hash-map
//! iteration order, no floats.

use std::fmt;

use crate::bft::kv::{KvOp, KvResult};
use crate::crypto::sha256;
use crate::ids::{AppId, EnclaveId, NodeId, SimTime};

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum TraceEvent {
    // --- replication ---
    /// A UI-bearing message passed the acceptance gate (verified, in
    /// sequence). The equivocation checker asserts no (sender, counter)
    /// pair ever maps to two different body digests across the whole run.
    BftAccepted { sender: NodeId, counter: u64, tag: u8, body_digest: [u8; 32] },
    /// A message re-using an already-accepted counter was dropped.
    BftDuplicateCounter { sender: NodeId, counter: u64 },
    /// The acceptance floor for `sender` jumped over a gap (liveness valve;
    /// never applied to the current primary's stream).
    BftGapSkip { sender: NodeId, from: u64, to: u64 },
    BftExecuted {
        view: u64,
        exec_count: u64,
        client: NodeId,
        client_seq: u64,
        result_digest: [u8; 32],
    },
    BftCheckpointStable { exec_count: u64, digest: [u8; 32] },
    BftViewChangeSent { new_view: u64 },
    BftNewViewAdopted { view: u64, exec_count: u64, state_digest: [u8; 32] },
    /// A message was dropped before acceptance, with a static reason.
    BftRejected { reason: &'static str },

    // --- storage clients ---
    ClientInvoke { seq: u64, op: KvOp },
    ClientResponse { seq: u64, result: KvResult },
    ClientRetry { seq: u64 },

    // --- attestation ---
    AttestMsg { session: u64, step: &'static str },
    AttestComplete { session: u64, peer: NodeId, eml_rooted: bool },
    AttestFailed { session: u64, reason: &'static str },

    // --- enclave management ---
    EmlStatus { app: AppId, status: &'static str },
    EmlDirective { eid: EnclaveId, directive: &'static str, eol: SimTime },
    EmlLeaseRenewal { eid: EnclaveId, new_eol: SimTime },
    EmlMasterElected { master: NodeId },
    EmlRecovered { from: &'static str },
    EmlAck { request: &'static str, applied: bool },
    /// A per-entry status change this member just persisted (or observed
    /// being persisted); the status-machine checker validates the edges.
    EmlTransition { eid: EnclaveId, from: &'static str, to: &'static str },
    /// Snapshot of an application record as read or written: how many
    /// entries count against the parallelism policy. The policy-bound
    /// checker asserts `counted <= policy` on every snapshot.
    EmlRecordState { app: AppId, policy: u32, counted: u32 },

    // --- application enclaves ---
    AppProvisioned { eid: EnclaveId, eol: SimTime },
    AppServed { requests: u64 },
    AppSuspended { eid: EnclaveId },
    AppResumed { eid: EnclaveId, eol: SimTime },
    AppRenewed { eid: EnclaveId, eol: SimTime },
    AppHalted { eid: EnclaveId, at: SimTime },

    // --- key-server gateway ---
    GatewaySigned { identity: NodeId, window: u64, count_in_window: u64 },
    GatewayRefused { identity: NodeId, window: u64 },

    // --- harness ---
    NodeCrashed,
    NodeRestarted,
    StorageWrite { key: Vec<u8>, value_digest: [u8; 32], version: u64 },
    Note { label: &'static str, value: u64 },
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex8(digest: &[u8; 32]) -> String {
    hex(&digest[..8])
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use TraceEvent::*;
        match self {
            BftAccepted { sender, counter, tag, body_digest } => {
                write!(f, "accept {sender} c{counter} t{tag} {}", hex8(body_digest))
            }
            BftDuplicateCounter { sender, counter } => {
                write!(f, "dup-counter {sender} c{counter}")
            }
            BftGapSkip { sender, from, to } => write!(f, "gap-skip {sender} {from}->{to}"),
            BftExecuted { view, exec_count, client, client_seq, result_digest } => write!(
                f,
                "exec v{view} #{exec_count} {client}/{client_seq} {}",
                hex8(result_digest)
            ),
            BftCheckpointStable { exec_count, digest } => {
                write!(f, "ckpt-stable #{exec_count} {}", hex8(digest))
            }
            BftViewChangeSent { new_view } => write!(f, "view-change ->v{new_view}"),
            BftNewViewAdopted { view, exec_count, state_digest } => {
                write!(f, "new-view v{view} #{exec_count} {}", hex8(state_digest))
            }
            BftRejected { reason } => write!(f, "reject {reason}"),
            ClientInvoke { seq, op } => write!(f, "invoke s{seq} {op}"),
            ClientResponse { seq, result } => write!(f, "response s{seq} {result}"),
            ClientRetry { seq } => write!(f, "retry s{seq}"),
            AttestMsg { session, step } => write!(f, "attest[{session}] {step}"),
            AttestComplete { session, peer, eml_rooted } => {
                write!(f, "attest[{session}] done peer={peer} eml-rooted={eml_rooted}")
            }
            AttestFailed { session, reason } => write!(f, "attest[{session}] failed: {reason}"),
            EmlStatus { app, status } => write!(f, "status {app} -> {status}"),
            EmlDirective { eid, directive, eol } => {
                write!(f, "directive {directive} {eid} eol={eol}")
            }
            EmlLeaseRenewal { eid, new_eol } => write!(f, "renew {eid} eol={new_eol}"),
            EmlMasterElected { master } => write!(f, "master {master}"),
            EmlRecovered { from } => write!(f, "recovered from {from}"),
            EmlAck { request, applied } => write!(f, "ack {request} applied={applied}"),
            EmlTransition { eid, from, to } => write!(f, "entry {eid} {from}->{to}"),
            EmlRecordState { app, policy, counted } => {
                write!(f, "record {app} running={counted}/{policy}")
            }
            AppProvisioned { eid, eol } => write!(f, "provisioned {eid} eol={eol}"),
            AppServed { requests } => write!(f, "served {requests}"),
            AppSuspended { eid } => write!(f, "suspended {eid}"),
            AppResumed { eid, eol } => write!(f, "resumed {eid} eol={eol}"),
            AppRenewed { eid, eol } => write!(f, "app-renew {eid} eol={eol}"),
            AppHalted { eid, at } => write!(f, "halted {eid} at={at}"),
            GatewaySigned { identity, window, count_in_window } => {
                write!(f, "sign {identity} w{window} n{count_in_window}")
            }
            GatewayRefused { identity, window } => write!(f, "refuse {identity} w{window}"),
            NodeCrashed => write!(f, "crash"),
            NodeRestarted => write!(f, "restart"),
            StorageWrite { key, value_digest, version } => {
                write!(f, "store {} v{version} {}", hex(key), hex8(value_digest))
            }
            Note { label, value } => write!(f, "note {label}={value}"),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub event: TraceEvent,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8} {:<6} {}", self.time, self.node.to_string(), self.event)
    }
}

/// The trace of one run: ordered records plus a running hash of the
/// rendered lines, so two traces can be compared O(1).
#[derive(Clone, Default, Debug)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(self.render().as_bytes())
    }

    pub fn events_for(&self, node: NodeId) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.node == node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_stable() {
        let mut trace = Trace::default();
        trace.push(TraceRecord {
            time: 10,
            node: NodeId::Replica(0),
            event: TraceEvent::BftViewChangeSent { new_view: 2 },
        });
        trace.push(TraceRecord {
            time: 12,
            node: NodeId::Client(1),
            event: TraceEvent::ClientInvoke {
                seq: 1,
                op: KvOp::Get { key: b"abc".to_vec() },
            },
        });
        let a = trace.render();
        assert_eq!(a, trace.render());
        assert!(a.contains("view-change ->v2"));
        assert!(a.contains("invoke s1 get(616263)"));
        assert_eq!(trace.digest(), trace.digest());
    }
}
