//! Trace invariant checkers.
//!
//! Every checker is a pure function over a finished [`Trace`]: the
//! simulation records what happened, the checkers decide whether it was
//! allowed to happen. Keeping them outside the node implementations means
//! a buggy or malicious node can't also be the judge of its own run.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::bft::kv::{KvOp, KvResult, KvStore};
use crate::ids::NodeId;
use crate::trace::{Trace, TraceEvent};

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Outcome {
    Pass,
    Fail(String),
    /// The scenario's fault plan makes this property unclaimable (e.g.
    /// liveness under a partition that never heals).
    NotApplicable(&'static str),
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub name: &'static str,
    pub outcome: Outcome,
    /// Trace record index of the first violation, when one exists.
    pub violation_at: Option<usize>,
}

impl Verdict {
    fn pass(name: &'static str) -> Verdict {
        Verdict { name, outcome: Outcome::Pass, violation_at: None }
    }

    fn fail(name: &'static str, at: Option<usize>, why: String) -> Verdict {
        Verdict { name, outcome: Outcome::Fail(why), violation_at: at }
    }

    pub fn ok(&self) -> bool {
        !matches!(self.outcome, Outcome::Fail(_))
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.outcome {
            Outcome::Pass => write!(f, "{}: pass", self.name),
            Outcome::Fail(why) => write!(f, "{}: FAIL — {why}", self.name),
            Outcome::NotApplicable(why) => write!(f, "{}: n/a ({why})", self.name),
        }
    }
}

/// No two acceptances may bind the same `(sender, counter)` to different
/// message bodies. The trusted counter makes this unforgeable; a conflict
/// here means either the counter service or an acceptance gate is broken.
pub fn equivocation(trace: &Trace) -> Verdict {
    let mut seen: BTreeMap<(NodeId, u64), [u8; 32]> = BTreeMap::new();
    for (i, rec) in trace.records.iter().enumerate() {
        if let TraceEvent::BftAccepted { sender, counter, body_digest, .. } = &rec.event {
            if let Some(prev) = seen.insert((*sender, *counter), *body_digest) {
                if prev != *body_digest {
                    return Verdict::fail(
                        "equivocation",
                        Some(i),
                        format!("{sender} counter {counter} accepted with two bodies"),
                    );
                }
            }
        }
    }
    Verdict::pass("equivocation")
}

/// Replicated execution never forks where a client could see it.
///
/// Checked per replica: execution indices move in `+1` steps between the
/// resets a new-view adoption installs. An adoption may land behind the
/// replica's own count: execution indices are meaningful within one view's
/// lineage, not across lineages, because everything client-visible is
/// certified, certified work is always inside an adopted state, and the
/// rest was provisional by definition.
///
/// Checked globally, the cross-lineage guarantees that *do* hold: a client
/// request has one outcome (every execution of the same `(client, seq)`
/// anywhere reports the same result digest); all adopters of a view adopt
/// the same `(count, state)`; and stable checkpoints at the same height
/// are the same state — two certificates share a signer, and an honest
/// signer only reaches one state per height that a quorum will co-sign.
pub fn exec_consistency(trace: &Trace) -> Verdict {
    const NAME: &str = "exec-consistency";
    let mut next: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut outcomes: BTreeMap<(NodeId, u64), [u8; 32]> = BTreeMap::new();
    let mut nv_states: BTreeMap<u64, (u64, [u8; 32])> = BTreeMap::new();
    let mut cp_digests: BTreeMap<u64, [u8; 32]> = BTreeMap::new();

    for (i, rec) in trace.records.iter().enumerate() {
        match &rec.event {
            TraceEvent::BftExecuted { exec_count, client, client_seq, result_digest, .. } => {
                let expect = next.entry(rec.node).or_insert(1);
                if *exec_count != *expect {
                    return Verdict::fail(
                        NAME,
                        Some(i),
                        format!("{} executed #{exec_count}, expected #{expect}", rec.node),
                    );
                }
                *expect = exec_count + 1;
                if let Some(prev) = outcomes.insert((*client, *client_seq), *result_digest) {
                    if prev != *result_digest {
                        return Verdict::fail(
                            NAME,
                            Some(i),
                            format!("{client} seq {client_seq} executed with diverging results"),
                        );
                    }
                }
            }
            TraceEvent::BftNewViewAdopted { view, exec_count, state_digest } => {
                next.insert(rec.node, exec_count + 1);
                if let Some(prev) = nv_states.insert(*view, (*exec_count, *state_digest)) {
                    if prev != (*exec_count, *state_digest) {
                        return Verdict::fail(
                            NAME,
                            Some(i),
                            format!("view {view} adopted with diverging states"),
                        );
                    }
                }
            }
            TraceEvent::BftCheckpointStable { exec_count, digest } => {
                if let Some(prev) = cp_digests.insert(*exec_count, *digest) {
                    if prev != *digest {
                        return Verdict::fail(
                            NAME,
                            Some(i),
                            format!("checkpoint digest at #{exec_count} disagrees"),
                        );
                    }
                }
            }
            _ => {}
        }
    }
    Verdict::pass(NAME)
}

struct ClientOp {
    invoke_at: usize,
    op: KvOp,
    /// `(trace index, result)` of the response, if one ever arrived.
    response: Option<(usize, KvResult)>,
}

/// Per-client operation histories, in invocation order.
fn client_histories(trace: &Trace) -> BTreeMap<NodeId, Vec<ClientOp>> {
    let mut hist: BTreeMap<NodeId, Vec<ClientOp>> = BTreeMap::new();
    let mut index: BTreeMap<(NodeId, u64), usize> = BTreeMap::new();
    for (i, rec) in trace.records.iter().enumerate() {
        match &rec.event {
            TraceEvent::ClientInvoke { seq, op } => {
                let ops = hist.entry(rec.node).or_default();
                index.insert((rec.node, *seq), ops.len());
                ops.push(ClientOp { invoke_at: i, op: op.clone(), response: None });
            }
            TraceEvent::ClientResponse { seq, result } => {
                // seq 0 marks a client-side refusal that never reached the
                // cluster; it has no invocation to pair with.
                if let Some(&slot) = index.get(&(rec.node, *seq)) {
                    let op = &mut hist.get_mut(&rec.node).unwrap()[slot];
                    if op.response.is_none() {
                        op.response = Some((i, result.clone()));
                    }
                }
            }
            _ => {}
        }
    }
    hist
}

/// Wing–Gong style linearizability search, specialized to closed-loop
/// clients (each client has at most one operation outstanding, so the
/// next candidate from every client is exactly its frontier operation).
///
/// An operation with no response is necessarily its client's last; it may
/// have taken effect or not, so the search branches on both. States are
/// memoized on `(per-client progress, store digest)`.
fn linearize(histories: &[Vec<ClientOp>]) -> bool {
    fn dfs(
        histories: &[Vec<ClientOp>],
        frontier: &mut Vec<u16>,
        kv: &mut KvStore,
        memo: &mut HashSet<(Vec<u16>, [u8; 32])>,
    ) -> bool {
        if frontier
            .iter()
            .zip(histories)
            .all(|(&f, h)| f as usize == h.len())
        {
            return true;
        }
        if !memo.insert((frontier.clone(), kv.digest())) {
            return false;
        }
        for i in 0..histories.len() {
            let fi = frontier[i] as usize;
            if fi == histories[i].len() {
                continue;
            }
            let cand = &histories[i][fi];
            // Real-time order: nothing that finished before this op began
            // may still be waiting to be linearized.
            let blocked = (0..histories.len()).any(|j| {
                if j == i {
                    return false;
                }
                let fj = frontier[j] as usize;
                fj < histories[j].len()
                    && matches!(&histories[j][fj].response, Some((at, _)) if *at < cand.invoke_at)
            });
            if blocked {
                continue;
            }
            match &cand.response {
                Some((_, observed)) => {
                    let mut kv2 = kv.clone();
                    let got = kv2.apply(&cand.op);
                    if got == *observed {
                        frontier[i] += 1;
                        if dfs(histories, frontier, &mut kv2, memo) {
                            return true;
                        }
                        frontier[i] -= 1;
                    }
                }
                None => {
                    // Branch 1: the op took effect even though the client
                    // never heard back.
                    let mut kv2 = kv.clone();
                    kv2.apply(&cand.op);
                    frontier[i] += 1;
                    if dfs(histories, frontier, &mut kv2, memo) {
                        return true;
                    }
                    // Branch 2: it never took effect at all.
                    if dfs(histories, frontier, kv, memo) {
                        return true;
                    }
                    frontier[i] -= 1;
                }
            }
        }
        false
    }

    let mut frontier = vec![0u16; histories.len()];
    let mut kv = KvStore::new();
    let mut memo = HashSet::new();
    dfs(histories, &mut frontier, &mut kv, &mut memo)
}

/// Every client-observed response must be explainable by some total order
/// of operations consistent with real time.
pub fn linearizability(trace: &Trace) -> Verdict {
    const NAME: &str = "linearizability";
    let hist = client_histories(trace);
    for (client, ops) in &hist {
        for (k, op) in ops.iter().enumerate() {
            if op.response.is_none() && k + 1 != ops.len() {
                return Verdict::fail(
                    NAME,
                    Some(op.invoke_at),
                    format!("{client} invoked past an unanswered operation"),
                );
            }
        }
    }
    let histories: Vec<Vec<ClientOp>> = hist.into_values().collect();
    if linearize(&histories) {
        Verdict::pass(NAME)
    } else {
        Verdict::fail(NAME, None, "no valid linearization of client responses".into())
    }
}

/// Every invoked operation eventually got a response. Only meaningful when
/// the fault plan lets every message through eventually; callers pass
/// `expected = false` to mark the run as not claiming liveness.
pub fn liveness(trace: &Trace, expected: bool) -> Verdict {
    const NAME: &str = "liveness";
    if !expected {
        return Verdict {
            name: NAME,
            outcome: Outcome::NotApplicable("fault plan does not guarantee delivery"),
            violation_at: None,
        };
    }
    for (client, ops) in client_histories(trace) {
        for (k, op) in ops.iter().enumerate() {
            if op.response.is_none() {
                return Verdict::fail(
                    NAME,
                    Some(op.invoke_at),
                    format!("{client} op {} never completed", k + 1),
                );
            }
        }
    }
    Verdict::pass(NAME)
}

/// No watched secret may appear on the wire (reported live by the network)
/// or in the rendered trace.
pub fn confidentiality(trace: &Trace, wire_hits: &[String], secrets: &[Vec<u8>]) -> Verdict {
    const NAME: &str = "confidentiality";
    if let Some(hit) = wire_hits.first() {
        return Verdict::fail(NAME, None, hit.clone());
    }
    if !secrets.is_empty() {
        for (i, rec) in trace.records.iter().enumerate() {
            let line = rec.event.to_string();
            for secret in secrets {
                let hexed = crate::trace::hex(secret);
                let printable = String::from_utf8_lossy(secret);
                if line.contains(&hexed)
                    || (secret.len() >= 4 && line.contains(printable.as_ref()))
                {
                    return Verdict::fail(NAME, Some(i), format!("secret appears in trace: {line}"));
                }
            }
        }
    }
    Verdict::pass(NAME)
}

/// The executed-request log of each replica, for whole-log comparisons.
pub fn replica_exec_logs(trace: &Trace) -> BTreeMap<NodeId, Vec<(u64, NodeId, u64, [u8; 32])>> {
    let mut logs: BTreeMap<NodeId, Vec<(u64, NodeId, u64, [u8; 32])>> = BTreeMap::new();
    for rec in &trace.records {
        if let TraceEvent::BftExecuted { exec_count, client, client_seq, result_digest, .. } =
            &rec.event
        {
            logs.entry(rec.node)
                .or_default()
                .push((*exec_count, *client, *client_seq, *result_digest));
        }
    }
    logs
}

/// Nodes that were down when the run ended.
pub fn crashed_at_end(trace: &Trace) -> BTreeSet<NodeId> {
    let mut down = BTreeSet::new();
    for rec in &trace.records {
        match rec.event {
            TraceEvent::NodeCrashed => {
                down.insert(rec.node);
            }
            TraceEvent::NodeRestarted => {
                down.remove(&rec.node);
            }
            _ => {}
        }
    }
    down
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bft::kv::PutGuard;
    use crate::trace::TraceRecord;

    fn rec(node: NodeId, event: TraceEvent) -> TraceRecord {
        TraceRecord { time: 0, node, event }
    }

    fn put(key: &[u8], value: &[u8]) -> KvOp {
        KvOp::Put { key: key.to_vec(), value: value.to_vec(), guard: PutGuard::Any }
    }

    #[test]
    fn equivocation_flags_conflicting_bodies() {
        let mut t = Trace::default();
        let r0 = NodeId::Replica(0);
        let r1 = NodeId::Replica(1);
        t.records.push(rec(
            r1,
            TraceEvent::BftAccepted { sender: r0, counter: 1, tag: 2, body_digest: [1; 32] },
        ));
        assert!(equivocation(&t).ok());
        t.records.push(rec(
            NodeId::Replica(2),
            TraceEvent::BftAccepted { sender: r0, counter: 1, tag: 2, body_digest: [9; 32] },
        ));
        let v = equivocation(&t);
        assert!(!v.ok());
        assert_eq!(v.violation_at, Some(1));
    }

    #[test]
    fn exec_consistency_requires_dense_agreeing_logs() {
        let c = NodeId::Client(0);
        let exec = |n: u8, count: u64, d: u8| {
            rec(
                NodeId::Replica(n),
                TraceEvent::BftExecuted {
                    view: 0,
                    exec_count: count,
                    client: c,
                    client_seq: count,
                    result_digest: [d; 32],
                },
            )
        };
        let mut t = Trace::default();
        t.records.push(exec(0, 1, 1));
        t.records.push(exec(1, 1, 1));
        t.records.push(exec(0, 2, 2));
        assert!(exec_consistency(&t).ok());

        // A replica skipping a slot is a hole in its log.
        let mut t2 = Trace::default();
        t2.records.push(exec(0, 2, 2));
        assert!(!exec_consistency(&t2).ok());

        // Two replicas answering one request differently is a fork.
        let mut t3 = Trace::default();
        t3.records.push(exec(0, 1, 1));
        t3.records.push(exec(1, 1, 7));
        assert!(!exec_consistency(&t3).ok());
    }

    #[test]
    fn exec_consistency_handles_adoption_resets() {
        let c = NodeId::Client(0);
        let exec = |n: u8, count: u64, seq: u64| {
            rec(
                NodeId::Replica(n),
                TraceEvent::BftExecuted {
                    view: 0,
                    exec_count: count,
                    client: c,
                    client_seq: seq,
                    result_digest: [seq as u8; 32],
                },
            )
        };
        let adopt = |n: u8, view: u64, count: u64, d: u8| {
            rec(
                NodeId::Replica(n),
                TraceEvent::BftNewViewAdopted { view, exec_count: count, state_digest: [d; 32] },
            )
        };

        // An adoption may move a replica's count forward or backward; the
        // density requirement restarts from the adopted count either way.
        let mut t = Trace::default();
        t.records.push(exec(0, 1, 1));
        t.records.push(exec(0, 2, 2));
        t.records.push(adopt(0, 1, 1, 5));
        t.records.push(exec(0, 2, 3));
        t.records.push(adopt(0, 2, 7, 6));
        t.records.push(exec(0, 8, 4));
        assert!(exec_consistency(&t).ok());

        // ... but off-adoption jumps still fail.
        let mut t2 = Trace::default();
        t2.records.push(adopt(0, 1, 3, 5));
        t2.records.push(exec(0, 5, 1));
        assert!(!exec_consistency(&t2).ok());

        // Two replicas adopting one view must install one state.
        let mut t3 = Trace::default();
        t3.records.push(adopt(0, 1, 3, 5));
        t3.records.push(adopt(1, 1, 3, 9));
        assert!(!exec_consistency(&t3).ok());

        // Stable checkpoints at one height must match across lineages.
        let cp = |n: u8, count: u64, d: u8| {
            rec(
                NodeId::Replica(n),
                TraceEvent::BftCheckpointStable { exec_count: count, digest: [d; 32] },
            )
        };
        let mut t4 = Trace::default();
        t4.records.push(cp(0, 64, 1));
        t4.records.push(cp(1, 64, 1));
        assert!(exec_consistency(&t4).ok());
        t4.records.push(cp(2, 64, 3));
        assert!(!exec_consistency(&t4).ok());
    }

    #[test]
    fn linearizable_history_accepted() {
        let c0 = NodeId::Client(0);
        let mut t = Trace::default();
        t.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 1, op: put(b"a", b"1") }));
        t.records
            .push(rec(c0, TraceEvent::ClientResponse { seq: 1, result: KvResult::PutOk { version: 1 } }));
        t.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 2, op: KvOp::Get { key: b"a".to_vec() } }));
        t.records.push(rec(
            c0,
            TraceEvent::ClientResponse {
                seq: 2,
                result: KvResult::Value(Some((b"1".to_vec(), 1))),
            },
        ));
        assert!(linearizability(&t).ok());
    }

    #[test]
    fn stale_read_rejected() {
        let c0 = NodeId::Client(0);
        let c1 = NodeId::Client(1);
        let mut t = Trace::default();
        // c0 writes and completes; c1 then reads and sees nothing — a
        // value loss no interleaving explains.
        t.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 1, op: put(b"a", b"1") }));
        t.records
            .push(rec(c0, TraceEvent::ClientResponse { seq: 1, result: KvResult::PutOk { version: 1 } }));
        t.records.push(rec(c1, TraceEvent::ClientInvoke { seq: 1, op: KvOp::Get { key: b"a".to_vec() } }));
        t.records
            .push(rec(c1, TraceEvent::ClientResponse { seq: 1, result: KvResult::Value(None) }));
        let v = linearizability(&t);
        assert!(!v.ok());
    }

    #[test]
    fn unanswered_final_op_may_apply_or_vanish() {
        let c0 = NodeId::Client(0);
        let c1 = NodeId::Client(1);
        // c0's write never completes, but c1 observes it: the search must
        // take the "applied" branch.
        let mut t = Trace::default();
        t.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 1, op: put(b"a", b"1") }));
        t.records.push(rec(c1, TraceEvent::ClientInvoke { seq: 1, op: KvOp::Get { key: b"a".to_vec() } }));
        t.records.push(rec(
            c1,
            TraceEvent::ClientResponse {
                seq: 1,
                result: KvResult::Value(Some((b"1".to_vec(), 1))),
            },
        ));
        assert!(linearizability(&t).ok());

        // ... and if nobody observes it, the "vanished" branch also works.
        let mut t2 = Trace::default();
        t2.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 1, op: put(b"a", b"1") }));
        t2.records.push(rec(c1, TraceEvent::ClientInvoke { seq: 1, op: KvOp::Get { key: b"a".to_vec() } }));
        t2.records
            .push(rec(c1, TraceEvent::ClientResponse { seq: 1, result: KvResult::Value(None) }));
        assert!(linearizability(&t2).ok());
    }

    #[test]
    fn liveness_counts_unanswered_ops() {
        let c0 = NodeId::Client(0);
        let mut t = Trace::default();
        t.records.push(rec(c0, TraceEvent::ClientInvoke { seq: 1, op: put(b"a", b"1") }));
        assert!(!liveness(&t, true).ok());
        assert!(matches!(liveness(&t, false).outcome, Outcome::NotApplicable(_)));
        t.records
            .push(rec(c0, TraceEvent::ClientResponse { seq: 1, result: KvResult::PutOk { version: 1 } }));
        assert!(liveness(&t, true).ok());
    }
}
