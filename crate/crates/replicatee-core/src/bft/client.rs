//! Closed-loop storage client.
//!
//! One operation in flight at a time: the request is multicast to every
//! replica, rebroadcast on a retry timer, and considered complete once
//! f+1 replicas sent byte-identical results. Replies are matched by the
//! transport-authenticated sender, so fewer than f+1 matching faulty
//! replicas cannot forge an outcome.

use std::collections::BTreeMap;

use crate::bft::kv::{KvOp, KvResult};
use crate::bft::messages::{BftMsg, ClientRequest, Reply};
use crate::bft::ClusterConfig;
use crate::crypto::SymKey;
use crate::ids::NodeId;
use crate::runtime::{Envelope, Node, NodeCtx, TimerKind};
use crate::trace::TraceEvent;
use crate::wire::{WireDecode, WireEncode};

struct InFlight {
    request: ClientRequest,
    /// replica → encoded result it vouched for.
    votes: BTreeMap<NodeId, Vec<u8>>,
    retry_gen: u64,
}

pub struct StorageClient {
    cfg: ClusterConfig,
    id: NodeId,
    key: SymKey,
    next_seq: u64,
    retry_epoch: u64,
    inflight: Option<InFlight>,
    /// Operations queued behind the in-flight one.
    backlog: Vec<KvOp>,
    /// Operations submitted automatically at startup (scenario workloads).
    script: Vec<KvOp>,
    /// (seq, result) history, for tests and linearizability checking.
    completed: Vec<(u64, KvResult)>,
}

impl StorageClient {
    pub fn new(cfg: ClusterConfig, id: NodeId, key: SymKey) -> Self {
        assert!(
            cfg.client_keys.contains_key(&id),
            "{id} missing from the cluster client allow-list"
        );
        StorageClient {
            cfg,
            id,
            key,
            next_seq: 0,
            retry_epoch: 0,
            inflight: None,
            backlog: Vec::new(),
            script: Vec::new(),
            completed: Vec::new(),
        }
    }

    /// A client that runs `script` to completion, one op at a time.
    pub fn with_script(cfg: ClusterConfig, id: NodeId, key: SymKey, script: Vec<KvOp>) -> Self {
        let mut c = StorageClient::new(cfg, id, key);
        c.script = script;
        c
    }

    pub fn completed(&self) -> &[(u64, KvResult)] {
        &self.completed
    }

    pub fn is_idle(&self) -> bool {
        self.inflight.is_none() && self.backlog.is_empty()
    }

    /// Queue an operation. Ill-formed writes (empty key or value) are
    /// refused locally — the cluster would reject them anyway.
    pub fn submit(&mut self, ctx: &mut dyn NodeCtx, op: KvOp) {
        if let KvOp::Put { key, value, .. } = &op {
            if key.is_empty() || value.is_empty() {
                ctx.trace(TraceEvent::ClientResponse { seq: 0, result: KvResult::Rejected });
                return;
            }
        }
        if self.inflight.is_some() {
            self.backlog.push(op);
        } else {
            self.launch(ctx, op);
        }
    }

    fn launch(&mut self, ctx: &mut dyn NodeCtx, op: KvOp) {
        self.next_seq += 1;
        self.retry_epoch += 1;
        let request = ClientRequest::new_signed(self.id, self.next_seq, op.clone(), &self.key);
        ctx.trace(TraceEvent::ClientInvoke { seq: self.next_seq, op });
        let retry_gen = self.retry_epoch;
        self.inflight = Some(InFlight { request, votes: BTreeMap::new(), retry_gen });
        self.broadcast(ctx);
        ctx.set_timer(self.cfg.timeouts.client_retry, TimerKind::ClientRetry { gen: retry_gen });
    }

    fn broadcast(&mut self, ctx: &mut dyn NodeCtx) {
        let Some(f) = &self.inflight else { return };
        let msg = Envelope::Bft(BftMsg::Request(f.request.clone()));
        for r in self.cfg.replicas() {
            ctx.send(r, msg.clone());
        }
    }

    fn on_reply(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, reply: Reply) {
        if !self.cfg.is_replica(from) || reply.replica != from {
            return;
        }
        let Some(f) = &mut self.inflight else { return };
        if reply.seq != f.request.seq {
            return;
        }
        f.votes.insert(from, reply.result.encode());
        let mut tally: BTreeMap<&[u8], usize> = BTreeMap::new();
        for encoded in f.votes.values() {
            *tally.entry(encoded).or_default() += 1;
        }
        let quorum = self.cfg.quorum();
        let Some((winner, _)) = tally.into_iter().find(|(_, n)| *n >= quorum) else { return };
        let result = KvResult::decode(winner).expect("replica results round-trip");
        let seq = f.request.seq;
        self.completed.push((seq, result.clone()));
        ctx.trace(TraceEvent::ClientResponse { seq, result });
        self.inflight = None;
        if !self.backlog.is_empty() {
            let op = self.backlog.remove(0);
            self.launch(ctx, op);
        }
    }

    fn on_retry(&mut self, ctx: &mut dyn NodeCtx, gen: u64) {
        let Some(f) = &self.inflight else { return };
        if f.retry_gen != gen {
            return;
        }
        let seq = f.request.seq;
        ctx.trace(TraceEvent::ClientRetry { seq });
        self.broadcast(ctx);
        ctx.set_timer(self.cfg.timeouts.client_retry, TimerKind::ClientRetry { gen });
    }
}

impl Node for StorageClient {
    fn on_start(&mut self, ctx: &mut dyn NodeCtx) {
        for op in std::mem::take(&mut self.script) {
            self.submit(ctx, op);
        }
    }

    fn on_message(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: Envelope) {
        if let Envelope::Bft(BftMsg::Reply(reply)) = msg {
            self.on_reply(ctx, from, reply);
        }
    }

    fn on_timer(&mut self, ctx: &mut dyn NodeCtx, kind: TimerKind) {
        if let TimerKind::ClientRetry { gen } = kind {
            self.on_retry(ctx, gen);
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
