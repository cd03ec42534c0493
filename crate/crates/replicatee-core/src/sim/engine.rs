//! The discrete-event core: one clock, one queue, deterministic order.
//!
//! Nodes interact with the world only through [`NodeCtx`]; the engine owns
//! the clock, the message queue, all randomness, and the fault plan, so a
//! run is a pure function of (topology, plan, seed). Events are processed
//! in `(deliver_time, enqueue_tag)` order — the tag makes ties
//! deterministic without pretending simultaneous events have a "true"
//! order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bft::messages::BftMsg;
use crate::crypto::sha256_parts;
use crate::ids::{NodeId, SimTime};
use crate::runtime::{CrashPoint, Envelope, Node, NodeCtx, TimerKind};
use crate::sim::faults::{FaultPlan, LinkFault};
use crate::trace::{Trace, TraceEvent, TraceRecord};
use crate::wire::WireEncode;

/// Link and compute costs, in simulated time units (read as milliseconds).
///
/// Compute costs attach to message kinds rather than to node callbacks:
/// a storage operation pays `storage_op` on the request hop, and each
/// attestation handshake hop pays `attest_round`. This is a cost *model*
/// for breakdown sanity checks, not a measurement.
#[derive(Clone, Copy, Debug)]
pub struct LatencyModel {
    pub link: SimTime,
    /// Uniform extra per delivery in `0..=jitter` (0 disables).
    pub jitter: SimTime,
    pub attest_round: SimTime,
    pub storage_op: SimTime,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { link: 1, jitter: 0, attest_round: 0, storage_op: 0 }
    }
}

impl LatencyModel {
    fn extra(&self, env: &Envelope) -> SimTime {
        match env {
            Envelope::Bft(BftMsg::Request(_)) => self.storage_op,
            Envelope::Attest(_) => self.attest_round,
            _ => 0,
        }
    }
}

enum QPayload {
    Deliver { src: NodeId, dst: NodeId, env: Envelope },
    Timer { node: NodeId, incarnation: u32, kind: TimerKind },
    Crash { node: NodeId },
    Restart { node: NodeId },
}

struct QEvent {
    time: SimTime,
    tag: u64,
    payload: QPayload,
}

impl PartialEq for QEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.tag == other.tag
    }
}

impl Eq for QEvent {}

impl PartialOrd for QEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.tag).cmp(&(other.time, other.tag))
    }
}

struct Slot {
    node: Box<dyn Node>,
    rng: ChaCha20Rng,
    alive: bool,
    incarnation: u32,
    /// Armed crash tripwires: point → restart delay (None = stay down).
    tripwires: BTreeMap<CrashPoint, Option<SimTime>>,
    /// Rebuilds the node on restart (incarnation number passed in);
    /// crash-stop nodes have none.
    factory: Option<Box<dyn Fn(u32) -> Box<dyn Node>>>,
}

/// The context handed to a node during one callback. Effects are buffered
/// and applied by the engine after the callback returns; once a crash
/// tripwire fires, every later effect from the same callback is discarded.
pub struct SimCtx<'a> {
    now: SimTime,
    id: NodeId,
    rng: &'a mut ChaCha20Rng,
    tripwires: &'a mut BTreeMap<CrashPoint, Option<SimTime>>,
    crashed: Option<Option<SimTime>>,
    msgs: Vec<(NodeId, Envelope)>,
    timers: Vec<(SimTime, TimerKind)>,
    events: Vec<TraceEvent>,
}

impl NodeCtx for SimCtx<'_> {
    fn now(&self) -> SimTime {
        self.now
    }

    fn self_id(&self) -> NodeId {
        self.id
    }

    fn send(&mut self, to: NodeId, msg: Envelope) {
        if self.crashed.is_none() {
            self.msgs.push((to, msg));
        }
    }

    fn set_timer(&mut self, delay: SimTime, kind: TimerKind) {
        if self.crashed.is_none() {
            self.timers.push((delay, kind));
        }
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    fn trace(&mut self, event: TraceEvent) {
        if self.crashed.is_none() {
            self.events.push(event);
        }
    }

    fn crash_point(&mut self, point: CrashPoint) -> bool {
        if self.crashed.is_some() {
            return true;
        }
        match self.tripwires.remove(&point) {
            Some(restart) => {
                self.crashed = Some(restart);
                true
            }
            None => false,
        }
    }
}

pub struct Engine {
    now: SimTime,
    horizon: SimTime,
    queue: BinaryHeap<Reverse<QEvent>>,
    next_tag: u64,
    slots: BTreeMap<NodeId, Slot>,
    trace: Trace,
    faults: FaultPlan,
    latency: LatencyModel,
    fault_rng: ChaCha20Rng,
    seed: u64,
    secret_watch: Vec<Vec<u8>>,
    secret_hits: Vec<String>,
    deliver_cap: u64,
    delivered: u64,
}

impl Engine {
    pub fn new(seed: u64, horizon: SimTime, faults: FaultPlan, latency: LatencyModel) -> Self {
        let mut eng = Engine {
            now: 0,
            horizon,
            queue: BinaryHeap::new(),
            next_tag: 0,
            slots: BTreeMap::new(),
            trace: Trace::default(),
            faults,
            latency,
            fault_rng: ChaCha20Rng::from_seed(sha256_parts(&[b"fault-rng", &seed.to_le_bytes()])),
            seed,
            secret_watch: Vec::new(),
            secret_hits: Vec::new(),
            deliver_cap: u64::MAX,
            delivered: 0,
        };
        let crashes = eng.faults.crashes.clone();
        for c in crashes {
            eng.push(c.at, QPayload::Crash { node: c.node });
            if let Some(at) = c.restart_at {
                eng.push(at, QPayload::Restart { node: c.node });
            }
        }
        eng
    }

    pub fn add_node(&mut self, id: NodeId, node: Box<dyn Node>) {
        self.insert_slot(id, node, None);
    }

    /// A node the harness may bring back after a crash; `factory` is called
    /// with the new incarnation number.
    pub fn add_restartable(
        &mut self,
        id: NodeId,
        factory: Box<dyn Fn(u32) -> Box<dyn Node>>,
    ) {
        let node = factory(0);
        self.insert_slot(id, node, Some(factory));
    }

    fn insert_slot(
        &mut self,
        id: NodeId,
        node: Box<dyn Node>,
        factory: Option<Box<dyn Fn(u32) -> Box<dyn Node>>>,
    ) {
        let tripwires = self
            .faults
            .tripwires
            .iter()
            .filter(|t| t.node == id)
            .map(|t| (t.point, t.restart_after))
            .collect();
        let rng_seed = sha256_parts(&[b"node-rng", &self.seed.to_le_bytes(), &id.to_wire()]);
        let prev = self.slots.insert(
            id,
            Slot {
                node,
                rng: ChaCha20Rng::from_seed(rng_seed),
                alive: true,
                incarnation: 0,
                tripwires,
                factory,
            },
        );
        assert!(prev.is_none(), "duplicate node {id}");
    }

    /// Register a secret byte-string that must never appear on the wire in
    /// the clear. Every outgoing envelope is scanned.
    pub fn watch_secret(&mut self, secret: Vec<u8>) {
        if !secret.is_empty() {
            self.secret_watch.push(secret);
        }
    }

    /// Stop delivering messages after this many deliveries (timers still
    /// fire) — the knob behind counterexample minimization.
    pub fn set_deliver_cap(&mut self, cap: u64) {
        self.deliver_cap = cap;
    }

    fn push(&mut self, time: SimTime, payload: QPayload) {
        let tag = self.next_tag;
        self.next_tag += 1;
        self.queue.push(Reverse(QEvent { time, tag, payload }));
    }

    /// Runs the simulation to the horizon (or until nothing is left to do).
    pub fn run(&mut self) {
        let ids: Vec<NodeId> = self.slots.keys().copied().collect();
        for id in ids {
            self.with_node(id, |node, ctx| node.on_start(ctx));
        }
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.horizon {
                break;
            }
            debug_assert!(ev.time >= self.now, "time went backwards");
            self.now = ev.time;
            match ev.payload {
                QPayload::Deliver { src, dst, env } => {
                    if self.delivered >= self.deliver_cap {
                        continue;
                    }
                    if !self.slots.get(&dst).map(|s| s.alive).unwrap_or(false) {
                        continue;
                    }
                    self.delivered += 1;
                    self.with_node(dst, |node, ctx| node.on_message(ctx, src, env));
                }
                QPayload::Timer { node, incarnation, kind } => {
                    let live = self
                        .slots
                        .get(&node)
                        .map(|s| s.alive && s.incarnation == incarnation)
                        .unwrap_or(false);
                    if live {
                        self.with_node(node, |n, ctx| n.on_timer(ctx, kind));
                    }
                }
                QPayload::Crash { node } => {
                    if let Some(slot) = self.slots.get_mut(&node) {
                        if slot.alive {
                            slot.alive = false;
                            self.trace.push(TraceRecord {
                                time: self.now,
                                node,
                                event: TraceEvent::NodeCrashed,
                            });
                        }
                    }
                }
                QPayload::Restart { node } => self.restart(node),
            }
        }
    }

    fn restart(&mut self, id: NodeId) {
        let Some(slot) = self.slots.get_mut(&id) else { return };
        if slot.alive {
            return;
        }
        let fresh = match slot.factory.as_ref() {
            Some(f) => f(slot.incarnation + 1),
            None => return, // crash-stop node
        };
        slot.incarnation += 1;
        slot.node = fresh;
        slot.alive = true;
        self.trace.push(TraceRecord { time: self.now, node: id, event: TraceEvent::NodeRestarted });
        self.with_node(id, |node, ctx| node.on_start(ctx));
    }

    fn with_node<F>(&mut self, id: NodeId, f: F)
    where
        F: FnOnce(&mut dyn Node, &mut SimCtx<'_>),
    {
        let Some(mut slot) = self.slots.remove(&id) else { return };
        if !slot.alive {
            self.slots.insert(id, slot);
            return;
        }
        let mut ctx = SimCtx {
            now: self.now,
            id,
            rng: &mut slot.rng,
            tripwires: &mut slot.tripwires,
            crashed: None,
            msgs: Vec::new(),
            timers: Vec::new(),
            events: Vec::new(),
        };
        f(&mut *slot.node, &mut ctx);
        let SimCtx { crashed, msgs, timers, events, .. } = ctx;
        let incarnation = slot.incarnation;
        for event in events {
            self.trace.push(TraceRecord { time: self.now, node: id, event });
        }
        for (to, env) in msgs {
            self.route(id, to, env);
        }
        for (delay, kind) in timers {
            let time = self.now.saturating_add(delay);
            self.push(time, QPayload::Timer { node: id, incarnation, kind });
        }
        if let Some(restart) = crashed {
            slot.alive = false;
            self.trace.push(TraceRecord { time: self.now, node: id, event: TraceEvent::NodeCrashed });
            if let Some(delay) = restart {
                let time = self.now.saturating_add(delay);
                self.push(time, QPayload::Restart { node: id });
            }
        }
        self.slots.insert(id, slot);
    }

    /// Applies the secret scan, latency model, and fault plan to one send.
    fn route(&mut self, src: NodeId, dst: NodeId, env: Envelope) {
        if !self.secret_watch.is_empty() {
            let bytes = env.encode();
            for secret in &self.secret_watch {
                if bytes.windows(secret.len()).any(|w| w == &secret[..]) {
                    self.secret_hits.push(format!("plaintext secret {src}->{dst} at {}", self.now));
                }
            }
        }

        let mut latency = self.latency.link + self.latency.extra(&env);
        if self.latency.jitter > 0 {
            latency += self.fault_rng.gen_range(0..=self.latency.jitter);
        }
        let mut duplicate = false;
        // The time a suppressed (but not permanently dropped) message
        // becomes deliverable again: the adversary must let it through
        // eventually for liveness scenarios.
        let mut resume_at: Option<SimTime> = None;

        for rule in &self.faults.links {
            if !rule.active(src, dst, self.now) {
                continue;
            }
            if rule.per_mille < 1000 && self.fault_rng.gen_range(0..1000u32) >= rule.per_mille {
                continue;
            }
            match rule.fault {
                LinkFault::Drop { permanent } => {
                    if permanent {
                        return;
                    }
                    resume_at = Some(resume_at.unwrap_or(0).max(rule.until));
                }
                LinkFault::Delay { extra_max } => {
                    latency += self.fault_rng.gen_range(1..=extra_max.max(1));
                }
                LinkFault::Duplicate => duplicate = true,
            }
        }
        for part in &self.faults.partitions {
            if part.separates(src, dst, self.now) {
                resume_at = Some(resume_at.unwrap_or(0).max(part.until));
            }
        }

        let mut at = self.now.saturating_add(latency);
        if let Some(resume) = resume_at {
            at = at.max(resume.saturating_add(self.latency.link));
        }
        if duplicate {
            let echo = at.saturating_add(1 + self.fault_rng.gen_range(0..25));
            let copy = env.clone();
            self.push(echo, QPayload::Deliver { src, dst, env: copy });
        }
        self.push(at, QPayload::Deliver { src, dst, env });
    }

    // --- post-run inspection ---

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn secret_hits(&self) -> &[String] {
        &self.secret_hits
    }

    pub fn into_outputs(self) -> (Trace, Vec<String>, u64) {
        (self.trace, self.secret_hits, self.delivered)
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.slots.get(&id).map(|s| s.alive).unwrap_or(false)
    }

    /// Typed access to a node, for tests that assert on final state.
    pub fn node_as<T: 'static>(&self, id: NodeId) -> Option<&T> {
        self.slots.get(&id)?.node.as_any().downcast_ref()
    }
}
