//! Adversarial control over the network and the nodes.
//!
//! The fault plan is the executable form of the threat model: the
//! adversary schedules, delays, drops, and duplicates traffic, crashes
//! nodes (optionally at named tripwires inside a handler), and fully
//! controls up to f storage replica *hosts*. Host control is modeled by
//! [`ByzantineShim`], which wraps an honest node and corrupts its
//! *outbound messages* — it cannot reach inside the enclave-protected
//! state (keys, counters), which is exactly the boundary the protocols
//! rely on.

use std::collections::BTreeMap;

use crate::bft::kv::{KvOp, KvResult, PutGuard};
use crate::bft::messages::BftMsg;
use crate::ids::{NodeId, SimTime};
use crate::runtime::{CrashPoint, Envelope, Node, NodeCtx, TimerKind};
use crate::trace::TraceEvent;

/// What a compromised replica host does with the traffic of the honest
/// logic it sandboxes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ByzMode {
    /// Send alternating destinations a different PREPARE under the same
    /// certified counter (the classic equivocation attempt).
    EquivocatePrepare,
    /// Lie to clients: replace every REPLY's result.
    CorruptReplies,
    /// Send nothing at all.
    Silent,
}

impl ByzMode {
    pub fn parse(s: &str) -> Option<ByzMode> {
        match s {
            "equivocate" => Some(ByzMode::EquivocatePrepare),
            "corrupt-replies" => Some(ByzMode::CorruptReplies),
            "silent" => Some(ByzMode::Silent),
            _ => None,
        }
    }
}

/// Node selector used by link and partition rules.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NodePattern {
    Any,
    Replicas,
    Emls,
    Enclaves,
    Clients,
    Exact(NodeId),
}

impl NodePattern {
    pub fn matches(self, id: NodeId) -> bool {
        match self {
            NodePattern::Any => true,
            NodePattern::Replicas => id.is_replica(),
            NodePattern::Emls => id.is_eml(),
            NodePattern::Enclaves => id.is_enclave(),
            NodePattern::Clients => matches!(id, NodeId::Client(_)),
            NodePattern::Exact(n) => n == id,
        }
    }

    pub fn parse(s: &str) -> Option<NodePattern> {
        match s {
            "*" => Some(NodePattern::Any),
            "replicas" => Some(NodePattern::Replicas),
            "emls" => Some(NodePattern::Emls),
            "enclaves" => Some(NodePattern::Enclaves),
            "clients" => Some(NodePattern::Clients),
            _ => parse_node(s).map(NodePattern::Exact),
        }
    }
}

/// Parses the short display form of a node id ("r0", "eml2", "enc3",
/// "owner1", "c0", "cloud", "proxy", "ias").
pub fn parse_node(s: &str) -> Option<NodeId> {
    match s {
        "cloud" => return Some(NodeId::Cloud),
        "proxy" => return Some(NodeId::Proxy),
        "ias" => return Some(NodeId::Ias),
        _ => {}
    }
    let (prefix, num): (&str, &str) = if let Some(rest) = s.strip_prefix("eml") {
        ("eml", rest)
    } else if let Some(rest) = s.strip_prefix("enc") {
        ("enc", rest)
    } else if let Some(rest) = s.strip_prefix("owner") {
        ("owner", rest)
    } else if let Some(rest) = s.strip_prefix('r') {
        ("r", rest)
    } else if let Some(rest) = s.strip_prefix('c') {
        ("c", rest)
    } else {
        return None;
    };
    match prefix {
        "enc" => num.parse::<u16>().ok().map(NodeId::Enclave),
        "eml" => num.parse::<u8>().ok().map(NodeId::Eml),
        "owner" => num.parse::<u8>().ok().map(NodeId::Owner),
        "r" => num.parse::<u8>().ok().map(NodeId::Replica),
        "c" => num.parse::<u8>().ok().map(NodeId::Client),
        _ => None,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LinkFault {
    /// Suppress the message. Non-permanent drops are retried by the
    /// network once the rule's window closes — liveness checks rely on
    /// this eventual delivery.
    Drop { permanent: bool },
    /// Add `1..=extra_max` units of adversarial delay (reordering).
    Delay { extra_max: SimTime },
    /// Deliver twice.
    Duplicate,
}

#[derive(Clone, Debug)]
pub struct LinkRule {
    pub src: NodePattern,
    pub dst: NodePattern,
    pub fault: LinkFault,
    pub from: SimTime,
    pub until: SimTime,
    /// Fraction of matching messages affected, in 0..=1000.
    pub per_mille: u32,
}

impl LinkRule {
    pub fn active(&self, src: NodeId, dst: NodeId, now: SimTime) -> bool {
        now >= self.from && now < self.until && self.src.matches(src) && self.dst.matches(dst)
    }
}

/// Cuts `island` off from everyone else during `[from, until)`.
#[derive(Clone, Debug)]
pub struct PartitionRule {
    pub island: Vec<NodePattern>,
    pub from: SimTime,
    pub until: SimTime,
}

impl PartitionRule {
    pub fn separates(&self, src: NodeId, dst: NodeId, now: SimTime) -> bool {
        if now < self.from || now >= self.until {
            return false;
        }
        let inside = |id: NodeId| self.island.iter().any(|p| p.matches(id));
        inside(src) != inside(dst)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrashRule {
    pub node: NodeId,
    pub at: SimTime,
    pub restart_at: Option<SimTime>,
}

#[derive(Clone, Copy, Debug)]
pub struct TripwireRule {
    pub node: NodeId,
    pub point: CrashPoint,
    pub restart_after: Option<SimTime>,
}

#[derive(Clone, Debug, Default)]
pub struct FaultPlan {
    pub byzantine: BTreeMap<NodeId, ByzMode>,
    pub crashes: Vec<CrashRule>,
    pub tripwires: Vec<TripwireRule>,
    pub links: Vec<LinkRule>,
    pub partitions: Vec<PartitionRule>,
}

impl FaultPlan {
    /// True when nothing suppresses traffic forever, so every scenario
    /// message is eventually delivered and liveness may be asserted.
    pub fn eventually_delivers(&self, horizon: SimTime) -> bool {
        self.links.iter().all(|r| match r.fault {
            LinkFault::Drop { permanent } => !permanent && r.until < horizon,
            _ => true,
        }) && self.partitions.iter().all(|p| p.until < horizon)
    }
}

/// Wraps an honest node on a compromised host: inbound traffic and local
/// state pass through untouched, outbound messages are rewritten per the
/// mode. The shim cannot forge the sender on the wire — the transport
/// stamps true sources — and cannot mint certificates, since the trusted
/// counter's key never leaves the inner node.
pub struct ByzantineShim {
    inner: Box<dyn Node>,
    mode: ByzMode,
    flip: bool,
}

impl ByzantineShim {
    pub fn new(inner: Box<dyn Node>, mode: ByzMode) -> Self {
        ByzantineShim { inner, mode, flip: false }
    }
}

struct ShimCtx<'a> {
    inner: &'a mut dyn NodeCtx,
    mode: ByzMode,
    flip: &'a mut bool,
}

impl NodeCtx for ShimCtx<'_> {
    fn now(&self) -> SimTime {
        self.inner.now()
    }

    fn self_id(&self) -> NodeId {
        self.inner.self_id()
    }

    fn send(&mut self, to: NodeId, msg: Envelope) {
        match self.mode {
            ByzMode::Silent => {}
            ByzMode::EquivocatePrepare => {
                if let Envelope::Bft(BftMsg::Prepare(p)) = &msg {
                    *self.flip = !*self.flip;
                    if *self.flip {
                        // Same certified counter, different body: the
                        // receiver must never accept this one.
                        let mut twin = p.clone();
                        twin.request.op = KvOp::Put {
                            key: b"equivocated".to_vec(),
                            value: vec![0xEE],
                            guard: PutGuard::Any,
                        };
                        self.inner.send(to, Envelope::Bft(BftMsg::Prepare(twin)));
                        return;
                    }
                }
                self.inner.send(to, msg);
            }
            ByzMode::CorruptReplies => {
                if let Envelope::Bft(BftMsg::Reply(r)) = &msg {
                    let mut lie = r.clone();
                    lie.result = KvResult::PutOk { version: u64::MAX };
                    self.inner.send(to, Envelope::Bft(BftMsg::Reply(lie)));
                    return;
                }
                self.inner.send(to, msg);
            }
        }
    }

    fn set_timer(&mut self, delay: SimTime, kind: TimerKind) {
        self.inner.set_timer(delay, kind);
    }

    fn rng(&mut self) -> &mut dyn rand::RngCore {
        self.inner.rng()
    }

    fn trace(&mut self, event: TraceEvent) {
        self.inner.trace(event);
    }

    fn crash_point(&mut self, point: CrashPoint) -> bool {
        self.inner.crash_point(point)
    }
}

impl Node for ByzantineShim {
    fn on_start(&mut self, ctx: &mut dyn NodeCtx) {
        let mut shim = ShimCtx { inner: ctx, mode: self.mode, flip: &mut self.flip };
        self.inner.on_start(&mut shim);
    }

    fn on_message(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: Envelope) {
        let mut shim = ShimCtx { inner: ctx, mode: self.mode, flip: &mut self.flip };
        self.inner.on_message(&mut shim, from, msg);
    }

    fn on_timer(&mut self, ctx: &mut dyn NodeCtx, kind: TimerKind) {
        let mut shim = ShimCtx { inner: ctx, mode: self.mode, flip: &mut self.flip };
        self.inner.on_timer(&mut shim, kind);
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_names_parse() {
        assert_eq!(parse_node("r0"), Some(NodeId::Replica(0)));
        assert_eq!(parse_node("eml2"), Some(NodeId::Eml(2)));
        assert_eq!(parse_node("enc17"), Some(NodeId::Enclave(17)));
        assert_eq!(parse_node("c1"), Some(NodeId::Client(1)));
        assert_eq!(parse_node("cloud"), Some(NodeId::Cloud));
        assert_eq!(parse_node("bogus"), None);
        assert_eq!(parse_node("r"), None);
    }

    #[test]
    fn patterns_match_classes() {
        assert!(NodePattern::Replicas.matches(NodeId::Replica(4)));
        assert!(!NodePattern::Replicas.matches(NodeId::Client(4)));
        assert!(NodePattern::Any.matches(NodeId::Ias));
        assert!(NodePattern::parse("*").unwrap().matches(NodeId::Cloud));
        assert_eq!(NodePattern::parse("eml1"), Some(NodePattern::Exact(NodeId::Eml(1))));
    }

    #[test]
    fn partition_separates_island_from_rest() {
        let p = PartitionRule {
            island: vec![NodePattern::Exact(NodeId::Replica(0))],
            from: 10,
            until: 20,
        };
        assert!(p.separates(NodeId::Replica(0), NodeId::Replica(1), 15));
        assert!(p.separates(NodeId::Replica(1), NodeId::Replica(0), 15));
        assert!(!p.separates(NodeId::Replica(1), NodeId::Replica(2), 15));
        assert!(!p.separates(NodeId::Replica(0), NodeId::Replica(1), 25));
    }
}
