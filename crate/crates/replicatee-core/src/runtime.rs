//! The node/runtime boundary.
//!
//! Protocol logic (replicas, EML members, enclaves, gateways, drivers) is
//! written against [`NodeCtx`] and driven through [`Node`], so the same
//! code runs unchanged under the deterministic simulator and the TCP
//! runtime. A node never touches clocks, sockets, threads, or OS RNGs —
//! everything arrives through the context.
//!
//! Source authenticity: the transport stamps the true sender on every
//! delivery (the authenticated point-to-point channel assumption). A
//! Byzantine node may send arbitrary *bytes* to arbitrary destinations, but
//! cannot make them appear to come from someone else.

use rand::RngCore;

use crate::attest::AttestMsg;
use crate::bft::messages::BftMsg;
use crate::ids::{NodeId, SimTime};
use crate::trace::TraceEvent;
use crate::wire::{WireDecode, WireEncode, WireError, WireReader, WireWriter};

/// Top-level envelope: everything that travels between nodes.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Envelope {
    Bft(BftMsg),
    Attest(AttestMsg),
    /// Uninterpretable bytes: what a Byzantine sender produces when it
    /// corrupts a message beyond decodability. Honest nodes drop these.
    Opaque(Vec<u8>),
}

const ENV_BFT: u8 = 1;
const ENV_ATTEST: u8 = 2;
const ENV_OPAQUE: u8 = 255;

impl WireEncode for Envelope {
    fn encode_into(&self, w: &mut WireWriter) {
        match self {
            Envelope::Bft(m) => {
                w.put_u8(ENV_BFT);
                m.encode_into(w);
            }
            Envelope::Attest(m) => {
                w.put_u8(ENV_ATTEST);
                m.encode_into(w);
            }
            Envelope::Opaque(bytes) => {
                w.put_u8(ENV_OPAQUE);
                w.put_bytes(bytes);
            }
        }
    }
}

impl WireDecode for Envelope {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(match r.get_u8()? {
            ENV_BFT => Envelope::Bft(BftMsg::decode_from(r)?),
            ENV_ATTEST => Envelope::Attest(AttestMsg::decode_from(r)?),
            ENV_OPAQUE => Envelope::Opaque(r.get_bytes()?),
            t => return Err(WireError::BadTag(t)),
        })
    }
}

/// Timers a node can arm. Each variant carries a generation number the node
/// uses to recognize stale fires (timers are never cancelled, only
/// outlived).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TimerKind {
    /// Replica-side: the oldest verified-but-unexecuted request stalled.
    BftRequestStall { gen: u64 },
    /// Replica-side: sent VIEW-CHANGE, no NEW-VIEW yet.
    BftNewViewStall { target_view: u64, gen: u64 },
    /// Replica-side: a sender's hold-back queue has been stuck on a gap.
    BftGapProbe { sender: NodeId, gen: u64 },
    /// Client-side: outstanding request not answered; rebroadcast.
    ClientRetry { gen: u64 },
    /// Attestation session watchdog.
    AttestTimeout { session: u64 },
    /// EML: periodic dispatch cycle.
    EmlDispatch { gen: u64 },
    /// EML master: lease-boundary renewal work is due.
    EmlRenewal { boundary: SimTime },
    /// EML: liveness beacon tick.
    EmlBeacon { gen: u64 },
    /// EML: master silence check.
    EmlGuard { gen: u64 },
    /// App enclave: lease expiry check.
    AppLease { gen: u64 },
    /// Harness drivers (workload generators, scripted faults).
    Driver { token: u64 },
}

/// Crash tripwires the harness can arm: named points in node logic where a
/// scheduled crash takes effect *between* a send and the matching storage
/// write, exercising recovery idempotence.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum CrashPoint {
    AfterProvisionSend,
    AfterResumeSend,
    AfterRenewSend,
}

/// Everything a node may do to the outside world.
pub trait NodeCtx {
    fn now(&self) -> SimTime;
    fn self_id(&self) -> NodeId;
    fn send(&mut self, to: NodeId, msg: Envelope);
    fn set_timer(&mut self, delay: SimTime, kind: TimerKind);
    fn rng(&mut self) -> &mut dyn RngCore;
    fn trace(&mut self, event: TraceEvent);
    /// True when a scheduled crash fires at this point; the caller must
    /// return immediately without further effects (its next storage write
    /// is the one being cut off).
    fn crash_point(&mut self, point: CrashPoint) -> bool;
}

/// A protocol participant driven by the runtime.
pub trait Node {
    fn on_start(&mut self, ctx: &mut dyn NodeCtx);
    fn on_message(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: Envelope);
    fn on_timer(&mut self, ctx: &mut dyn NodeCtx, kind: TimerKind);
    /// Concrete-type access for post-run inspection in tests.
    fn as_any(&self) -> &dyn std::any::Any;
}
