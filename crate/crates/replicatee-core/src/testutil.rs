//! Test-only [`NodeCtx`] that records effects in memory, for driving
//! protocol state machines directly without the simulator.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ids::{NodeId, SimTime};
use crate::runtime::{CrashPoint, Envelope, NodeCtx, TimerKind};
use crate::trace::TraceEvent;

pub struct TestCtx {
    pub now: SimTime,
    pub id: NodeId,
    pub rng: ChaCha12Rng,
    pub sent: Vec<(NodeId, Envelope)>,
    pub traces: Vec<TraceEvent>,
    pub timers: Vec<(SimTime, TimerKind)>,
}

impl TestCtx {
    pub fn new(id: NodeId, seed: u64) -> TestCtx {
        TestCtx {
            now: 0,
            id,
            rng: ChaCha12Rng::seed_from_u64(seed),
            sent: Vec::new(),
            traces: Vec::new(),
            timers: Vec::new(),
        }
    }

    pub fn drain(&mut self) -> Vec<(NodeId, Envelope)> {
        std::mem::take(&mut self.sent)
    }
}

impl NodeCtx for TestCtx {
    fn now(&self) -> SimTime {
        self.now
    }

    fn self_id(&self) -> NodeId {
        self.id
    }

    fn send(&mut self, to: NodeId, msg: Envelope) {
        self.sent.push((to, msg));
    }

    fn set_timer(&mut self, delay: SimTime, kind: TimerKind) {
        self.timers.push((self.now + delay, kind));
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }

    fn trace(&mut self, event: TraceEvent) {
        self.traces.push(event);
    }

    fn crash_point(&mut self, _point: CrashPoint) -> bool {
        false
    }
}
