//! Scenario configuration and the run loop around the engine.
//!
//! A scenario is a small TOML document: cluster size, a randomized
//! workload, a fault plan, and which properties the run claims. Running
//! one builds the node graph, executes the engine, and judges the trace
//! with every checker. The same seed always reproduces the same trace.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use crate::bft::client::StorageClient;
use crate::bft::kv::{KvOp, PutGuard};
use crate::bft::replica::Replica;
use crate::bft::{BftTimeouts, ClusterConfig};
use crate::crypto::{sha256_parts, SymKey};
use crate::ids::{NodeId, SimTime};
use crate::runtime::{CrashPoint, Node};
use crate::sim::checkers::{self, Outcome, Verdict};
use crate::sim::engine::{Engine, LatencyModel};
use crate::sim::faults::{
    parse_node, ByzMode, ByzantineShim, CrashRule, FaultPlan, LinkFault, LinkRule, NodePattern,
    PartitionRule, TripwireRule,
};
use crate::trace::Trace;
use crate::usig::{Usig, UsigVerifier};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario is invalid: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub horizon: SimTime,
    /// Fault tolerance: the cluster has 2f+1 replicas.
    pub f: u8,
    /// Counter certificate flavor: "mac" (unforgeable) or "structural"
    /// (transparent, example runs only — never valid with an adversary).
    pub crypto: String,
    /// Global stabilization time: every transient network fault must end
    /// by here when the scenario claims liveness.
    pub gst: SimTime,
    pub expect_liveness: bool,
    /// Re-run the whole scenario and require a byte-identical trace.
    pub check_determinism: bool,
    pub workload: WorkloadConfig,
    pub faults: FaultsConfig,
    pub latency: LatencyConfig,
    pub timeouts: TimeoutsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            seed: 0,
            horizon: 60_000,
            f: 1,
            crypto: "mac".into(),
            gst: 10_000,
            expect_liveness: true,
            check_determinism: false,
            workload: WorkloadConfig::default(),
            faults: FaultsConfig::default(),
            latency: LatencyConfig::default(),
            timeouts: TimeoutsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    /// "kv" for randomized puts/gets, "none" for a clientless run.
    pub kind: String,
    pub clients: u8,
    /// Operations per client.
    pub ops: u32,
    /// Size of the shared key space (contention comes from its smallness).
    pub keys: u32,
    pub put_ratio_pct: u32,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig { kind: "kv".into(), clients: 2, ops: 30, keys: 5, put_ratio_pct: 60 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultsConfig {
    pub byzantine: Vec<ByzSpec>,
    pub crash: Vec<CrashSpec>,
    pub tripwire: Vec<TripwireSpec>,
    pub link: Vec<LinkSpec>,
    pub partition: Vec<PartitionSpec>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzSpec {
    pub node: String,
    /// "equivocate" | "corrupt-replies" | "silent"
    pub mode: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub node: String,
    pub at: SimTime,
    pub restart_at: Option<SimTime>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripwireSpec {
    pub node: String,
    /// "after-provision-send" | "after-resume-send" | "after-renew-send"
    pub point: String,
    pub restart_after: Option<SimTime>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSpec {
    pub src: String,
    pub dst: String,
    /// "drop" | "drop-permanent" | "delay" | "duplicate"
    pub fault: String,
    /// Maximum extra delay for "delay".
    pub extra_max: SimTime,
    pub from: SimTime,
    pub until: SimTime,
    /// Fraction of matching messages hit, out of 1000.
    pub per_mille: u32,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            src: "*".into(),
            dst: "*".into(),
            fault: "drop".into(),
            extra_max: 50,
            from: 0,
            until: 0,
            per_mille: 1000,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub island: Vec<String>,
    pub from: SimTime,
    pub until: SimTime,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub link: SimTime,
    pub jitter: SimTime,
    pub attest_round: SimTime,
    pub storage_op: SimTime,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig { link: 1, jitter: 0, attest_round: 25, storage_op: 10 }
    }
}

impl LatencyConfig {
    fn model(self) -> LatencyModel {
        LatencyModel {
            link: self.link.max(1),
            jitter: self.jitter,
            attest_round: self.attest_round,
            storage_op: self.storage_op,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeoutsConfig {
    pub request_stall: SimTime,
    pub new_view_stall: SimTime,
    pub gap_probe: SimTime,
    pub client_retry: SimTime,
}

impl Default for TimeoutsConfig {
    fn default() -> Self {
        let t = BftTimeouts::default();
        TimeoutsConfig {
            request_stall: t.request_stall,
            new_view_stall: t.new_view_stall,
            gap_probe: t.gap_probe,
            client_retry: t.client_retry,
        }
    }
}

impl TimeoutsConfig {
    fn bft(self) -> BftTimeouts {
        BftTimeouts {
            request_stall: self.request_stall,
            new_view_stall: self.new_view_stall,
            gap_probe: self.gap_probe,
            client_retry: self.client_retry,
        }
    }
}

fn parse_crash_point(s: &str) -> Option<CrashPoint> {
    match s {
        "after-provision-send" => Some(CrashPoint::AfterProvisionSend),
        "after-resume-send" => Some(CrashPoint::AfterResumeSend),
        "after-renew-send" => Some(CrashPoint::AfterRenewSend),
        _ => None,
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.compile_faults()?; // surface plan errors at load time
        Ok(cfg)
    }

    pub fn n(&self) -> u8 {
        2 * self.f + 1
    }

    fn node(&self, s: &str) -> Result<NodeId, ScenarioError> {
        parse_node(s).ok_or_else(|| invalid(format!("unknown node '{s}'")))
    }

    fn pattern(&self, s: &str) -> Result<NodePattern, ScenarioError> {
        NodePattern::parse(s).ok_or_else(|| invalid(format!("unknown node pattern '{s}'")))
    }

    /// Validates the raw fault tables and lowers them to an executable
    /// [`FaultPlan`].
    pub fn compile_faults(&self) -> Result<FaultPlan, ScenarioError> {
        let mut plan = FaultPlan::default();

        for spec in &self.faults.byzantine {
            let node = self.node(&spec.node)?;
            if !matches!(node, NodeId::Replica(i) if i < self.n()) {
                return Err(invalid(format!("byzantine node {node} is not a cluster replica")));
            }
            let mode = ByzMode::parse(&spec.mode)
                .ok_or_else(|| invalid(format!("unknown byzantine mode '{}'", spec.mode)))?;
            if plan.byzantine.insert(node, mode).is_some() {
                return Err(invalid(format!("{node} listed byzantine twice")));
            }
        }
        if plan.byzantine.len() > self.f as usize {
            return Err(invalid(format!(
                "{} byzantine replicas exceed the tolerance f={}",
                plan.byzantine.len(),
                self.f
            )));
        }
        if !plan.byzantine.is_empty() && self.crypto != "mac" {
            return Err(invalid(
                "structural counter certificates are forgeable; adversarial runs require mac",
            ));
        }

        for spec in &self.faults.crash {
            plan.crashes.push(CrashRule {
                node: self.node(&spec.node)?,
                at: spec.at,
                restart_at: spec.restart_at,
            });
        }

        for spec in &self.faults.tripwire {
            let point = parse_crash_point(&spec.point)
                .ok_or_else(|| invalid(format!("unknown crash point '{}'", spec.point)))?;
            plan.tripwires.push(TripwireRule {
                node: self.node(&spec.node)?,
                point,
                restart_after: spec.restart_after,
            });
        }

        for spec in &self.faults.link {
            let fault = match spec.fault.as_str() {
                "drop" => LinkFault::Drop { permanent: false },
                "drop-permanent" => LinkFault::Drop { permanent: true },
                "delay" => LinkFault::Delay { extra_max: spec.extra_max.max(1) },
                "duplicate" => LinkFault::Duplicate,
                other => return Err(invalid(format!("unknown link fault '{other}'"))),
            };
            if spec.until <= spec.from {
                return Err(invalid("link rule window is empty"));
            }
            if spec.per_mille > 1000 {
                return Err(invalid("per_mille is out of 0..=1000"));
            }
            plan.links.push(LinkRule {
                src: self.pattern(&spec.src)?,
                dst: self.pattern(&spec.dst)?,
                fault,
                from: spec.from,
                until: spec.until,
                per_mille: spec.per_mille,
            });
        }

        for spec in &self.faults.partition {
            if spec.until <= spec.from {
                return Err(invalid("partition window is empty"));
            }
            let island = spec
                .island
                .iter()
                .map(|s| self.pattern(s))
                .collect::<Result<Vec<_>, _>>()?;
            plan.partitions.push(PartitionRule { island, from: spec.from, until: spec.until });
        }

        if self.expect_liveness {
            if self.gst > self.horizon {
                return Err(invalid("gst is past the horizon but liveness is claimed"));
            }
            let quiet_by_gst = plan
                .links
                .iter()
                .all(|r| r.until <= self.gst && !matches!(r.fault, LinkFault::Drop { permanent: true }))
                && plan.partitions.iter().all(|p| p.until <= self.gst);
            if !quiet_by_gst {
                return Err(invalid(
                    "a network fault outlives gst; drop the liveness claim or shorten it",
                ));
            }
        }
        Ok(plan)
    }

    /// The per-client operation scripts this configuration implies.
    fn scripts(&self, seed: u64) -> BTreeMap<NodeId, Vec<KvOp>> {
        let mut out = BTreeMap::new();
        if self.workload.kind != "kv" {
            return out;
        }
        let keys = self.workload.keys.max(1);
        for c in 0..self.workload.clients {
            let id = NodeId::Client(c);
            let mut rng = ChaCha20Rng::from_seed(sha256_parts(&[
                b"workload",
                &seed.to_le_bytes(),
                &id.to_wire(),
            ]));
            let mut ops = Vec::with_capacity(self.workload.ops as usize);
            for _ in 0..self.workload.ops {
                let key = format!("k{}", rng.gen_range(0..keys)).into_bytes();
                if rng.gen_range(0..100) < self.workload.put_ratio_pct {
                    let len = rng.gen_range(1..=8);
                    let value: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                    let guard = match rng.gen_range(0..100) {
                        0..=69 => PutGuard::Any,
                        70..=84 => PutGuard::Absent,
                        _ => PutGuard::Version(rng.gen_range(0..4)),
                    };
                    ops.push(KvOp::Put { key, value, guard });
                } else {
                    ops.push(KvOp::Get { key });
                }
            }
            out.insert(id, ops);
        }
        out
    }
}

/// Everything a finished run leaves behind.
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub trace: Trace,
    pub verdicts: Vec<Verdict>,
    pub delivered: u64,
    pub secret_hits: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(Verdict::ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.ok())
    }

    /// True when a safety property (not liveness) failed — the class of
    /// failure worth shrinking.
    fn failed_safety(&self) -> bool {
        self.verdicts.iter().any(|v| v.name != "liveness" && !v.ok())
    }
}

fn derive_key(label: &[u8], seed: u64, id: NodeId) -> SymKey {
    sha256_parts(&[label, &seed.to_le_bytes(), &id.to_wire()])
}

/// One engine execution: build the node graph, run, collect outputs.
/// `cap` limits message deliveries (used only while shrinking).
fn execute(
    cfg: &ScenarioConfig,
    plan: &FaultPlan,
    seed: u64,
    cap: Option<u64>,
) -> (Trace, Vec<String>, u64) {
    let client_keys: BTreeMap<NodeId, SymKey> = cfg
        .scripts(seed)
        .keys()
        .map(|&id| (id, derive_key(b"client-mac", seed, id)))
        .collect();
    let mut cluster = ClusterConfig::new(cfg.f, client_keys.clone());
    cluster.timeouts = cfg.timeouts.bft();

    let usig_keys: BTreeMap<NodeId, SymKey> = cluster
        .replicas()
        .map(|id| (id, derive_key(b"usig-key", seed, id)))
        .collect();

    let mut engine = Engine::new(seed, cfg.horizon, plan.clone(), cfg.latency.model());
    if let Some(cap) = cap {
        engine.set_deliver_cap(cap);
    }
    for key in usig_keys.values().chain(client_keys.values()) {
        engine.watch_secret(key.to_vec());
    }

    for id in cluster.replicas() {
        let (usig, verifier) = if cfg.crypto == "mac" {
            (Usig::new_mac(id, usig_keys[&id]), UsigVerifier::new_mac(usig_keys.clone()))
        } else {
            (Usig::new_structural(id), UsigVerifier::new_structural(cluster.replicas()))
        };
        let replica = Box::new(Replica::new(cluster.clone(), id, usig, verifier));
        match plan.byzantine.get(&id) {
            Some(&mode) => engine.add_node(id, Box::new(ByzantineShim::new(replica, mode))),
            None => engine.add_node(id, replica as Box<dyn Node>),
        }
    }
    for (id, script) in cfg.scripts(seed) {
        let client = StorageClient::with_script(cluster.clone(), id, client_keys[&id], script);
        engine.add_node(id, Box::new(client));
    }

    engine.run();
    engine.into_outputs()
}

fn judge(cfg: &ScenarioConfig, seed: u64, trace: Trace, hits: Vec<String>, delivered: u64) -> RunReport {
    let secrets: Vec<Vec<u8>> = {
        let mut s: Vec<Vec<u8>> = Vec::new();
        for c in 0..cfg.workload.clients {
            s.push(derive_key(b"client-mac", seed, NodeId::Client(c)).to_vec());
        }
        for r in 0..cfg.n() {
            s.push(derive_key(b"usig-key", seed, NodeId::Replica(r)).to_vec());
        }
        s
    };
    let verdicts = vec![
        checkers::equivocation(&trace),
        checkers::exec_consistency(&trace),
        checkers::linearizability(&trace),
        checkers::liveness(&trace, cfg.expect_liveness),
        checkers::confidentiality(&trace, &hits, &secrets),
    ];
    RunReport { name: cfg.name.clone(), seed, trace, verdicts, delivered, secret_hits: hits }
}

/// Runs one scenario at its configured seed.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport, ScenarioError> {
    run_seeded(cfg, cfg.seed)
}

/// Runs one scenario at an explicit seed (batch entry point).
pub fn run_seeded(cfg: &ScenarioConfig, seed: u64) -> Result<RunReport, ScenarioError> {
    let plan = cfg.compile_faults()?;
    let (trace, hits, delivered) = execute(cfg, &plan, seed, None);
    let mut report = judge(cfg, seed, trace, hits, delivered);
    if cfg.check_determinism {
        let (again, _, _) = execute(cfg, &plan, seed, None);
        let outcome = if again.digest() == report.trace.digest() {
            Outcome::Pass
        } else {
            Outcome::Fail("re-run produced a different trace".into())
        };
        report.verdicts.push(Verdict { name: "determinism", outcome, violation_at: None });
    }
    Ok(report)
}

/// Runs the scenario once per seed, sequentially.
pub fn run_batch_sequential(
    cfg: &ScenarioConfig,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<RunReport>, ScenarioError> {
    cfg.compile_faults()?;
    seeds.into_iter().map(|s| run_seeded(cfg, s)).collect()
}

/// Runs the scenario once per seed, fanning the (fully independent) runs
/// across threads. Falls back to the sequential path when the `parallel`
/// feature is off.
#[cfg(feature = "parallel")]
pub fn run_batch(
    cfg: &ScenarioConfig,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<RunReport>, ScenarioError> {
    use rayon::prelude::*;
    cfg.compile_faults()?;
    let seeds: Vec<u64> = seeds.into_iter().collect();
    seeds.par_iter().map(|&s| run_seeded(cfg, s)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(
    cfg: &ScenarioConfig,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<RunReport>, ScenarioError> {
    run_batch_sequential(cfg, seeds)
}

/// Shrinks a safety failure by capping message deliveries: binary-searches
/// the smallest delivery budget that still fails, so the returned trace is
/// (heuristically) the shortest reproduction. Returns `None` when the run
/// passes all safety checks.
pub fn minimize_failure(cfg: &ScenarioConfig) -> Result<Option<RunReport>, ScenarioError> {
    let plan = cfg.compile_faults()?;
    let attempt = |cap: Option<u64>| {
        let (trace, hits, delivered) = execute(cfg, &plan, cfg.seed, cap);
        judge(cfg, cfg.seed, trace, hits, delivered)
    };
    let full = attempt(None);
    if !full.failed_safety() {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0u64, full.delivered);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if attempt(Some(mid)).failed_safety() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let minimal = attempt(Some(hi));
    Ok(Some(if minimal.failed_safety() { minimal } else { full }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = ScenarioConfig::from_toml("name = \"smoke\"").unwrap();
        assert_eq!(cfg.f, 1);
        assert_eq!(cfg.horizon, 60_000);
        assert_eq!(cfg.workload.clients, 2);
        assert!(cfg.expect_liveness);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ScenarioConfig::from_toml("horizont = 5").is_err());
    }

    #[test]
    fn byzantine_bounds_enforced() {
        let text = r#"
            f = 1
            [[faults.byzantine]]
            node = "r1"
            mode = "silent"
            [[faults.byzantine]]
            node = "r2"
            mode = "silent"
        "#;
        let err = ScenarioConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("exceed the tolerance"));
    }

    #[test]
    fn structural_crypto_cannot_face_an_adversary() {
        let text = r#"
            crypto = "structural"
            [[faults.byzantine]]
            node = "r1"
            mode = "equivocate"
        "#;
        assert!(ScenarioConfig::from_toml(text).is_err());
    }

    #[test]
    fn liveness_claim_requires_quiet_network_after_gst() {
        let text = r#"
            gst = 1000
            [[faults.link]]
            src = "r0"
            dst = "r1"
            fault = "drop"
            until = 5000
        "#;
        assert!(ScenarioConfig::from_toml(text).is_err());
        let ok = format!("expect_liveness = false\n{}", text.trim_start_matches('\n'));
        assert!(ScenarioConfig::from_toml(&ok).is_ok());
    }

    #[test]
    fn scripts_are_seed_deterministic_and_nonempty() {
        let cfg = ScenarioConfig::default();
        let a = cfg.scripts(7);
        let b = cfg.scripts(7);
        let c = cfg.scripts(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 2);
        for ops in a.values() {
            assert_eq!(ops.len(), 30);
            assert!(ops.iter().all(|op| !op.key().is_empty()));
        }
    }
}
