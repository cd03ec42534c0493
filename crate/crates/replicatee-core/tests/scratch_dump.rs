use replicatee_core::sim::scenario::*;

fn hard_plan(idx: usize, seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.name = format!("hard{idx}-{seed}");
    cfg.seed = seed;
    cfg.workload.ops = 15;
    match idx {
        0 => {
            cfg.gst = 2_500;
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 2_500,
                per_mille: 450,
                ..Default::default()
            });
            cfg.faults.link.push(LinkSpec {
                fault: "delay".into(),
                extra_max: 60,
                until: 2_500,
                per_mille: 600,
                ..Default::default()
            });
            cfg.faults.link.push(LinkSpec {
                fault: "duplicate".into(),
                until: 2_500,
                per_mille: 300,
                ..Default::default()
            });
        }
        1 => {
            cfg.gst = 1_500;
            cfg.faults.byzantine.push(ByzSpec { node: "r0".into(), mode: "equivocate".into() });
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 1_500,
                per_mille: 300,
                ..Default::default()
            });
        }
        2 => {
            cfg.gst = 2_000;
            cfg.faults.byzantine.push(ByzSpec { node: "r1".into(), mode: "silent".into() });
            cfg.faults.link.push(LinkSpec {
                fault: "delay".into(),
                extra_max: 40,
                until: 2_000,
                per_mille: 500,
                ..Default::default()
            });
        }
        3 => {
            cfg.gst = 1_500;
            cfg.faults.crash.push(CrashSpec { node: "r0".into(), at: 150, restart_at: Some(900) });
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 1_500,
                per_mille: 300,
                ..Default::default()
            });
        }
        4 => {
            cfg.f = 2;
            cfg.gst = 1_500;
            cfg.faults.byzantine.push(ByzSpec { node: "r0".into(), mode: "equivocate".into() });
            cfg.faults.byzantine.push(ByzSpec { node: "r3".into(), mode: "corrupt-replies".into() });
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 1_500,
                per_mille: 250,
                ..Default::default()
            });
        }
        5 => {
            cfg.gst = 1_500;
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 1_500,
                per_mille: 300,
                ..Default::default()
            });
        }
        6 => {
            cfg.f = 2;
            cfg.gst = 1_800;
            cfg.faults.crash.push(CrashSpec { node: "r1".into(), at: 200, restart_at: Some(1_000) });
            cfg.faults.link.push(LinkSpec {
                fault: "drop".into(),
                until: 1_800,
                per_mille: 350,
                ..Default::default()
            });
            cfg.faults.link.push(LinkSpec {
                fault: "duplicate".into(),
                until: 1_800,
                per_mille: 250,
                ..Default::default()
            });
        }
        _ => unreachable!(),
    }
    cfg
}

#[test]
fn sweep() {
    let mut failures = Vec::new();
    for idx in 0..7 {
        for seed in 0..200 {
            let cfg = hard_plan(idx, seed);
            let report = run_scenario(&cfg).unwrap();
            for v in &report.verdicts {
                if !v.ok() {
                    failures.push(format!("{}: {v}", cfg.name));
                }
            }
        }
    }
    for f in &failures {
        println!("{f}");
    }
    assert!(failures.is_empty(), "{} failures", failures.len());
}
