mod common;

use common::*;
use mbz::io::trace::write_trace;
use mbz::replay::{load_endpoint_scripts, replay};
use mbz::report::{parse_report, to_json, AnyReport};
use mbz::tracegen::SnitchScenario;
use std::fs;

#[test]
fn committed_fixtures_match_generator() {
    let g = SnitchScenario::default().generate();
    let mut trace = Vec::new();
    write_trace(&mut trace, &g.trace).unwrap();
    let dir = fixture_dir();
    assert!(fs::read(dir.join("trace.jsonl")).unwrap() == trace, "trace.jsonl is stale; run the gen_fixtures example");
    assert_eq!(fs::read_to_string(dir.join("orgs.csv")).unwrap(), g.org_map_csv);
    assert_eq!(fs::read_to_string(dir.join("endpoints.toml")).unwrap(), g.endpoints_toml);
}

/// Set MBZ_BLESS=1 to rewrite the golden file after an intended change.
#[test]
fn golden_report() {
    let out = replay_fixture("run.toml");
    let json = to_json(&out.report);
    let path = fixture_dir().join("golden_report.json");
    if std::env::var_os("MBZ_BLESS").is_some() {
        fs::write(&path, &json).unwrap();
    }
    let golden = fs::read_to_string(&path).expect("golden_report.json missing; run with MBZ_BLESS=1");
    assert!(golden == json, "report differs from golden_report.json; rerun with MBZ_BLESS=1 if intended");
    assert!(matches!(parse_report(&golden).unwrap(), AnyReport::Run(_)));
}

#[test]
fn golden_report_numbers() {
    let r = replay_fixture("run.toml").report;
    let e = &r.engine;
    assert_eq!((e.tcp.created, e.tcp.closed), (371, 371));
    assert_eq!(e.udp.created, e.udp.evicted_idle);
    assert!(r.violations.is_empty() && r.governor.is_empty());
    let nx: Vec<_> = r
        .whatif
        .iter()
        .filter(|p| p.divergence == mbz::plugins::whatif::Divergence::NxdomainRewrite)
        .map(|p| p.name.as_str())
        .collect();
    assert_eq!(nx, ["beacon.gone.test"]);
    let wrap: Vec<String> = r
        .advisor
        .iter()
        .filter(|a| a.recommendation == mbz::plugins::advisor::Recommendation::WrapLossTolerant)
        .map(|a| a.dst.to_string())
        .collect();
    assert_eq!(wrap, ["198.18.0.12:443"]);
}

#[test]
fn empty_trace_gives_zero_counters() {
    let cfg = fixture_config("run.toml");
    let out = replay(&cfg, &[], load_endpoint_scripts(&cfg).unwrap(), cfg.seed).unwrap();
    assert_eq!(out.report.engine, Default::default());
    assert_eq!(out.report.trace.events, 0);
    assert_eq!(out.report.snitch.unwrap().third_party_flows, 0);
    assert!(out.emitted.is_empty());
}

#[test]
fn seed_override_is_reported() {
    let cfg = fixture_config("run.toml");
    let out = mbz::replay::replay_config(&cfg, Some(99)).unwrap();
    assert_eq!(out.report.seed, 99);
    // jitter changes, the trace's flow counts do not
    assert_eq!(out.report.snitch.unwrap().third_party_flows, 372);
}
