use rankserve::costmodel::{fetch_latency, prefill_seconds, CostParams, FetchSource};
use rankserve::domain::{Adapter, AdapterId, OperatingPointTable, Request};
use rankserve::placement::PlacementPolicy;
use rankserve::routing::RouterKind;
use rankserve::sim::{run, RequestStatus, SimConfig, SimError};
use rankserve::traces::{generate_trace, AdapterCounts, Popularity, TraceConfig};

const MIB: u64 = 1024 * 1024;

fn ops() -> OperatingPointTable {
    OperatingPointTable::new([(8, 3000.0), (16, 2800.0), (32, 2500.0), (64, 2000.0), (128, 1300.0)].into()).unwrap()
}

fn req(id: &str, adapter: &str, prompt: u32, output: u32, t: f64) -> Request {
    Request {
        request_id: id.into(),
        adapter: AdapterId::new(adapter),
        prompt_length: prompt,
        output_length: output,
        arrival_time: t,
    }
}

fn two_adapters() -> Vec<Adapter> {
    vec![Adapter::new("a", 64, 128 * MIB).unwrap(), Adapter::new("b", 8, 16 * MIB).unwrap()]
}

fn cfg(servers: usize) -> SimConfig {
    SimConfig {
        servers,
        ..SimConfig::default()
    }
}

#[test]
fn lone_request_pays_host_load_then_prefill() {
    let p = CostParams::default();
    let trace = [req("q", "a", 1000, 4, 0.0)];
    let r = run(&trace, &two_adapters(), &ops(), PlacementPolicy::RankAware, RouterKind::Table, &cfg(2), 1).unwrap();
    let expected = fetch_latency(128 * MIB, FetchSource::Host, &p).unwrap() + prefill_seconds(1000, 64, &p);
    assert!((r.per_request[0].ttft.unwrap() - expected).abs() < 1e-9);
    // (b + a*L)(1 + c*r/tp), written out
    let by_hand = (p.b + p.a * 1000.0) * (1.0 + p.c * 64.0 / f64::from(p.tp));
    assert!((prefill_seconds(1000, 64, &p) - by_hand).abs() < 1e-12);
    assert_eq!(r.per_request[0].status, RequestStatus::Completed);
}

#[test]
fn routing_off_holder_adds_remote_transfer() {
    let p = CostParams::default();
    let trace = [req("q", "a", 1000, 4, 0.0)];
    let r = run(&trace, &two_adapters(), &ops(), PlacementPolicy::RankAware, RouterKind::Toppings, &cfg(2), 1).unwrap();
    let local = run(&trace, &two_adapters(), &ops(), PlacementPolicy::RankAware, RouterKind::Table, &cfg(2), 1).unwrap();
    let remote = fetch_latency(128 * MIB, FetchSource::RemoteRdma, &p).unwrap() + prefill_seconds(1000, 64, &p);
    assert!((r.per_request[0].ttft.unwrap() - remote).abs() < 1e-9);
    assert!(r.per_request[0].ttft > local.per_request[0].ttft);
    assert_eq!(r.fetch_bytes(), 128 * MIB);
}

#[test]
fn empty_trace_is_a_no_op() {
    let r = run(&[], &two_adapters(), &ops(), PlacementPolicy::RankAware, RouterKind::Table, &cfg(3), 1).unwrap();
    assert_eq!(r.events, 0);
    assert!(r.per_request.is_empty());
    assert!(r.conserves(0));
}

#[test]
fn unknown_adapter_is_rejected() {
    let trace = [req("q", "nope", 10, 1, 0.0)];
    let err = run(&trace, &two_adapters(), &ops(), PlacementPolicy::Random, RouterKind::Table, &cfg(2), 1).unwrap_err();
    assert!(matches!(err, SimError::UnknownAdapter { .. }));
}

#[test]
fn high_rank_neighbour_slows_low_rank_prefill() {
    let adapters = vec![Adapter::new("lo", 8, 16 * MIB).unwrap(), Adapter::new("hi", 128, 256 * MIB).unwrap()];
    let alone = [req("x", "lo", 2000, 4, 0.0)];
    let mixed = [req("y", "hi", 16, 400, 0.0), req("x", "lo", 2000, 4, 0.5)];
    let a = run(&alone, &adapters, &ops(), PlacementPolicy::Replicate, RouterKind::Table, &cfg(1), 1).unwrap();
    let m = run(&mixed, &adapters, &ops(), PlacementPolicy::Replicate, RouterKind::Table, &cfg(1), 1).unwrap();
    let lo_alone = a.per_request[0].ttft.unwrap();
    let lo_mixed = m.per_request.iter().find(|o| o.request_id == "x").unwrap().ttft.unwrap();
    assert!(lo_mixed > 1.5 * lo_alone, "{lo_mixed} vs {lo_alone}");
}

fn skewed(seed: u64) -> (Vec<Adapter>, Vec<Request>) {
    let g = generate_trace(&TraceConfig {
        duration: 900.0,
        rps: 4.0,
        popularity: Popularity::ShiftingSkew,
        adapters: AdapterCounts::PerRank { count: 5 },
        seed,
        ..TraceConfig::default()
    })
    .unwrap();
    (g.adapters, g.requests)
}

#[test]
fn static_policies_never_migrate_and_rank_aware_follows_the_skew() {
    let (adapters, trace) = skewed(4);
    for p in [PlacementPolicy::Random, PlacementPolicy::Contiguous, PlacementPolicy::Replicate] {
        let r = run(&trace, &adapters, &ops(), p, RouterKind::Table, &cfg(4), 4).unwrap();
        assert_eq!(r.migrations(), 0, "{}", p.name());
        assert!(r.conserves(trace.len()));
    }
    let r = run(&trace, &adapters, &ops(), PlacementPolicy::RankAware, RouterKind::Table, &cfg(4), 4).unwrap();
    assert!(r.migrations() > 0);
    assert!(r.conserves(trace.len()));
}

#[test]
fn audit_mode_runs_clean_and_matches_unaudited_output() {
    let (adapters, trace) = skewed(7);
    let plain = run(&trace, &adapters, &ops(), PlacementPolicy::RankAware, RouterKind::Table, &cfg(4), 7).unwrap();
    let audit = SimConfig {
        audit: true,
        ..cfg(4)
    };
    let audited = run(&trace, &adapters, &ops(), PlacementPolicy::RankAware, RouterKind::Table, &audit, 7).unwrap();
    assert_eq!(plain.per_request, audited.per_request);
}

#[test]
fn timeouts_drop_requests_under_overload() {
    let adapters = vec![Adapter::new("hi", 128, 256 * MIB).unwrap()];
    let trace: Vec<Request> = (0..4000).map(|i| req(&format!("q{i}"), "hi", 2000, 8, i as f64 * 0.01)).collect();
    let c = SimConfig {
        timeout: 5.0,
        ..cfg(1)
    };
    let r = run(&trace, &adapters, &ops(), PlacementPolicy::Replicate, RouterKind::Table, &c, 1).unwrap();
    assert!(r.timed_out > 0);
    assert!(r.conserves(trace.len()));
    assert!(r.per_request.iter().filter_map(|o| o.ttft).all(|t| t <= 5.0 + 1e-9));
}
