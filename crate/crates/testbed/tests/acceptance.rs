//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every expected value below is computed by an oracle in
//! this file or fixed by the testbed's scenario constants.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use qkdchain::harness::{run_demo, AgentMode, Testbed, TestbedOptions};
use qkdchain::northbound::{NorthboundResponseDoc, SubmitError};
use qkdchain::scenario::{default_scenario, default_scenario_path};
use qkdchain_core::chain::Allocation;
use qkdchain_core::codec::{
    decode, ChainConfigRequest, ChainConfigResponse, ConfigStatus, ErrorMsg, Message, NodeInfoReport, PortInfo,
};
use qkdchain_core::keyrelay::{KeyOrigin, KeyPlane, SecretKey};
use qkdchain_core::model::{LinkId, NodeId, NodeKind, PhysicalTopology, ProtocolKind, QkdLink, ResourceMap};
use qkdchain_core::resource::{allocate_resources, AllocationError, ResourceView};
use qkdchain_core::routing::{compute_path, compute_path_with, locate_relays};
use qkdchain_core::{
    abstract_topology, validate_topology, ChainRecord, ChainRequest, ChainStatus, ProtocolRequirement,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn below(rng: &mut ChaCha20Rng, n: u64) -> u64 {
    rng.next_u64() % n
}

// ---------------------------------------------------------------------------
// 1. Chain metrics table, full demo with one process per agent.

const CONVENTIONAL_ROW: (f64, f64, f64) = (234.0, 28.1, 0.5);
const HETEROGENEOUS_ROW: (f64, f64, f64) = (231.0, 14.2, 1.0);
const TABLE_RUNTIME_LIMIT: Duration = Duration::from_secs(30);

async fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut opts = TestbedOptions::in_process(default_scenario());
    opts.agent_mode = AgentMode::Subprocess {
        program: env!("CARGO_BIN_EXE_qkdchain").into(),
        scenario_path: default_scenario_path(),
        verbose: false,
    };
    let tb = Testbed::boot(opts).await.map_err(|e| format!("boot: {e}"))?;
    let report = run_demo(&tb).await;
    tb.shutdown().await;
    let report = report.map_err(|e| format!("demo: {e}"))?;
    let elapsed = started.elapsed();

    let violations = report.violations();
    check(violations.is_empty(), || format!("invariants: {violations:?}"))?;
    for (run, (len, skc, sec)) in
        [(&report.conventional, CONVENTIONAL_ROW), (&report.heterogeneous, HETEROGENEOUS_ROW)]
    {
        let m = &run.metrics;
        check(m.total_length_km == len && m.skc_kbps == skc && m.security.value == sec, || {
            format!(
                "{}: got {} km / {} kbps / {}, expected {len} km / {skc} kbps / {sec}",
                run.label, m.total_length_km, m.skc_kbps, m.security.value
            )
        })?;
    }
    check(report.conventional.record.physical_path == [2, 6, 5, 1].map(NodeId), || "conventional path".into())?;
    check(report.heterogeneous.record.physical_path == [2, 6, 8, 3].map(NodeId), || "heterogeneous path".into())?;
    check(elapsed < TABLE_RUNTIME_LIMIT, || format!("runtime {elapsed:?}"))?;
    Ok(format!(
        "234 km/28.1 kbps/0.5 and 231 km/14.2 kbps/1.0 exact, delays {:.1} / {:.1} ms, {:.1} s",
        report.conventional.delay_ms,
        report.heterogeneous.delay_ms,
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// 2. Delay ordering over repeated demos.

const DELAY_RUNS: usize = 100;
const DELAY_MIN_FASTER: usize = 95;
const DELAY_RANGE_MS: (f64, f64) = (1.0, 1000.0);

async fn criterion_2() -> Outcome {
    let tb = Testbed::boot(TestbedOptions::in_process(default_scenario())).await.map_err(|e| format!("boot: {e}"))?;
    let mut faster = 0;
    let mut out_of_range = Vec::new();
    let mut conv = Vec::new();
    let mut het = Vec::new();
    let mut failure = None;
    for i in 0..DELAY_RUNS {
        match run_demo(&tb).await {
            Ok(r) => {
                let (c, h) = (r.conventional.delay_ms, r.heterogeneous.delay_ms);
                if h < c {
                    faster += 1;
                }
                for d in [c, h] {
                    if !(DELAY_RANGE_MS.0..DELAY_RANGE_MS.1).contains(&d) {
                        out_of_range.push((i, d));
                    }
                }
                conv.push(c);
                het.push(h);
            }
            Err(e) => {
                failure = Some(format!("run {i}: {e}"));
                break;
            }
        }
    }
    tb.shutdown().await;
    if let Some(f) = failure {
        return Err(f);
    }
    check(faster >= DELAY_MIN_FASTER, || format!("heterogeneous faster in only {faster}/{DELAY_RUNS}"))?;
    check(out_of_range.is_empty(), || format!("delays outside [1, 1000) ms: {out_of_range:?}"))?;
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(format!(
        "heterogeneous faster in {faster}/{DELAY_RUNS}; median {:.1} ms vs {:.1} ms",
        median(&mut het),
        median(&mut conv)
    ))
}

// ---------------------------------------------------------------------------
// 3. Codec.

const CODEC_CASES: u32 = 10_000;
const BLOBS: usize = 10_000;
const BLOB_MAX: usize = 64 * 1024;

fn message_strategy() -> impl Strategy<Value = Message> {
    let node = any::<u32>().prop_map(NodeId);
    let kind = prop_oneof![Just(NodeKind::QkdNode), Just(NodeKind::TrustedRelay), Just(NodeKind::UntrustedRelay)];
    let proto = prop_oneof![Just(ProtocolKind::Bb84), Just(ProtocolKind::Tf)];
    let status = prop_oneof![
        Just(ConfigStatus::Success),
        Just(ConfigStatus::InsufficientResources),
        Just(ConfigStatus::UnknownPort),
        Just(ConfigStatus::NodeBusy),
        Just(ConfigStatus::Internal),
    ];
    let port = (any::<u32>(), node.clone(), any::<u32>(), proto, any::<u32>()).prop_map(
        |(port_no, peer, length_dm, protocol, key_rate_bps)| PortInfo { port_no, peer, length_dm, protocol, key_rate_bps },
    );
    prop_oneof![
        any::<u32>().prop_map(|xid| Message::Hello { xid }),
        (any::<u32>(), any::<u16>(), any::<u16>(), proptest::collection::vec(any::<u8>(), 0..200))
            .prop_map(|(xid, err_type, code, data)| Message::Error(ErrorMsg { xid, err_type, code, data })),
        (any::<u32>(), any::<u32>(), node.clone(), any::<u32>(), any::<u128>(), any::<u32>()).prop_map(
            |(xid, chain_id, node_id, input_port, bits, output_port)| {
                Message::ChainConfigRequest(ChainConfigRequest {
                    xid,
                    chain_id,
                    node_id,
                    input_port,
                    resource_units: ResourceMap::from_bits(bits),
                    output_port,
                })
            }
        ),
        (any::<u32>(), any::<u32>(), node.clone(), status).prop_map(|(xid, chain_id, node_id, status)| {
            Message::ChainConfigResponse(ChainConfigResponse { xid, chain_id, node_id, status })
        }),
        (any::<u32>(), node, kind, proptest::collection::vec(port, 0..40))
            .prop_map(|(xid, node_id, kind, ports)| Message::NodeInfoReport(NodeInfoReport { xid, node_id, kind, ports })),
    ]
}

/// Request layout built byte by byte.
fn request_bytes(xid: u32, chain: u32, node: u32, input: u32, bits: u128, output: u32) -> Vec<u8> {
    let mut v = vec![0x04, 32, 0, 44];
    v.extend_from_slice(&xid.to_be_bytes());
    v.extend_from_slice(&chain.to_be_bytes());
    v.extend_from_slice(&node.to_be_bytes());
    v.extend_from_slice(&[0, 0, 0xff, 0xff]);
    v.extend_from_slice(&input.to_be_bytes());
    v.extend_from_slice(&bits.to_be_bytes());
    v.extend_from_slice(&output.to_be_bytes());
    v
}

fn criterion_3() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: CODEC_CASES, failure_persistence: None, ..Config::default() });
    let count = Cell::new(0u32);
    let sizes = RefCell::new(BTreeMap::new());
    let result = runner.run(&message_strategy(), |m| {
        count.set(count.get() + 1);
        let bytes = m.encode().map_err(|e| TestCaseError::fail(e.to_string()))?;
        match &m {
            Message::ChainConfigRequest(_) | Message::ChainConfigResponse(_) => {
                sizes.borrow_mut().insert(m.msg_type(), bytes.len());
            }
            _ => {}
        }
        prop_assert_eq!(decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?, m);
        Ok(())
    });
    result.map_err(|e| format!("round trip: {e}"))?;
    let (count, sizes) = (count.get(), sizes.into_inner());
    check(count >= CODEC_CASES, || format!("only {count} round trips"))?;
    check(sizes.get(&32) == Some(&44) && sizes.get(&33) == Some(&24), || format!("sizes {sizes:?}"))?;

    let req = ChainConfigRequest {
        xid: 7,
        chain_id: 1,
        node_id: NodeId(6),
        input_port: 1,
        resource_units: ResourceMap::single(0),
        output_port: 3,
    };
    let bytes = Message::ChainConfigRequest(req).encode().map_err(|e| e.to_string())?;
    check(bytes == request_bytes(7, 1, 6, 1, 1u128 << 127, 3), || format!("request layout {bytes:02x?}"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(0xC0DEC);
    let mut decoded = 0;
    for i in 0..BLOBS {
        let len = below(&mut rng, BLOB_MAX as u64 + 1) as usize;
        let mut blob = vec![0u8; len];
        rng.fill_bytes(&mut blob);
        // Half the blobs get a plausible header so decoding goes past it.
        if i % 2 == 0 && len >= 8 {
            blob[0] = 0x04;
            blob[1] = [0u8, 1, 32, 33, 34][below(&mut rng, 5) as usize];
            if len <= u16::MAX as usize && below(&mut rng, 2) == 0 {
                blob[2..4].copy_from_slice(&(len as u16).to_be_bytes());
            }
        }
        match std::panic::catch_unwind(|| decode(&blob)) {
            Ok(r) => decoded += usize::from(r.is_ok()),
            Err(_) => return Err(format!("decoder panicked on blob {i} ({len} bytes)")),
        }
    }
    Ok(format!("{count} round trips, sizes 44/24, {BLOBS} blobs without panic ({decoded} decoded)"))
}

// ---------------------------------------------------------------------------
// 4. Routing against breadth-first search.

const ROUTING_TOPOLOGIES: usize = 200;

fn random_topology(rng: &mut ChaCha20Rng) -> PhysicalTopology {
    let plain = 2 + below(rng, 5) as u32; // 2..=6
    let relays = below(rng, u64::from((8 - plain).min(2)) + 1) as u32;
    let mut t = PhysicalTopology::new();
    for i in 1..=plain {
        let kind = if i <= 2 || below(rng, 2) == 0 { NodeKind::QkdNode } else { NodeKind::TrustedRelay };
        t.add_node(NodeId(i), kind).unwrap();
    }
    let mut next_link = 1;
    let mut linked = BTreeSet::new();
    let mut add = |t: &mut PhysicalTopology, a: u32, b: u32, proto, rng: &mut ChaCha20Rng| {
        let len = 10.0 + below(rng, 100) as f64;
        let rate = 1.0 + below(rng, 40) as f64;
        t.add_link(QkdLink::new(LinkId(next_link), NodeId(a), NodeId(b), len, proto, rate)).unwrap();
        next_link += 1;
    };
    for i in 2..=plain {
        let j = 1 + below(rng, u64::from(i - 1)) as u32;
        linked.insert((j, i));
        add(&mut t, j, i, ProtocolKind::Bb84, rng);
    }
    for r in 0..relays {
        let ur = 100 + r;
        t.add_node(NodeId(ur), NodeKind::UntrustedRelay).unwrap();
        let a = 1 + below(rng, u64::from(plain)) as u32;
        let mut b = 1 + below(rng, u64::from(plain - 1)) as u32;
        if b >= a {
            b += 1;
        }
        add(&mut t, a, ur, ProtocolKind::Tf, rng);
        add(&mut t, ur, b, ProtocolKind::Tf, rng);
    }
    for a in 1..=plain {
        for b in a + 1..=plain {
            if !linked.contains(&(a, b)) && below(rng, 10) < 3 {
                add(&mut t, a, b, ProtocolKind::Bb84, rng);
            }
        }
    }
    t
}

/// Fewest abstract hops from `s` to `d`; a TF pair counts as one hop and only
/// trusted relays are passed through.
fn bfs_hops(t: &PhysicalTopology, s: NodeId, d: NodeId) -> Option<usize> {
    let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    for l in t.links() {
        let (a, b) = l.endpoints;
        let is_ur = |n| t.kind(n) == Some(NodeKind::UntrustedRelay);
        if !is_ur(a) && !is_ur(b) {
            adj.entry(a).or_default().insert(b);
            adj.entry(b).or_default().insert(a);
        }
    }
    for (n, k) in t.nodes() {
        if k == NodeKind::UntrustedRelay {
            let ends: Vec<NodeId> = t.links().filter_map(|l| l.peer_of(n)).collect();
            if let [a, b] = ends[..] {
                adj.entry(a).or_default().insert(b);
                adj.entry(b).or_default().insert(a);
            }
        }
    }
    let mut dist = BTreeMap::from([(s, 0usize)]);
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        if u == d {
            return Some(dist[&u]);
        }
        if u != s && t.kind(u) != Some(NodeKind::TrustedRelay) {
            continue;
        }
        for &v in adj.get(&u).into_iter().flatten() {
            if !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                queue.push_back(v);
            }
        }
    }
    None
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0x2047E);
    let mut pairs = 0;
    let mut reachable = 0;
    for i in 0..ROUTING_TOPOLOGIES {
        let t = random_topology(&mut rng);
        let v = validate_topology(&t);
        check(v.is_empty(), || format!("topology {i} invalid: {v:?}"))?;
        check(t.node_count() <= 8, || format!("topology {i} has {} nodes", t.node_count()))?;
        let abs = abstract_topology(&t).map_err(|e| format!("{e:?}"))?;
        let again = abstract_topology(&t.clone()).map_err(|e| format!("{e:?}"))?;
        let qkd: Vec<NodeId> = t.nodes().filter(|(_, k)| *k == NodeKind::QkdNode).map(|(n, _)| n).collect();
        for &s in &qkd {
            for &d in &qkd {
                if s == d {
                    continue;
                }
                pairs += 1;
                let got = compute_path(s, d, &abs).ok();
                let want = bfs_hops(&t, s, d);
                check(got.as_ref().map(Vec::len) == want, || {
                    format!("topology {i} {s}->{d}: {:?} hops, oracle {want:?}", got.as_ref().map(Vec::len))
                })?;
                if let Some(path) = got {
                    reachable += 1;
                    for w in path.windows(2) {
                        check(w[0].to == w[1].from, || format!("topology {i}: disconnected path"))?;
                    }
                    for hop in &path[..path.len() - 1] {
                        check(t.kind(hop.to) == Some(NodeKind::TrustedRelay), || {
                            format!("topology {i}: transits {}", hop.to)
                        })?;
                    }
                    let layout = locate_relays(&path, &abs);
                    for (k, l) in layout.links.iter().enumerate() {
                        let link = t.link(*l).ok_or("unknown link")?;
                        check(link.connects(layout.physical_path[k], layout.physical_path[k + 1]), || {
                            format!("topology {i}: expansion uses a missing link")
                        })?;
                    }
                    for _ in 0..3 {
                        check(compute_path(s, d, &again).ok().as_ref() == Some(&path), || {
                            format!("topology {i} {s}->{d}: tie-break not deterministic")
                        })?;
                    }
                }
            }
        }
    }
    Ok(format!("{ROUTING_TOPOLOGIES} topologies, {pairs} pairs ({reachable} routable) match BFS, repeat runs identical"))
}

// ---------------------------------------------------------------------------
// 5. First-fit allocation and rollback.

const FIRST_FIT_TRIALS: usize = 5_000;

/// Bit for `slot`: slot 0 is the most significant bit.
fn slot_bit(slot: usize) -> u128 {
    1u128 << (127 - slot)
}

fn lowest_clear(bits: u128) -> Option<usize> {
    (0..128).find(|&s| bits & slot_bit(s) == 0)
}

fn random_bitmap(rng: &mut ChaCha20Rng) -> u128 {
    match below(rng, 6) {
        0 => 0,
        1 => u128::MAX,
        2 => u128::MAX ^ slot_bit(below(rng, 128) as usize),
        3 => {
            // A busy prefix.
            let n = below(rng, 129) as u32;
            if n == 0 {
                0
            } else {
                u128::MAX << (128 - n)
            }
        }
        _ => (u128::from(rng.next_u64()) << 64) | u128::from(rng.next_u64()),
    }
}

fn first_fit_oracle(
    links: &[LinkId],
    rate: f64,
    topo: &PhysicalTopology,
    bits: &BTreeMap<LinkId, u128>,
) -> Result<Vec<Allocation>, AllocationError> {
    let mut out = Vec::new();
    for &l in links {
        let link = topo.link(l).unwrap();
        if link.key_rate_kbps < rate {
            return Err(AllocationError::InsufficientRate {
                link: l,
                available_kbps: link.key_rate_kbps,
                required_kbps: rate,
            });
        }
        let slot = lowest_clear(bits[&l]).ok_or(AllocationError::NoFreeSlot(l))?;
        out.push(Allocation { link: l, slot });
    }
    Ok(out)
}

async fn criterion_5() -> Outcome {
    let topo = default_scenario().topology().map_err(|e| e.to_string())?;
    let all: Vec<LinkId> = topo.links().map(|l| l.id).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(0xF1257);
    let (mut ok, mut failed) = (0, 0);
    for trial in 0..FIRST_FIT_TRIALS {
        let mut view = ResourceView::from_topology(&topo);
        let mut bits = BTreeMap::new();
        for &l in &all {
            let b = random_bitmap(&mut rng);
            view.set(l, ResourceMap::from_bits(b));
            bits.insert(l, b);
        }
        let mut links = all.clone();
        for k in (1..links.len()).rev() {
            links.swap(k, below(&mut rng, k as u64 + 1) as usize);
        }
        links.truncate(1 + below(&mut rng, all.len() as u64) as usize);
        let rate = below(&mut rng, 300) as f64 / 10.0;

        let before = view.clone();
        let got = allocate_resources(&links, rate, &topo, &mut view);
        let want = first_fit_oracle(&links, rate, &topo, &bits);
        check(got == want, || format!("trial {trial}: got {got:?}, oracle {want:?}"))?;
        match got {
            Ok(allocs) => {
                ok += 1;
                for a in allocs {
                    let expect = bits[&a.link] | slot_bit(a.slot);
                    check(view.get(a.link).map(ResourceMap::bits) == Some(expect), || {
                        format!("trial {trial}: link {} not committed", a.link)
                    })?;
                }
            }
            Err(_) => {
                failed += 1;
                check(view.iter().eq(before.iter()), || format!("trial {trial}: failed allocation changed the view"))?;
            }
        }
    }

    // Injected failures on the live controller: a busy node and a timeout.
    let tb = Testbed::boot(TestbedOptions::in_process(default_scenario())).await.map_err(|e| format!("boot: {e}"))?;
    let req = |s: u32, d: u32, p| ChainRequest {
        request_id: 0,
        source: NodeId(s),
        destination: NodeId(d),
        required_rate_kbps: 10.0,
        protocol: p,
    };
    let live = async {
        let conv = tb.controller.orchestrate(req(2, 1, ProtocolRequirement::Conventional)).await.map_err(|e| e.to_string())?;
        let before = tb.controller.snapshot().await.map_err(|e| e.to_string())?.resources;
        let err = tb.controller.orchestrate(req(2, 3, ProtocolRequirement::Heterogeneous)).await;
        check(matches!(err, Err(ref e) if e.code() == "node-config-failed"), || format!("expected busy node, got {err:?}"))?;
        let after = tb.controller.snapshot().await.map_err(|e| e.to_string())?.resources;
        check(before.iter().eq(after.iter()), || "rollback left the resource view changed".into())?;
        tb.controller.release(conv.record.chain_id).await.map_err(|e| e.to_string())?;
        Ok::<_, String>(())
    }
    .await;
    tb.shutdown().await;
    live?;

    let mut opts = TestbedOptions::in_process(default_scenario());
    opts.agent_latency = Duration::from_millis(120);
    opts.response_timeout = Duration::from_millis(30);
    let tb = Testbed::boot(opts).await.map_err(|e| format!("boot: {e}"))?;
    let live = async {
        let before = tb.controller.snapshot().await.map_err(|e| e.to_string())?.resources;
        let err = tb.controller.orchestrate(req(2, 3, ProtocolRequirement::Heterogeneous)).await;
        check(matches!(err, Err(ref e) if e.code() == "timeout"), || format!("expected timeout, got {err:?}"))?;
        let after = tb.controller.snapshot().await.map_err(|e| e.to_string())?.resources;
        check(before.iter().eq(after.iter()), || "timeout rollback left the resource view changed".into())
    }
    .await;
    tb.shutdown().await;
    live?;

    Ok(format!(
        "{FIRST_FIT_TRIALS} random bitmaps match the lowest-free oracle ({ok} allocated, {failed} refused unchanged); \
         busy-node and timeout rollbacks restore the view"
    ))
}

// ---------------------------------------------------------------------------
// 6. Key relay.

const KEY_DRAWS: usize = 1_000;

fn established(topo: &PhysicalTopology, s: u32, d: u32, protocol: ProtocolRequirement) -> Result<ChainRecord, String> {
    let abs = abstract_topology(topo).map_err(|e| format!("{e:?}"))?;
    let tf = protocol.permits_untrusted_relays();
    let route = compute_path_with(NodeId(s), NodeId(d), &abs, |e| tf || e.protocol == ProtocolKind::Bb84)
        .map_err(|e| e.to_string())?;
    let layout = locate_relays(&route, &abs);
    let mut view = ResourceView::from_topology(topo);
    let allocations = allocate_resources(&layout.links, 10.0, topo, &mut view).map_err(|e| e.to_string())?;
    Ok(ChainRecord {
        chain_id: 1,
        request_id: 1,
        protocol,
        physical_path: layout.physical_path,
        trusted_relays: layout.trusted,
        untrusted_relays: layout.untrusted,
        allocations,
        status: ChainStatus::Established,
    })
}

fn random_key(rng: &mut ChaCha20Rng, len: usize, origin: KeyOrigin) -> SecretKey {
    let mut b = vec![0u8; len];
    rng.fill_bytes(&mut b);
    SecretKey::new(b, origin)
}

fn criterion_6() -> Outcome {
    let topo = default_scenario().topology().map_err(|e| e.to_string())?;
    let conv = established(&topo, 2, 1, ProtocolRequirement::Conventional)?;
    let het = established(&topo, 2, 3, ProtocolRequirement::Heterogeneous)?;
    check(conv.physical_path == [2, 6, 5, 1].map(NodeId), || format!("conventional path {:?}", conv.physical_path))?;
    check(het.physical_path == [2, 6, 8, 3].map(NodeId), || format!("heterogeneous path {:?}", het.physical_path))?;

    let mut rng = ChaCha20Rng::seed_from_u64(0x6E7);
    for (chain, expected_custody) in [(&conv, vec![1, 2, 5, 6]), (&het, vec![2, 3, 6])] {
        for draw in 0..KEY_DRAWS {
            let len = 1 + below(&mut rng, 64) as usize;
            let mut plane = KeyPlane::with_key_len(&topo, len);
            plane.configure_chain(chain);
            let mut hop_keys = Vec::new();
            for (i, a) in chain.allocations.iter().enumerate() {
                if topo.kind(chain.physical_path[i]) == Some(NodeKind::UntrustedRelay) {
                    continue;
                }
                let k = random_key(&mut rng, len, KeyOrigin::Link(a.link));
                plane.install_link_key(a.link, k.clone(), k.clone()).map_err(|e| format!("{e:?}"))?;
                hop_keys.push(k);
            }
            let global = random_key(&mut rng, len, KeyOrigin::Global);
            let out = plane.relay_global_key(chain, &global).map_err(|e| format!("{e:?}"))?;
            check(out.delivered.as_bytes() == global.as_bytes(), || {
                format!("{}: draw {draw}: destination did not recover the key", chain.protocol)
            })?;
            // Every hop carries the global key sealed under that hop's key.
            check(out.transmissions.len() == hop_keys.len(), || "hop count".into())?;
            for (t, k) in out.transmissions.iter().zip(&hop_keys) {
                let sealed: Vec<u8> = global.as_bytes().iter().zip(k.as_bytes()).map(|(g, k)| g ^ k).collect();
                check(t.ciphertext.as_bytes() == sealed.as_slice(), || format!("draw {draw}: ciphertext mismatch"))?;
            }
            let custody: BTreeSet<u32> = plane.log().entries().iter().map(|e| e.node.0).collect();
            check(!custody.contains(&8), || format!("{}: draw {draw}: node 8 in custody", chain.protocol))?;
            check(custody.iter().copied().eq(expected_custody.iter().copied()), || {
                format!("{}: draw {draw}: custody {custody:?}", chain.protocol)
            })?;
        }
    }
    Ok(format!(
        "{KEY_DRAWS} draws per path recovered bit-exactly; node 8 never in custody; conventional custody {{2,6,5,1}}"
    ))
}

// ---------------------------------------------------------------------------
// 7. Topology abstraction.

async fn criterion_7() -> Outcome {
    let topo = default_scenario().topology().map_err(|e| e.to_string())?;
    let abs = abstract_topology(&topo).map_err(|e| format!("{e:?}"))?;
    check(abs.node_count() == 7, || format!("{} abstract nodes", abs.node_count()))?;
    check(abs.nodes().all(|(_, k)| k != NodeKind::UntrustedRelay), || "untrusted relay survived".into())?;
    let collapsed: Vec<_> = abs.edges_between(NodeId(6), NodeId(3)).collect();
    check(collapsed.len() == 1, || format!("{} edges between 6 and 3", collapsed.len()))?;
    let e = collapsed[0];
    // 76.5 + 76.5 km; min(14.2, 14.2) kbps.
    check(e.length_km == 153.0 && e.min_rate_kbps == 14.2, || format!("edge 6-3: {} km / {} kbps", e.length_km, e.min_rate_kbps))?;
    let route = compute_path(NodeId(2), NodeId(3), &abs).map_err(|e| e.to_string())?;
    let hops: Vec<(u32, u32)> = route.iter().map(|t| (t.from.0, t.to.0)).collect();
    check(hops == [(2, 6), (6, 3)], || format!("abstract route {hops:?}"))?;
    let layout = locate_relays(&route, &abs);
    check(layout.physical_path == [2, 6, 8, 3].map(NodeId), || format!("expansion {:?}", layout.physical_path))?;

    // The controller assembles the same graph from agent reports.
    let tb = Testbed::boot(TestbedOptions::in_process(default_scenario())).await.map_err(|e| format!("boot: {e}"))?;
    let snap = tb.controller.snapshot().await;
    tb.shutdown().await;
    let snap = snap.map_err(|e| e.to_string())?;
    check(snap.abstracted.node_count() == 7, || "controller abstraction".into())?;
    check(snap.abstracted.edges() == abs.edges(), || "controller abstraction differs".into())?;
    Ok("7 nodes, no untrusted relay, edge 6-3 = 153 km / 14.2 kbps, expansion [2, 6, 8, 3]".into())
}

// ---------------------------------------------------------------------------
// 8. Northbound.

async fn criterion_8() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let read = |n: &str| std::fs::read(fixtures.join(n)).map_err(|e| format!("{n}: {e}"));
    let request = read("northbound_request.json")?;
    let expected: NorthboundResponseDoc =
        serde_json::from_slice(&read("northbound_response.json")?).map_err(|e| e.to_string())?;

    let tb = Testbed::boot(TestbedOptions::in_process(default_scenario())).await.map_err(|e| format!("boot: {e}"))?;
    let client = tb.client();
    let result = async {
        let (resp, _) = client.submit_raw("application/json", request).await.map_err(|e| e.to_string())?;
        let m = resp.metrics.clone().ok_or("no metrics")?;
        let (len, skc, sec) = HETEROGENEOUS_ROW;
        check(m.total_length_km == len && m.skc_kbps == skc && m.security_level == sec, || format!("metrics {m:?}"))?;
        let mut want = expected.clone();
        if let Some(w) = want.metrics.as_mut() {
            w.control_delay_ms = m.control_delay_ms;
        }
        check(resp == want, || format!("response {resp:?} differs from the fixture"))?;

        let mut reasons = Vec::new();
        for body in [
            r#"{"source":2,"destination":2,"required_rate_kbps":10,"protocol":"BB84+TF"}"#,
            r#"{"source":2,"destination":3,"required_rate_kbps":10,"protocol":"E91"}"#,
        ] {
            match client.submit_raw("application/json", body.as_bytes().to_vec()).await {
                Err(SubmitError::Status { status: 400, doc: Some(doc), .. })
                    if doc.error == "malformed-document" && !doc.reason.is_empty() =>
                {
                    reasons.push(doc.reason)
                }
                other => return Err(format!("{body}: {other:?}")),
            }
        }
        Ok(reasons)
    }
    .await;
    tb.shutdown().await;
    let reasons = result?;
    Ok(format!("golden exchange reproduced; malformed documents refused ({})", reasons.join("; ")))
}

// ---------------------------------------------------------------------------

fn report(n: usize, title: &str, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("[PASS] criterion {n}: {title}: {detail}");
            true
        }
        Err(reason) => {
            println!("[FAIL] criterion {n}: {title}: {reason}");
            false
        }
    }
}

fn sync_guard(f: impl FnOnce() -> Outcome) -> Outcome {
    std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

async fn async_guard<F>(f: F) -> Outcome
where
    F: std::future::Future<Output = Outcome> + Send + 'static,
{
    tokio::spawn(f).await.unwrap_or_else(|e| Err(format!("panicked: {e}")))
}

fn main() -> ExitCode {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("runtime");
    let results = rt.block_on(async {
        vec![
            report(1, "chain metrics table", async_guard(criterion_1()).await),
            report(2, "control delay ordering", async_guard(criterion_2()).await),
            report(3, "codec", sync_guard(criterion_3)),
            report(4, "routing oracle", sync_guard(criterion_4)),
            report(5, "first-fit and rollback", async_guard(criterion_5()).await),
            report(6, "key relay", sync_guard(criterion_6)),
            report(7, "topology abstraction", async_guard(criterion_7()).await),
            report(8, "northbound", async_guard(criterion_8()).await),
        ]
    });
    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
