//! Backtraces, tracer results and sampled metrics on small built systems.

use std::sync::Arc;

use tickwell::error::SimError;
use tickwell::models::{CacheStub, HitPattern, MemBank, Pattern, TrafficGenerator};
use tickwell::sampler::{SampleRow, SampleSink};
use tickwell::sim::{EngineMode, SimBuilder, SimOptions, Simulation};
use tickwell::time::Freq;
use tickwell::trace::{AverageTimeTracer, TagCountTracer, TaskFilter};

const GHZ: Freq = Freq(1_000_000_000);
const CYCLE: u64 = 1000;

struct Chain {
    requests: u64,
    outstanding: usize,
    hit_latency: u64,
    bank_latency: u64,
    fault_on: Option<u64>,
}

impl Default for Chain {
    fn default() -> Self {
        Chain {
            requests: 100,
            outstanding: 1,
            hit_latency: 2,
            bank_latency: 10,
            fault_on: None,
        }
    }
}

/// Generator -> cache (3:1 hits) -> bank, with an average-time and a tag
/// tracer on the cache.
fn chain(
    c: &Chain,
) -> (
    Simulation,
    Arc<AverageTimeTracer>,
    Arc<TagCountTracer>,
    Arc<TagCountTracer>,
) {
    let mut b = SimBuilder::new(SimOptions {
        registry: Some(4096),
        ..SimOptions::default()
    });
    let avg = Arc::new(AverageTimeTracer::new("avg", TaskFilter::category("Cache")));
    let hits = Arc::new(TagCountTracer::new("hits", "cache hit"));
    let misses = Arc::new(TagCountTracer::new("misses", "cache miss"));
    for t in [
        avg.clone() as Arc<_>,
        hits.clone() as Arc<_>,
        misses.clone() as Arc<_>,
    ] {
        b.add_tracer(t, Some(vec!["C0".into()]));
    }
    let g = b.port("G0.Port", 4, 4).unwrap();
    let top = b.port("C0.Top", 4, 4).unwrap();
    let bottom = b.port("C0.Bottom", 4, 4).unwrap();
    let m = b.port("M0.Port", 4, 4).unwrap();
    let gen = TrafficGenerator::builder()
        .pattern(Pattern::Uniform { rate: 1.0 })
        .total_requests(c.requests)
        .max_outstanding(c.outstanding)
        .destinations(vec![top.id()])
        .build(g, b.instrument("G0"));
    let cache = CacheStub::builder()
        .hit_latency_cycles(c.hit_latency)
        .pattern(HitPattern { hits: 3, misses: 1 })
        .downstream(m.id())
        .build(top, bottom, b.instrument("C0"));
    let bank = MemBank::builder()
        .latency_cycles(c.bank_latency)
        .max_in_flight(4)
        .fault_on_request(c.fault_on)
        .build(m, b.instrument("M0"));
    b.add_component("G0", GHZ, Box::new(gen)).unwrap();
    b.add_component("C0", GHZ, Box::new(cache)).unwrap();
    b.add_component("M0", GHZ, Box::new(bank)).unwrap();
    b.connect("L0", GHZ, 1, &["G0.Port", "C0.Top"]).unwrap();
    b.connect("L1", GHZ, 1, &["C0.Bottom", "M0.Port"]).unwrap();
    (b.build().unwrap(), avg, hits, misses)
}

#[test]
fn fault_backtrace_starts_at_the_generator_request() {
    let (mut sim, ..) = chain(&Chain {
        fault_on: Some(3),
        outstanding: 4,
        ..Chain::default()
    });
    let err = sim.run(EngineMode::Serial).unwrap_err();
    let SimError::Fault(report) = err else {
        panic!("expected a fault, got {err}");
    };
    assert_eq!(report.handler, "M0");
    let f = &report.frames;
    assert_eq!(f.len(), 3, "{}", report.render_frames());
    assert_eq!(
        (
            f[0].location.as_str(),
            f[0].category.as_str(),
            f[0].action.as_str()
        ),
        ("G0", "Request", "Read")
    );
    assert_eq!(
        (f[1].location.as_str(), f[1].category.as_str()),
        ("C0", "Cache")
    );
    assert_eq!(
        (f[2].location.as_str(), f[2].category.as_str()),
        ("M0", "Memory")
    );
    let text = report.to_string();
    assert!(text.contains("native backtrace:"));
    assert!(text.contains("#0 G0 Request/Read"), "{text}");
}

/// Oracle: a hit answers after H cycles. A miss is forwarded in the cycle it
/// is accepted, reaches the bank three cycles later, is answered L cycles
/// after that and takes three more to come back: 6 + L.
fn average_cache_cycles(h: u64, l: u64) -> f64 {
    let hit = h as f64;
    let miss = (6 + l) as f64;
    0.75 * hit + 0.25 * miss
}

#[test]
fn cache_average_latency_matches_pipeline_arithmetic() {
    for (h, l) in [(2, 10), (0, 3), (1, 1), (5, 7)] {
        let (mut sim, avg, hits, misses) = chain(&Chain {
            hit_latency: h,
            bank_latency: l,
            ..Chain::default()
        });
        sim.run(EngineMode::Serial).unwrap();
        assert_eq!((hits.count(), misses.count()), (75, 25));
        assert_eq!(avg.count(), 100);
        let got = avg.average().unwrap() / CYCLE as f64;
        assert_eq!(got, average_cache_cycles(h, l), "H={h} L={l}");
    }
}

fn sampled(sim: &mut Simulation, sink: &Arc<SampleSink>) -> Vec<SampleRow> {
    sim.run(EngineMode::Serial).unwrap();
    sink.rows()
}

fn series<'a>(rows: &'a [SampleRow], target: &str, kind: &str) -> Vec<&'a SampleRow> {
    rows.iter()
        .filter(|r| r.target == target && r.kind == kind)
        .collect()
}

#[test]
fn full_rate_generator_moves_64_bytes_per_cycle() {
    let period = 1_000 * CYCLE;
    let sink = SampleSink::memory();
    let mut b = SimBuilder::new(SimOptions::default());
    b.sample_into(period, sink.clone());
    let g = b.port("G0.Port", 4, 4).unwrap();
    let idle = b.port("G1.Port", 4, 4).unwrap();
    let m = b.port("M0.Port", 4, 4).unwrap();
    let gen = TrafficGenerator::builder()
        .pattern(Pattern::Uniform { rate: 1.0 })
        .total_requests(10_000)
        .max_outstanding(64)
        .payload_bytes(64)
        .destinations(vec![m.id()])
        .build(g, b.instrument("G0"));
    let quiet = TrafficGenerator::builder()
        .total_requests(0)
        .destinations(vec![m.id()])
        .build(idle, b.instrument("G1"));
    let bank = MemBank::builder()
        .latency_cycles(10)
        .max_in_flight(64)
        .build(m, b.instrument("M0"));
    b.add_component("G0", GHZ, Box::new(gen)).unwrap();
    b.add_component("G1", GHZ, Box::new(quiet)).unwrap();
    b.add_component("M0", GHZ, Box::new(bank)).unwrap();
    b.connect("Xbar", GHZ, 1, &["G0.Port", "G1.Port", "M0.Port"])
        .unwrap();
    let mut sim = b.build().unwrap();
    let rows = sampled(&mut sim, &sink);

    let out = series(&rows, "G0.Port", "port_out_bytes");
    assert!(out.len() >= 9, "{} samples", out.len());
    // The first sample includes start-up; the last may be cut short.
    for r in &out[1..out.len() - 1] {
        assert_eq!(r.value, 64 * 1000, "at {}", r.time_ticks);
    }
    let msgs = series(&rows, "G0.Port", "port_out_msgs");
    assert_eq!(msgs.iter().map(|r| r.value).sum::<u64>(), 10_000);

    for kind in [
        "port_in_bytes",
        "port_out_bytes",
        "port_in_msgs",
        "port_out_msgs",
    ] {
        assert!(
            series(&rows, "G1.Port", kind).iter().all(|r| r.value == 0),
            "{kind}"
        );
    }
    for t in ["G1.Port.in", "G1.Port.out"] {
        assert!(series(&rows, t, "buffer_level")
            .iter()
            .all(|r| r.value == 0));
    }
    let times: Vec<u64> = out.iter().map(|r| r.time_ticks).collect();
    let expect: Vec<u64> = (1..=times.len() as u64).map(|k| k * period).collect();
    assert_eq!(times, expect);
}

#[test]
fn saturated_bank_input_sits_at_capacity() {
    let sink = SampleSink::memory();
    let mut b = SimBuilder::new(SimOptions::default());
    b.sample_into(100 * CYCLE, sink.clone());
    let mut names = Vec::new();
    let m = b.port("M0.Port", 4, 4).unwrap();
    for i in 0..4 {
        let name = format!("G{i}");
        let p = b.port(&format!("{name}.Port"), 4, 4).unwrap();
        let gen = TrafficGenerator::builder()
            .pattern(Pattern::Uniform { rate: 1.0 })
            .total_requests(200)
            .max_outstanding(8)
            .destinations(vec![m.id()])
            .build(p, b.instrument(&name));
        b.add_component(&name, GHZ, Box::new(gen)).unwrap();
        names.push(format!("{name}.Port"));
    }
    let bank = MemBank::builder()
        .latency_cycles(20)
        .max_in_flight(2)
        .build(m, b.instrument("M0"));
    b.add_component("M0", GHZ, Box::new(bank)).unwrap();
    names.push("M0.Port".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    b.connect("Xbar", GHZ, 1, &refs).unwrap();
    let mut sim = b.build().unwrap();
    let rows = sampled(&mut sim, &sink);
    let level = series(&rows, "M0.Port.in", "buffer_level");
    let mid = &level[2..level.len() - 2];
    assert!(
        mid.iter().all(|r| r.value == 4),
        "{:?}",
        mid.iter().map(|r| r.value).collect::<Vec<_>>()
    );
    let m = sim.metrics();
    assert_eq!(m["buffers"]["M0.Port.in"]["max_level"], 4);
    assert!(
        m["buffers"]["M0.Port.in"]["time_at_full_ticks"]
            .as_u64()
            .unwrap()
            > 0
    );
}
