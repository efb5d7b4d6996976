//! Randomized bounded topologies and the invariant checks run on them.
//!
//! A scenario is a set of traffic generators sharing one crossbar with a
//! few memory banks and, optionally, a cache whose private bank hangs off a
//! second link. Shared by the core property tests and the acceptance suite.

#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use serde_json::Value;
use tickwell::event::{Event, Hook, HookPhase};
use tickwell::messaging::{Port, PortId};
use tickwell::models::{CacheStub, HitPattern, MemBank, Pattern, TrafficGenerator};
use tickwell::sim::{EngineMode, SimBuilder, SimOptions, Simulation, Status};
use tickwell::ticking::TickMode;
use tickwell::time::Freq;

const FREQS: [u64; 3] = [500_000_000, 1_000_000_000, 2_000_000_000];

#[derive(Clone, Debug)]
pub struct GenSpec {
    pub freq: u64,
    pub pattern: Pattern,
    pub total: u64,
    pub max_outstanding: usize,
    /// Indices into the destination list: banks first, then the cache.
    pub dests: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BankSpec {
    pub freq: u64,
    pub latency: u64,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct CacheSpec {
    pub freq: u64,
    pub hit_latency: u64,
    pub hits: u64,
    pub misses: u64,
    pub bank: BankSpec,
    pub link_latency: u64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub gens: Vec<GenSpec>,
    pub banks: Vec<BankSpec>,
    pub cache: Option<CacheSpec>,
    pub in_cap: usize,
    pub out_cap: usize,
    pub xbar_freq: u64,
    pub xbar_latency: u64,
}

fn freq() -> impl Strategy<Value = u64> {
    prop::sample::select(FREQS.to_vec())
}

fn pattern() -> impl Strategy<Value = Pattern> {
    prop_oneof![
        (1u32..=10).prop_map(|k| Pattern::Uniform {
            rate: k as f64 / 10.0
        }),
        (1u64..6, 0u64..8).prop_map(|(length, gap)| Pattern::Burst { length, gap }),
        (0u32..95).prop_map(|k| Pattern::IdleFraction {
            fraction: k as f64 / 100.0
        }),
    ]
}

fn bank() -> impl Strategy<Value = BankSpec> {
    (freq(), 1u64..12, 1usize..5).prop_map(|(freq, latency, width)| BankSpec {
        freq,
        latency,
        width,
    })
}

fn cache() -> impl Strategy<Value = CacheSpec> {
    (freq(), 0u64..4, 0u64..4, 1u64..3, bank(), 0u64..3).prop_map(
        |(freq, hit_latency, hits, misses, bank, link_latency)| CacheSpec {
            freq,
            hit_latency,
            hits,
            misses,
            bank,
            link_latency,
        },
    )
}

pub fn scenario() -> impl Strategy<Value = Scenario> {
    (
        prop::collection::vec(bank(), 1..4),
        prop::option::of(cache()),
        1usize..5,
        1usize..5,
        freq(),
        0u64..4,
    )
        .prop_flat_map(|(banks, cache, in_cap, out_cap, xbar_freq, xbar_latency)| {
            let n_dest = banks.len() + cache.is_some() as usize;
            let gen = (
                freq(),
                pattern(),
                1u64..40,
                1usize..6,
                prop::collection::vec(0..n_dest, 1..=n_dest),
                any::<u64>(),
            )
                .prop_map(
                    |(freq, pattern, total, max_outstanding, mut dests, seed)| {
                        dests.sort_unstable();
                        dests.dedup();
                        GenSpec {
                            freq,
                            pattern,
                            total,
                            max_outstanding,
                            dests,
                            seed,
                        }
                    },
                );
            (
                prop::collection::vec(gen, 1..5),
                Just(banks),
                Just(cache),
                Just((in_cap, out_cap, xbar_freq, xbar_latency)),
            )
        })
        .prop_map(
            |(gens, banks, cache, (in_cap, out_cap, xbar_freq, xbar_latency))| Scenario {
                gens,
                banks,
                cache,
                in_cap,
                out_cap,
                xbar_freq,
                xbar_latency,
            },
        )
}

/// Observes every dispatch: buffer levels never exceed capacity, and an
/// owner asleep while its outgoing buffer is full holds a pending tick once
/// that buffer drops below full.
struct Watchdog {
    ports: Vec<Arc<Port>>,
    before: Mutex<Vec<(usize, bool)>>,
    problems: Mutex<Vec<String>>,
    wakes: Mutex<u64>,
}

impl Watchdog {
    fn asleep(p: &Port) -> bool {
        p.owner().is_some_and(|o| o.pending().is_none())
    }
}

impl Hook for Watchdog {
    fn on_event(&self, phase: HookPhase, ev: &Event) {
        match phase {
            HookPhase::Before => {
                let mut b = self.before.lock().unwrap();
                b.clear();
                b.extend(
                    self.ports
                        .iter()
                        .map(|p| (p.outgoing().len(), Self::asleep(p))),
                );
            }
            HookPhase::After => {
                let before = self.before.lock().unwrap();
                let mut problems = self.problems.lock().unwrap();
                for (p, &(len, asleep)) in self.ports.iter().zip(before.iter()) {
                    for b in [p.incoming(), p.outgoing()] {
                        if b.len() > b.capacity() {
                            problems.push(format!(
                                "{} holds {} > capacity {} at {}",
                                b.name(),
                                b.len(),
                                b.capacity(),
                                ev.time
                            ));
                        }
                    }
                    let out = p.outgoing();
                    if asleep && len == out.capacity() && out.len() < len {
                        *self.wakes.lock().unwrap() += 1;
                        if Self::asleep(p) {
                            problems.push(format!(
                                "{} went full -> not-full at {} but its owner has no pending tick",
                                out.name(),
                                ev.time
                            ));
                        }
                    }
                }
            }
        }
    }
}

pub struct Built {
    pub sim: Simulation,
    pub watchdog: Option<Arc<WatchdogHandle>>,
}

pub struct WatchdogHandle(Arc<Watchdog>);

impl WatchdogHandle {
    pub fn problems(&self) -> Vec<String> {
        self.0.problems.lock().unwrap().clone()
    }

    pub fn wakes(&self) -> u64 {
        *self.0.wakes.lock().unwrap()
    }
}

pub fn build(s: &Scenario, mode: TickMode, watch: bool) -> Built {
    let mut b = SimBuilder::new(SimOptions {
        ticking: mode,
        audit: true,
        ..SimOptions::default()
    });
    let mut dest_ids: Vec<PortId> = Vec::new();
    let mut xbar: Vec<String> = Vec::new();
    for (i, bank) in s.banks.iter().enumerate() {
        let name = format!("M{i}");
        let port = b
            .port(&format!("{name}.Port"), s.in_cap, s.out_cap)
            .unwrap();
        dest_ids.push(port.id());
        xbar.push(port.name().to_string());
        let ins = b.instrument(&name);
        let m = MemBank::builder()
            .latency_cycles(bank.latency)
            .max_in_flight(bank.width)
            .build(port, ins);
        b.add_component(&name, Freq(bank.freq), Box::new(m))
            .unwrap();
    }
    if let Some(c) = &s.cache {
        let top = b.port("C.Top", s.in_cap, s.out_cap).unwrap();
        let bottom = b.port("C.Bottom", s.in_cap, s.out_cap).unwrap();
        let mc = b.port("MC.Port", s.in_cap, s.out_cap).unwrap();
        dest_ids.push(top.id());
        xbar.push(top.name().to_string());
        let ins = b.instrument("C");
        let cache = CacheStub::builder()
            .hit_latency_cycles(c.hit_latency)
            .pattern(HitPattern {
                hits: c.hits,
                misses: c.misses,
            })
            .downstream(mc.id())
            .build(top, bottom, ins);
        b.add_component("C", Freq(c.freq), Box::new(cache)).unwrap();
        let ins = b.instrument("MC");
        let m = MemBank::builder()
            .latency_cycles(c.bank.latency)
            .max_in_flight(c.bank.width)
            .build(mc, ins);
        b.add_component("MC", Freq(c.bank.freq), Box::new(m))
            .unwrap();
        b.connect(
            "CL",
            Freq(1_000_000_000),
            c.link_latency,
            &["C.Bottom", "MC.Port"],
        )
        .unwrap();
    }
    for (i, g) in s.gens.iter().enumerate() {
        let name = format!("G{i}");
        let port = b
            .port(&format!("{name}.Port"), s.in_cap, s.out_cap)
            .unwrap();
        xbar.push(port.name().to_string());
        let ins = b.instrument(&name);
        let gen = TrafficGenerator::builder()
            .pattern(g.pattern.clone())
            .total_requests(g.total)
            .max_outstanding(g.max_outstanding)
            .destinations(g.dests.iter().map(|&d| dest_ids[d]).collect())
            .seed(g.seed)
            .build(port, ins);
        b.add_component(&name, Freq(g.freq), Box::new(gen)).unwrap();
    }
    let refs: Vec<&str> = xbar.iter().map(String::as_str).collect();
    b.connect("Xbar", Freq(s.xbar_freq), s.xbar_latency, &refs)
        .unwrap();
    let mut sim = b.build().unwrap();
    let watchdog = watch.then(|| {
        let w = Arc::new(Watchdog {
            ports: sim.ports().to_vec(),
            before: Mutex::new(Vec::new()),
            problems: Mutex::new(Vec::new()),
            wakes: Mutex::new(0),
        });
        sim.engine_mut().register_hook(w.clone());
        Arc::new(WatchdogHandle(w))
    });
    Built { sim, watchdog }
}

/// What one checked run observed.
#[derive(Clone, Debug, Default)]
pub struct Observed {
    pub final_vtime: u64,
    pub metrics: Value,
    pub backprop_wakes: u64,
    pub messages: u64,
}

fn counter(m: &Value, comp: &str, key: &str) -> u64 {
    m["components"][comp][key].as_u64().unwrap_or(0)
}

/// Runs `s` in smart mode under the watchdog and checks every invariant,
/// then reruns in always mode and checks the results match.
pub fn check(s: &Scenario) -> Result<Observed, String> {
    let Built { mut sim, watchdog } = build(s, TickMode::Smart, true);
    let end = sim.run(EngineMode::Serial).map_err(|e| e.to_string())?;
    let wd = watchdog.unwrap();
    let mut problems = wd.problems();

    let ticks = sim.tick_counts();
    if ticks.rule4_violations != 0 {
        problems.push(format!("{} rule-4 violations", ticks.rule4_violations));
    }
    if sim.fifo_violations() != 0 {
        problems.push(format!(
            "{} per-pair FIFO violations",
            sim.fifo_violations()
        ));
    }
    for p in sim.ports() {
        for b in [p.incoming(), p.outgoing()] {
            if b.high_watermark() > b.capacity() {
                problems.push(format!(
                    "{} peaked at {} > {}",
                    b.name(),
                    b.high_watermark(),
                    b.capacity()
                ));
            }
        }
    }

    let outcome = sim.outcome();
    if outcome.status != Status::Clean {
        problems.push(format!("not quiescent: {:?}", outcome.stuck_buffers));
    }
    for p in sim.ports() {
        if !p.incoming().is_empty() || !p.outgoing().is_empty() {
            problems.push(format!("{} not empty at exit", p.name()));
        }
    }
    let m = sim.metrics();
    let mut sent = 0;
    for (i, g) in s.gens.iter().enumerate() {
        let name = format!("G{i}");
        let issued = counter(&m, &name, "requests_issued");
        let received = counter(&m, &name, "responses_received");
        if issued != g.total || received != g.total {
            problems.push(format!(
                "{name}: {issued} issued, {received} answered of {}",
                g.total
            ));
        }
        sent += issued;
    }
    let mut served = 0;
    for i in 0..s.banks.len() {
        let name = format!("M{i}");
        let a = counter(&m, &name, "requests_admitted");
        let r = counter(&m, &name, "responses_sent");
        if a != r {
            problems.push(format!("{name}: admitted {a}, answered {r}"));
        }
        served += r;
    }
    if s.cache.is_some() {
        let hits = counter(&m, "C", "hits");
        let misses = counter(&m, "C", "misses");
        let mc = counter(&m, "MC", "responses_sent");
        if mc != misses {
            problems.push(format!(
                "cache forwarded {misses} misses, its bank answered {mc}"
            ));
        }
        served += hits + misses;
    }
    if served != sent {
        problems.push(format!("{sent} requests sent but {served} served"));
    }
    let (mut out_msgs, mut in_msgs, mut retrieved) = (0, 0, 0);
    for p in sim.ports() {
        let c = p.counters();
        out_msgs += c.out_msgs;
        in_msgs += c.in_msgs;
        retrieved += c.retrieved;
    }
    if out_msgs != in_msgs || in_msgs != retrieved {
        problems.push(format!(
            "messages sent {out_msgs}, delivered {in_msgs}, retrieved {retrieved}"
        ));
    }

    let Built {
        sim: mut always, ..
    } = build(s, TickMode::Always, false);
    let end_always = always.run(EngineMode::Serial).map_err(|e| e.to_string())?;
    if end_always != end {
        problems.push(format!("always mode ended at {end_always}, smart at {end}"));
    }
    if always.metrics() != m {
        problems.push("always-mode metrics differ from smart mode".into());
    }
    if always.tick_counts().stray_progress != 0 {
        problems.push(format!(
            "{} stray-progress ticks",
            always.tick_counts().stray_progress
        ));
    }

    if problems.is_empty() {
        Ok(Observed {
            final_vtime: end.0,
            metrics: m,
            backprop_wakes: wd.wakes(),
            messages: retrieved,
        })
    } else {
        Err(problems.join("; "))
    }
}

/// Totals over a property run.
#[derive(Clone, Debug, Default)]
pub struct SuiteStats {
    pub runs: u64,
    pub backprop_wakes: u64,
    pub messages: u64,
}

/// Checks `cases` scenarios drawn from a fixed seed.
pub fn run_suite(cases: u32, seed: [u8; 32]) -> Result<SuiteStats, String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner =
        TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &seed));
    let stats = Mutex::new(SuiteStats::default());
    runner
        .run(&scenario(), |s| {
            let o = check(&s).map_err(TestCaseError::fail)?;
            let mut st = stats.lock().unwrap();
            st.runs += 1;
            st.backprop_wakes += o.backprop_wakes;
            st.messages += o.messages;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(stats.into_inner().unwrap())
}
