//! The monitoring surface against live runs: inspection, bottlenecks,
//! forced ticks, watches and pause/resume.

use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use tickwell::event::EngineState;
use tickwell::models::{MemBank, Pattern, PingAgent, PingRole, TrafficGenerator};
use tickwell::monitor::{HubError, MonitorHub};
use tickwell::sim::{EngineMode, SimBuilder, SimOptions, Simulation, Status};
use tickwell::time::Freq;

const GHZ: Freq = Freq(1_000_000_000);

fn deadlocked_pings(linger: Duration) -> Simulation {
    let mut b = SimBuilder::new(SimOptions::default());
    let a = b.port("A.Port", 4, 4).unwrap();
    let r = b.port("B.Port", 4, 4).unwrap();
    let init = PingAgent::builder()
        .role(PingRole::Initiator)
        .pings(6)
        .peer(r.id())
        .build(a, b.instrument("A"));
    let resp = PingAgent::builder()
        .role(PingRole::Responder)
        .drain(false)
        .build(r, b.instrument("B"));
    b.add_component("A", GHZ, Box::new(init)).unwrap();
    b.add_component("B", GHZ, Box::new(resp)).unwrap();
    b.connect("Link", GHZ, 1, &["A.Port", "B.Port"]).unwrap();
    b.engine_mut().set_linger(Some(linger));
    b.build().unwrap()
}

/// Generators hammering one slow bank, slowed down per tick so a run lasts
/// long enough to observe from another thread.
fn saturation(requests: u64, cost: u32) -> Simulation {
    let mut b = SimBuilder::new(SimOptions::default());
    let m = b.port("M0.Port", 4, 4).unwrap();
    let mut names = vec!["M0.Port".to_string()];
    for i in 0..4 {
        let name = format!("G{i}");
        let p = b.port(&format!("{name}.Port"), 4, 4).unwrap();
        let g = TrafficGenerator::builder()
            .pattern(Pattern::Uniform { rate: 1.0 })
            .total_requests(requests)
            .max_outstanding(8)
            .destinations(vec![m.id()])
            .compute_cost(cost)
            .seed(i)
            .build(p, b.instrument(&name));
        b.add_component(&name, GHZ, Box::new(g)).unwrap();
        names.push(format!("{name}.Port"));
    }
    let bank = MemBank::builder()
        .latency_cycles(20)
        .max_in_flight(2)
        .compute_cost(cost)
        .build(m, b.instrument("M0"));
    b.add_component("M0", GHZ, Box::new(bank)).unwrap();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    b.connect("Xbar", GHZ, 1, &refs).unwrap();
    b.build().unwrap()
}

fn spawn(mut sim: Simulation) -> thread::JoinHandle<Simulation> {
    thread::spawn(move || {
        sim.run(EngineMode::Serial).unwrap();
        sim
    })
}

fn wait_for(hub: &MonitorHub, state: EngineState) {
    let start = Instant::now();
    while hub.state() != state {
        assert!(
            start.elapsed() < Duration::from_secs(20),
            "never reached {state:?}"
        );
        thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn inspection_lists_components_and_ports() {
    let sim = deadlocked_pings(Duration::ZERO);
    let hub = sim.hub();
    let names: Vec<String> = hub.components().into_iter().map(|c| c.name).collect();
    assert_eq!(names, ["A", "B", "Link"]);
    let a = hub.component("A").unwrap();
    assert_eq!(a.kind, "ping_agent");
    assert_eq!(a.ports.len(), 1);
    assert_eq!(a.ports[0].incoming.name, "A.Port.in");
    assert_eq!(a.ports[0].outgoing.capacity, 4);
    assert!(matches!(
        hub.component("Nope"),
        Err(HubError::UnknownComponent(_))
    ));
    assert!(matches!(
        hub.force_tick("Nope"),
        Err(HubError::UnknownComponent(_))
    ));
}

#[test]
fn idle_system_has_no_bottlenecks() {
    let mut sim = saturation(0, 0);
    let hub = sim.hub();
    assert!(hub.bottlenecks().is_empty());
    sim.run(EngineMode::Serial).unwrap();
    assert!(hub.bottlenecks().is_empty());
}

#[test]
fn deadlock_ranks_the_stuck_buffer_first_and_a_forced_tick_runs_once() {
    let sim = deadlocked_pings(Duration::from_millis(1500));
    let hub = sim.hub();
    let run = spawn(sim);
    wait_for(&hub, EngineState::Lingering);

    let ranked = hub.bottlenecks();
    assert_eq!(ranked[0].buffer, "B.Port.in");
    assert_eq!(ranked[0].component, "B");
    assert_eq!(ranked[0].ratio, 1.0);
    assert!(ranked
        .iter()
        .skip(1)
        .all(|b| b.ratio < 1.0 || b.buffer > ranked[0].buffer));

    let before = hub.component("B").unwrap();
    assert_eq!(before.tick_pending, None);
    let reply = hub.force_tick("B").unwrap();
    assert!(reply.accepted);
    let start = Instant::now();
    loop {
        let s = hub.component("B").unwrap();
        if s.counters != before.counters || s.vtime_ticks > before.vtime_ticks {
            break;
        }
        assert!(
            start.elapsed() < Duration::from_secs(5),
            "forced tick never ran"
        );
        thread::sleep(Duration::from_millis(5));
    }
    let sim = run.join().unwrap();
    let b = sim.element("B").unwrap().handle.counts();
    assert_eq!(b.rule4_violations, 0);
    assert_eq!(sim.element("B").unwrap().handle.pending(), None);
    assert_eq!(sim.outcome().status, Status::Deadlock);

    let mut reference = deadlocked_pings(Duration::ZERO);
    reference.run(EngineMode::Serial).unwrap();
    let r = reference.element("B").unwrap().handle.counts();
    assert_eq!(b.ticks, r.ticks + 1);
    assert_eq!(b.wasted, r.wasted + 1);
    assert!(matches!(hub.force_tick("B"), Err(HubError::Finished)));
}

#[test]
fn watches_sample_fields_and_reject_unknown_ones() {
    let sim = saturation(400, 20_000);
    let hub: Arc<MonitorHub> = sim.hub();
    let first = hub.watch("M0", "in_flight").unwrap();
    assert!(!first.points.is_empty());
    assert!(matches!(
        hub.watch("M0", "bogus"),
        Err(HubError::UnknownField { .. })
    ));
    assert!(matches!(
        hub.watch("Nope", "x"),
        Err(HubError::UnknownComponent(_))
    ));
    assert!(matches!(
        hub.watch_series(999),
        Err(HubError::UnknownWatch(999))
    ));
    let sim = spawn(sim).join().unwrap();
    let series = hub.watch_series(first.id).unwrap();
    let peak = series.points.iter().map(|p| p.value).fold(0.0, f64::max);
    assert!(series.points.len() > 1, "{} points", series.points.len());
    assert_eq!(peak, 2.0);
    assert!(sim.metrics()["components"]["M0"]["responses_sent"] == 1600);
}

#[test]
fn pause_resume_sandwich_matches_an_uninterrupted_run() {
    let mut plain = saturation(300, 2_000);
    let end_plain = plain.run(EngineMode::Serial).unwrap();

    let sim = saturation(300, 2_000);
    let hub = sim.hub();
    assert!(!hub.resume().resumed);
    let run = spawn(sim);
    wait_for(&hub, EngineState::Running);
    let noop = hub.resume();
    assert!(!noop.resumed);
    let p = hub.pause(Duration::from_secs(5));
    if p.paused {
        let at = p.vtime_ticks.unwrap();
        assert_eq!(hub.progress().state, EngineState::Paused);
        let t0 = hub.progress().vtime_ticks;
        thread::sleep(Duration::from_millis(50));
        assert_eq!(hub.progress().vtime_ticks, t0);
        assert_eq!(t0, at);
        assert!(hub.resume().resumed);
    }
    let sim = run.join().unwrap();
    assert!(p.paused, "the run finished before the pause took effect");
    assert_eq!(sim.engine().now(), end_plain);
    assert_eq!(sim.metrics(), plain.metrics());
}

#[test]
fn forcing_an_active_component_adds_no_tick() {
    let sim = saturation(300, 2_000);
    let hub = sim.hub();
    let run = spawn(sim);
    wait_for(&hub, EngineState::Running);
    for _ in 0..20 {
        let _ = hub.force_tick("M0");
        thread::sleep(Duration::from_millis(2));
    }
    let sim = run.join().unwrap();
    assert_eq!(sim.tick_counts().rule4_violations, 0);
    assert_eq!(sim.outcome().status, Status::Clean);
}
