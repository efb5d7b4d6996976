//! The HTTP surface against a lingering deadlocked run.

use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tickwell::models::{PingAgent, PingRole};
use tickwell::sim::{EngineMode, SimBuilder, SimOptions, Simulation};
use tickwell::time::Freq;
use tickwell_monitor::{serve, ServeError};

const GHZ: Freq = Freq(1_000_000_000);

fn deadlocked(linger: Duration) -> Simulation {
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

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

fn get(a: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = a.get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(a: &ureq::Agent, url: &str, body: Option<Value>) -> (u16, Value) {
    let req = a.post(url);
    let mut r = match body {
        Some(b) => req.send_json(b).unwrap(),
        None => req.send_empty().unwrap(),
    };
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn endpoints_answer_during_linger_and_refuse_after_finish() {
    let mut sim = deadlocked(Duration::from_millis(1500));
    let server = serve(sim.hub(), 0, None).unwrap();
    let base = server.url();
    let run = thread::spawn(move || {
        sim.run(EngineMode::Serial).unwrap();
        sim
    });
    let a = agent();

    let start = Instant::now();
    loop {
        let (_, p) = get(&a, &format!("{base}/api/progress"));
        if p["state"] == "lingering" {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(10), "{p}");
        thread::sleep(Duration::from_millis(5));
    }

    let (code, list) = get(&a, &format!("{base}/api/components"));
    assert_eq!(code, 200);
    let names: Vec<&str> = list
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["A", "B", "Link"]);

    let (code, b) = get(&a, &format!("{base}/api/component/B"));
    assert_eq!(code, 200);
    assert_eq!(b["kind"], "ping_agent");

    let (code, ranked) = get(&a, &format!("{base}/api/bottlenecks"));
    assert_eq!(code, 200);
    assert_eq!(ranked[0]["buffer"], "B.Port.in");
    assert_eq!(ranked[0]["ratio"], 1.0);

    let (code, err) = get(&a, &format!("{base}/api/component/Nope"));
    assert_eq!(
        (code, err["kind"].as_str()),
        (404, Some("unknown_component"))
    );
    let (code, err) = post(
        &a,
        &format!("{base}/api/watch"),
        Some(json!({"component": "B", "field": "nope"})),
    );
    assert_eq!((code, err["kind"].as_str()), (404, Some("unknown_field")));
    let (code, err) = get(&a, &format!("{base}/api/watch/77"));
    assert_eq!((code, err["kind"].as_str()), (404, Some("unknown_watch")));

    let (code, w) = post(
        &a,
        &format!("{base}/api/watch"),
        Some(json!({"component": "A", "field": "sent"})),
    );
    assert_eq!(code, 200, "{w}");
    assert!(!w["points"].as_array().unwrap().is_empty());
    let (_, all) = get(&a, &format!("{base}/api/watches"));
    assert_eq!(all.as_array().unwrap().len(), 1);

    let (code, _) = post(&a, &format!("{base}/api/resume"), None);
    assert_eq!(code, 200);
    let (code, f) = post(&a, &format!("{base}/api/component/B/tick"), None);
    assert_eq!((code, &f["accepted"]), (200, &json!(true)));

    let sim = run.join().unwrap();
    assert_eq!(
        sim.element("B").unwrap().handle.counts().rule4_violations,
        0
    );
    let (code, err) = post(&a, &format!("{base}/api/component/B/tick"), None);
    assert_eq!((code, err["kind"].as_str()), (409, Some("finished")));
    let (_, p) = get(&a, &format!("{base}/api/progress"));
    assert_eq!(p["state"], "finished");
    server.stop();
}

#[test]
fn port_in_use_is_a_bind_error() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let sim = deadlocked(Duration::ZERO);
    match serve(sim.hub(), port, None) {
        Err(ServeError::Bind { port: p, .. }) => assert_eq!(p, port),
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("bound a taken port"),
    }
}

#[test]
fn missing_static_dir_is_rejected() {
    let sim = deadlocked(Duration::ZERO);
    let r = serve(
        sim.hub(),
        0,
        Some(std::path::Path::new("/definitely/not/here")),
    );
    assert!(matches!(r, Err(ServeError::StaticDir(_))));
}
