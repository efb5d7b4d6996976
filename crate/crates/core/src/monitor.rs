//! Read and control surface for live monitoring.
//!
//! Everything here is callable from any thread while the engine runs. A
//! component snapshot is taken under the component's handler lock, so it
//! always reflects a state between two of its events.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::event::{Control, EngineState, HandlerSlot, Progress};
use crate::messaging::{Buffer, Port};
use crate::sim::Simulation;
use crate::ticking::TickHandle;
use crate::time::TimeBase;

/// Window over which the event rate is estimated.
const RATE_WINDOW: Duration = Duration::from_secs(3);
/// No new events for this long while running counts as stalled.
const STALL_AFTER: Duration = Duration::from_secs(2);
pub const WATCH_INTERVAL: Duration = Duration::from_millis(100);
const WATCH_MAX_POINTS: usize = 10_000;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HubError {
    #[error("unknown component {0}")]
    UnknownComponent(String),
    #[error("component {component} has no field {field}")]
    UnknownField { component: String, field: String },
    #[error("field {field} of {component} is not numeric")]
    NotNumeric { component: String, field: String },
    #[error("unknown watch {0}")]
    UnknownWatch(u64),
    #[error("the simulation has finished")]
    Finished,
}

struct View {
    name: String,
    kind: String,
    slot: Arc<HandlerSlot>,
    handle: Arc<TickHandle>,
    ports: Vec<Arc<Port>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentSummary {
    pub name: String,
    pub kind: String,
    pub tick_pending: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BufferView {
    pub name: String,
    pub level: usize,
    pub capacity: usize,
}

impl BufferView {
    fn of(b: &Buffer) -> BufferView {
        BufferView {
            name: b.name().to_string(),
            level: b.len(),
            capacity: b.capacity(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PortView {
    pub name: String,
    pub incoming: BufferView,
    pub outgoing: BufferView,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentSnapshot {
    pub name: String,
    pub kind: String,
    pub vtime_ticks: u64,
    /// Time of the pending smart tick, if any.
    pub tick_pending: Option<u64>,
    pub fields: Map<String, Value>,
    pub counters: Map<String, Value>,
    pub ports: Vec<PortView>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProgressReport {
    pub vtime_ticks: u64,
    pub vtime_s: f64,
    pub events: u64,
    pub wall_seconds: f64,
    /// Recent dispatch rate, estimated from observations of this endpoint.
    pub events_per_second: f64,
    pub state: EngineState,
    pub stalled: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Bottleneck {
    pub buffer: String,
    pub component: String,
    pub level: usize,
    pub capacity: usize,
    pub ratio: f64,
    pub time_at_full_ticks: u64,
    pub avg_level: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PauseReply {
    pub paused: bool,
    pub vtime_ticks: Option<u64>,
    pub state: EngineState,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResumeReply {
    pub resumed: bool,
    pub state: EngineState,
    pub note: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct ForceReply {
    pub accepted: bool,
    pub component: String,
    pub state: EngineState,
}

#[derive(Clone, Debug, Serialize)]
pub struct WatchPoint {
    pub wall_s: f64,
    pub vtime_ticks: u64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WatchSeries {
    pub id: u64,
    pub component: String,
    pub field: String,
    pub points: Vec<WatchPoint>,
}

struct Watch {
    id: u64,
    view: usize,
    field: String,
    created: Instant,
    points: Mutex<Vec<WatchPoint>>,
}

pub struct MonitorHub {
    base: TimeBase,
    views: Vec<View>,
    ports: Vec<Arc<Port>>,
    progress: Arc<Progress>,
    control: Arc<Control>,
    sampling_period: u64,
    rate: Mutex<VecDeque<(Instant, u64)>>,
    last_change: Mutex<(Instant, u64)>,
    watches: Mutex<Vec<Arc<Watch>>>,
    next_watch: AtomicU64,
}

impl MonitorHub {
    pub fn new(sim: &Simulation) -> MonitorHub {
        let views = sim
            .elements()
            .iter()
            .map(|e| View {
                name: e.name.clone(),
                kind: e.kind.clone(),
                slot: e.slot.clone(),
                handle: e.handle.clone(),
                ports: if e.link.is_some() {
                    Vec::new()
                } else {
                    e.ports.clone()
                },
            })
            .collect();
        MonitorHub {
            base: sim.base(),
            views,
            ports: sim.ports().to_vec(),
            progress: sim.engine().progress().clone(),
            control: sim.engine().control().clone(),
            sampling_period: sim.sampling_period().unwrap_or(0),
            rate: Mutex::new(VecDeque::new()),
            last_change: Mutex::new((Instant::now(), 0)),
            watches: Mutex::new(Vec::new()),
            next_watch: AtomicU64::new(1),
        }
    }

    fn view(&self, name: &str) -> Result<(usize, &View), HubError> {
        self.views
            .iter()
            .enumerate()
            .find(|(_, v)| v.name == name)
            .ok_or_else(|| HubError::UnknownComponent(name.to_string()))
    }

    pub fn state(&self) -> EngineState {
        self.progress.state()
    }

    pub fn components(&self) -> Vec<ComponentSummary> {
        self.views
            .iter()
            .map(|v| ComponentSummary {
                name: v.name.clone(),
                kind: v.kind.clone(),
                tick_pending: v.handle.pending().is_some(),
            })
            .collect()
    }

    pub fn component(&self, name: &str) -> Result<ComponentSnapshot, HubError> {
        let (_, v) = self.view(name)?;
        let (fields, counters) = v.slot.with(|h| {
            let fields: Map<String, Value> = h.inspect().into_iter().collect();
            let counters: Map<String, Value> = h
                .counters()
                .into_iter()
                .map(|(k, n)| (k.to_string(), Value::from(n)))
                .collect();
            (fields, counters)
        });
        Ok(ComponentSnapshot {
            name: v.name.clone(),
            kind: v.kind.clone(),
            vtime_ticks: self.progress.now().0,
            tick_pending: v.handle.pending().map(|t| t.0),
            fields,
            counters,
            ports: v
                .ports
                .iter()
                .map(|p| PortView {
                    name: p.name().to_string(),
                    incoming: BufferView::of(p.incoming()),
                    outgoing: BufferView::of(p.outgoing()),
                })
                .collect(),
        })
    }

    pub fn progress(&self) -> ProgressReport {
        let now = Instant::now();
        let events = self.progress.events();
        let state = self.progress.state();
        let rate = {
            let mut w = self.rate.lock().unwrap();
            w.push_back((now, events));
            while w.len() > 2 && now.duration_since(w[1].0) > RATE_WINDOW {
                w.pop_front();
            }
            let (t0, e0) = w[0];
            let dt = now.duration_since(t0).as_secs_f64();
            if w.len() >= 2 && dt > 0.0 {
                (events - e0) as f64 / dt
            } else {
                let wall = self.progress.wall_elapsed().as_secs_f64();
                if wall > 0.0 {
                    events as f64 / wall
                } else {
                    0.0
                }
            }
        };
        let stalled = {
            let mut lc = self.last_change.lock().unwrap();
            if lc.1 != events {
                *lc = (now, events);
            }
            state == EngineState::Running && now.duration_since(lc.0) > STALL_AFTER
        };
        let vt = self.progress.now();
        ProgressReport {
            vtime_ticks: vt.0,
            vtime_s: self.base.to_secs(vt),
            events,
            wall_seconds: self.progress.wall_elapsed().as_secs_f64(),
            events_per_second: rate,
            state,
            stalled,
        }
    }

    /// Buffers that hold or have held messages, fullest first. Ties break
    /// on sampled time at full, then name.
    pub fn bottlenecks(&self) -> Vec<Bottleneck> {
        let owner_of = |p: &Port| p.owner().map(|h| h.name().to_string()).unwrap_or_default();
        let mut out = Vec::new();
        for p in &self.ports {
            for b in [p.incoming(), p.outgoing()] {
                let level = b.len();
                let full = b.full_samples();
                let avg = b.average_level();
                if level == 0 && full == 0 && avg == 0.0 {
                    continue;
                }
                out.push(Bottleneck {
                    buffer: b.name().to_string(),
                    component: owner_of(p),
                    level,
                    capacity: b.capacity(),
                    ratio: level as f64 / b.capacity() as f64,
                    time_at_full_ticks: full * self.sampling_period,
                    avg_level: avg,
                });
            }
        }
        out.sort_by(|a, b| {
            b.ratio
                .total_cmp(&a.ratio)
                .then(b.time_at_full_ticks.cmp(&a.time_at_full_ticks))
                .then(a.buffer.cmp(&b.buffer))
        });
        out
    }

    /// Requests a pause and waits up to `timeout` for it to take effect.
    pub fn pause(&self, timeout: Duration) -> PauseReply {
        let state = self.progress.state();
        if state == EngineState::Finished {
            return PauseReply {
                paused: false,
                vtime_ticks: None,
                state,
            };
        }
        self.control.request_pause();
        let at = self.control.wait_paused(timeout);
        PauseReply {
            paused: at.is_some(),
            vtime_ticks: at.map(|t| t.0),
            state: self.progress.state(),
        }
    }

    pub fn resume(&self) -> ResumeReply {
        let state = self.progress.state();
        match state {
            EngineState::Paused => {
                self.control.request_resume();
                ResumeReply {
                    resumed: true,
                    state,
                    note: "resumed",
                }
            }
            EngineState::Finished => ResumeReply {
                resumed: false,
                state,
                note: "the simulation has finished",
            },
            _ => {
                let cancelled = self.control.cancel_pause();
                ResumeReply {
                    resumed: false,
                    state,
                    note: if cancelled {
                        "pending pause cancelled"
                    } else {
                        "not paused"
                    },
                }
            }
        }
    }

    /// Schedules a tick of `name` at its next cycle boundary. Applied at the
    /// engine's next event boundary; never duplicates a pending tick.
    pub fn force_tick(&self, name: &str) -> Result<ForceReply, HubError> {
        let (_, v) = self.view(name)?;
        let state = self.progress.state();
        if state == EngineState::Finished {
            return Err(HubError::Finished);
        }
        let handle = v.handle.clone();
        self.control.submit(move |now| handle.force(now));
        Ok(ForceReply {
            accepted: true,
            component: name.to_string(),
            state,
        })
    }

    fn read_field(v: &View, field: &str) -> Result<f64, HubError> {
        let value = if field == "tick_pending" {
            Some(Value::from(v.handle.pending().is_some()))
        } else {
            v.slot.with(|h| {
                h.inspect()
                    .into_iter()
                    .find(|(k, _)| k == field)
                    .map(|(_, val)| val)
                    .or_else(|| {
                        h.counters()
                            .into_iter()
                            .find(|(k, _)| *k == field)
                            .map(|(_, n)| Value::from(n))
                    })
            })
        };
        let err_field = || (v.name.clone(), field.to_string());
        match value {
            None => {
                let (component, field) = err_field();
                Err(HubError::UnknownField { component, field })
            }
            Some(Value::Number(n)) => Ok(n.as_f64().unwrap_or(0.0)),
            Some(Value::Bool(b)) => Ok(b as u8 as f64),
            Some(_) => {
                let (component, field) = err_field();
                Err(HubError::NotNumeric { component, field })
            }
        }
    }

    /// Starts sampling `component.field` on the wall clock. The first point
    /// is taken before this returns.
    pub fn watch(self: &Arc<Self>, component: &str, field: &str) -> Result<WatchSeries, HubError> {
        let (idx, v) = self.view(component)?;
        let first = Self::read_field(v, field)?;
        let watch = Arc::new(Watch {
            id: self.next_watch.fetch_add(1, Ordering::Relaxed),
            view: idx,
            field: field.to_string(),
            created: Instant::now(),
            points: Mutex::new(vec![WatchPoint {
                wall_s: 0.0,
                vtime_ticks: self.progress.now().0,
                value: first,
            }]),
        });
        self.watches.lock().unwrap().push(watch.clone());
        let hub = Arc::downgrade(self);
        let w = Arc::downgrade(&watch);
        thread::Builder::new()
            .name(format!("watch-{}", watch.id))
            .spawn(move || watch_loop(hub, w))
            .expect("spawning a watch thread");
        Ok(self.series(&watch))
    }

    fn series(&self, w: &Watch) -> WatchSeries {
        WatchSeries {
            id: w.id,
            component: self.views[w.view].name.clone(),
            field: w.field.clone(),
            points: w.points.lock().unwrap().clone(),
        }
    }

    pub fn watch_series(&self, id: u64) -> Result<WatchSeries, HubError> {
        let watches = self.watches.lock().unwrap();
        let w = watches
            .iter()
            .find(|w| w.id == id)
            .ok_or(HubError::UnknownWatch(id))?;
        Ok(self.series(w))
    }

    pub fn watches(&self) -> Vec<WatchSeries> {
        let watches = self.watches.lock().unwrap();
        watches.iter().map(|w| self.series(w)).collect()
    }
}

fn watch_loop(hub: Weak<MonitorHub>, watch: Weak<Watch>) {
    loop {
        thread::sleep(WATCH_INTERVAL);
        let (Some(hub), Some(w)) = (hub.upgrade(), watch.upgrade()) else {
            return;
        };
        let finished = hub.progress.state() == EngineState::Finished;
        if let Ok(value) = MonitorHub::read_field(&hub.views[w.view], &w.field) {
            let mut points = w.points.lock().unwrap();
            if points.len() < WATCH_MAX_POINTS {
                points.push(WatchPoint {
                    wall_s: w.created.elapsed().as_secs_f64(),
                    vtime_ticks: hub.progress.now().0,
                    value,
                });
            }
        }
        if finished {
            return;
        }
    }
}
