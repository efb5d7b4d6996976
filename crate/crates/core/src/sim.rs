//! Assembling and running a simulation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::SimError;
use crate::event::{Engine, EngineState, HandlerSlot};
use crate::messaging::{Connection, Link, Port, PortId};
use crate::monitor::MonitorHub;
use crate::sampler::{SampleSink, Sampler};
use crate::ticking::{activate, Component, TickCounts, TickHandle, TickMode, TickingElement};
use crate::time::{Freq, TimeBase, VTime};
use crate::trace::{DbTracer, Instrument, TaskRegistry, Tracer};

pub const DEFAULT_BUFFER_CAPACITY: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Serial,
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineMode {
    Serial,
    Parallel { workers: usize },
}

impl EngineMode {
    pub fn kind(self) -> EngineKind {
        match self {
            EngineMode::Serial => EngineKind::Serial,
            EngineMode::Parallel { .. } => EngineKind::Parallel,
        }
    }

    pub fn workers(self) -> usize {
        match self {
            EngineMode::Serial => 1,
            EngineMode::Parallel { workers } => workers,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub base: TimeBase,
    pub ticking: TickMode,
    /// Per-element ticking mode.
    pub overrides: HashMap<String, TickMode>,
    /// Capacity of the task registry's ring of ended tasks. `None` disables
    /// the registry and with it architectural backtraces.
    pub registry: Option<usize>,
    /// Check per-source FIFO order on every retrieve.
    pub audit: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            base: TimeBase::default(),
            ticking: TickMode::Smart,
            overrides: HashMap::new(),
            registry: None,
            audit: false,
        }
    }
}

/// A ticking element of a built simulation.
pub struct Element {
    pub name: String,
    pub kind: String,
    pub handle: Arc<TickHandle>,
    pub slot: Arc<HandlerSlot>,
    pub ports: Vec<Arc<Port>>,
    /// Set for connections.
    pub link: Option<Arc<Link>>,
}

struct TracerEntry {
    tracer: Arc<dyn Tracer>,
    /// `None` attaches to every component.
    targets: Option<HashSet<String>>,
}

pub struct SimBuilder {
    opts: SimOptions,
    engine: Engine,
    registry: Option<Arc<TaskRegistry>>,
    tracers: Vec<TracerEntry>,
    dbs: Vec<Arc<DbTracer>>,
    ports: Vec<Arc<Port>>,
    port_names: HashMap<String, PortId>,
    elements: Vec<Element>,
    sampling: Option<(u64, Arc<SampleSink>)>,
}

impl SimBuilder {
    pub fn new(opts: SimOptions) -> SimBuilder {
        let mut engine = Engine::new(opts.base);
        let registry = opts
            .registry
            .map(|cap| Arc::new(TaskRegistry::with_capacity(cap)));
        if let Some(reg) = &registry {
            engine.set_task_registry(reg.clone());
        }
        SimBuilder {
            opts,
            engine,
            registry,
            tracers: Vec::new(),
            dbs: Vec::new(),
            ports: Vec::new(),
            port_names: HashMap::new(),
            elements: Vec::new(),
            sampling: None,
        }
    }

    pub fn base(&self) -> TimeBase {
        self.opts.base
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    /// Attaches `tracer` to the named components, or to all when `targets`
    /// is `None`. Only instruments created afterwards see it.
    pub fn add_tracer(&mut self, tracer: Arc<dyn Tracer>, targets: Option<Vec<String>>) {
        self.tracers.push(TracerEntry {
            tracer,
            targets: targets.map(|t| t.into_iter().collect()),
        });
    }

    pub fn add_db_tracer(&mut self, db: Arc<DbTracer>, targets: Option<Vec<String>>) {
        self.dbs.push(db.clone());
        self.add_tracer(db, targets);
    }

    /// Samples every `period_ticks` into `sink`.
    pub fn sample_into(&mut self, period_ticks: u64, sink: Arc<SampleSink>) {
        self.sampling = Some((period_ticks, sink));
    }

    pub fn port(
        &mut self,
        name: &str,
        in_capacity: usize,
        out_capacity: usize,
    ) -> Result<Arc<Port>, SimError> {
        if self.port_names.contains_key(name) {
            return Err(SimError::config(
                format!("ports.{name}"),
                "port name already in use",
            ));
        }
        if in_capacity == 0 || out_capacity == 0 {
            return Err(SimError::config(
                format!("ports.{name}"),
                "buffer capacity must be positive",
            ));
        }
        let id = PortId(self.ports.len() as u32);
        let mut port = Port::new(id, name, in_capacity, out_capacity);
        if self.opts.audit {
            port = port.with_audit();
        }
        let port = Arc::new(port);
        self.ports.push(port.clone());
        self.port_names.insert(name.to_string(), id);
        Ok(port)
    }

    pub fn port_id(&self, name: &str) -> Option<PortId> {
        self.port_names.get(name).copied()
    }

    pub fn port_by_name(&self, name: &str) -> Option<&Arc<Port>> {
        self.port_id(name).map(|id| &self.ports[id.0 as usize])
    }

    /// Instrument for the component `name`, carrying every tracer attached
    /// to it.
    pub fn instrument(&self, name: &str) -> Instrument {
        let tracers: Vec<Arc<dyn Tracer>> = self
            .tracers
            .iter()
            .filter(|e| e.targets.as_ref().is_none_or(|t| t.contains(name)))
            .map(|e| e.tracer.clone())
            .collect();
        Instrument::new(name, tracers, self.registry.clone())
    }

    fn check_name(&self, name: &str) -> Result<(), SimError> {
        if self.elements.iter().any(|e| e.name == name) {
            return Err(SimError::config(
                format!("elements.{name}"),
                "name already in use",
            ));
        }
        Ok(())
    }

    fn handle_for(&mut self, name: &str, freq: Freq) -> Result<Arc<TickHandle>, SimError> {
        let period = self.opts.base.period(freq)?;
        let mode = self
            .opts
            .overrides
            .get(name)
            .copied()
            .unwrap_or(self.opts.ticking);
        let id = self.engine.reserve_handler();
        Ok(Arc::new(TickHandle::new(
            id,
            name,
            period,
            mode,
            self.engine.scheduler().clone(),
        )))
    }

    pub fn add_component(
        &mut self,
        name: &str,
        freq: Freq,
        component: Box<dyn Component>,
    ) -> Result<Arc<TickHandle>, SimError> {
        self.check_name(name)?;
        let ports = component.ports();
        for p in &ports {
            let ours = self
                .port_id(p.name())
                .is_some_and(|id| Arc::ptr_eq(&self.ports[id.0 as usize], p));
            if !ours {
                return Err(SimError::config(
                    format!("elements.{name}"),
                    format!("port {} was not created by this builder", p.name()),
                ));
            }
            if p.owner().is_some() {
                return Err(SimError::config(
                    format!("elements.{name}"),
                    format!("port {} already belongs to another component", p.name()),
                ));
            }
        }
        let handle = self.handle_for(name, freq)?;
        activate(component.as_ref(), &handle);
        let kind = component.kind().to_string();
        let forced = self
            .instrument(name)
            .with_id_prefix(&format!("{name}-forced"));
        let slot = self.engine.install(
            handle.id(),
            Box::new(TickingElement::new(component, handle.clone(), forced)),
        );
        self.elements.push(Element {
            name: name.to_string(),
            kind,
            handle: handle.clone(),
            slot,
            ports,
            link: None,
        });
        Ok(handle)
    }

    pub fn connect(
        &mut self,
        name: &str,
        freq: Freq,
        latency_cycles: u64,
        ports: &[&str],
    ) -> Result<Arc<Link>, SimError> {
        self.check_name(name)?;
        let mut members = Vec::with_capacity(ports.len());
        for (i, p) in ports.iter().enumerate() {
            let port = self.port_by_name(p).cloned().ok_or_else(|| {
                SimError::config(
                    format!("connections.{name}.ports[{i}]"),
                    format!("unknown port {p}"),
                )
            })?;
            members.push(port);
        }
        let handle = self.handle_for(name, freq)?;
        let conn = Connection::plug(name, handle.clone(), latency_cycles, members.clone())?;
        let link = conn.link().clone();
        activate(&conn, &handle);
        let forced = self
            .instrument(name)
            .with_id_prefix(&format!("{name}-forced"));
        let slot = self.engine.install(
            handle.id(),
            Box::new(TickingElement::new(Box::new(conn), handle.clone(), forced)),
        );
        self.elements.push(Element {
            name: name.to_string(),
            kind: "connection".into(),
            handle,
            slot,
            ports: members,
            link: Some(link.clone()),
        });
        Ok(link)
    }

    pub fn build(mut self) -> Result<Simulation, SimError> {
        for p in &self.ports {
            if p.link().is_none() {
                return Err(SimError::config(
                    format!("ports.{}", p.name()),
                    "port is not plugged into any connection",
                ));
            }
            if p.owner().is_none() {
                return Err(SimError::config(
                    format!("ports.{}", p.name()),
                    "port does not belong to any component",
                ));
            }
        }
        let mut sampling_period = None;
        let mut sink = None;
        if let Some((period, s)) = self.sampling.take() {
            if period == 0 {
                return Err(SimError::config("sampling.period_ns", "must be positive"));
            }
            let sampler = Sampler::new(period, self.ports.clone(), s.clone());
            let id = self.engine.add_exclusive_handler(Box::new(sampler));
            self.engine.schedule(crate::event::Event::new(
                VTime(period),
                id,
                crate::event::EventKind::Sampler,
            ))?;
            sampling_period = Some(period);
            sink = Some(s);
        }
        let mut seen = HashSet::new();
        let tracers = self
            .tracers
            .iter()
            .filter(|e| seen.insert(e.tracer.name().to_string()))
            .map(|e| e.tracer.clone())
            .collect();
        Ok(Simulation {
            base: self.opts.base,
            engine: self.engine,
            elements: self.elements,
            ports: self.ports,
            tracers,
            dbs: self.dbs,
            sink,
            sampling_period,
            registry: self.registry,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Clean,
    Deadlock,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StuckBuffer {
    pub buffer: String,
    pub level: usize,
    pub capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Leftover {
    pub element: String,
    pub detail: String,
}

/// How the run ended. A deadlock is an exhausted event queue with messages
/// still buffered or in flight. Unfinished component work is listed either
/// way.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub status: Status,
    pub stuck_buffers: Vec<StuckBuffer>,
    pub leftovers: Vec<Leftover>,
}

pub struct Simulation {
    base: TimeBase,
    engine: Engine,
    elements: Vec<Element>,
    ports: Vec<Arc<Port>>,
    tracers: Vec<Arc<dyn Tracer>>,
    dbs: Vec<Arc<DbTracer>>,
    sink: Option<Arc<SampleSink>>,
    sampling_period: Option<u64>,
    registry: Option<Arc<TaskRegistry>>,
}

impl Simulation {
    pub fn base(&self) -> TimeBase {
        self.base
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }

    pub fn ports(&self) -> &[Arc<Port>] {
        &self.ports
    }

    pub fn port(&self, name: &str) -> Option<&Arc<Port>> {
        self.ports.iter().find(|p| p.name() == name)
    }

    pub fn registry(&self) -> Option<&Arc<TaskRegistry>> {
        self.registry.as_ref()
    }

    pub fn sampling_period(&self) -> Option<u64> {
        self.sampling_period
    }

    pub fn sink(&self) -> Option<&Arc<SampleSink>> {
        self.sink.as_ref()
    }

    /// Runs until the engine stops on its own or faults. Pauses requested
    /// through the engine's control block until a resume arrives.
    pub fn run(&mut self, mode: EngineMode) -> Result<VTime, SimError> {
        loop {
            let t = self.run_once(mode)?;
            if self.engine.state() != EngineState::Paused {
                return Ok(t);
            }
            self.engine.control().wait_for_resume();
            self.engine.resume()?;
        }
    }

    /// A single engine call; returns early when paused.
    pub fn run_once(&mut self, mode: EngineMode) -> Result<VTime, SimError> {
        match mode {
            EngineMode::Serial => self.engine.run(),
            EngineMode::Parallel { workers } => self.engine.run_parallel(workers),
        }
    }

    /// Flushes sampled metrics and trace files.
    pub fn finalize(&self) -> Result<(), SimError> {
        if let Some(s) = &self.sink {
            s.flush()?;
        }
        for db in &self.dbs {
            db.finalize()?;
        }
        Ok(())
    }

    pub fn tick_counts(&self) -> TickCounts {
        let mut c = TickCounts::default();
        for e in &self.elements {
            c += e.handle.counts();
        }
        c
    }

    pub fn messages_delivered(&self) -> u64 {
        self.elements
            .iter()
            .filter_map(|e| e.link.as_ref())
            .map(|l| l.delivered())
            .sum()
    }

    /// FIFO violations over all audited ports.
    pub fn fifo_violations(&self) -> u64 {
        self.ports.iter().filter_map(|p| p.fifo_violations()).sum()
    }

    pub fn outcome(&self) -> Outcome {
        let mut stuck = Vec::new();
        for p in &self.ports {
            for b in [p.incoming(), p.outgoing()] {
                if !b.is_empty() {
                    stuck.push(StuckBuffer {
                        buffer: b.name().to_string(),
                        level: b.len(),
                        capacity: b.capacity(),
                    });
                }
            }
        }
        let mut leftovers = Vec::new();
        for e in &self.elements {
            for detail in e.slot.with(|h| h.leftovers()) {
                leftovers.push(Leftover {
                    element: e.name.clone(),
                    detail,
                });
            }
        }
        let in_flight: usize = self
            .elements
            .iter()
            .filter_map(|e| e.link.as_ref())
            .map(|l| l.in_flight())
            .sum();
        let status = if stuck.is_empty() && in_flight == 0 {
            Status::Clean
        } else {
            Status::Deadlock
        };
        Outcome {
            status,
            stuck_buffers: stuck,
            leftovers,
        }
    }

    /// Deterministic run results: identical for every engine mode, worker
    /// count and ticking mode of the same model.
    pub fn metrics(&self) -> Value {
        let now = self.engine.now();
        let mut components = Map::new();
        for e in &self.elements {
            let mut m = Map::new();
            m.insert("kind".into(), json!(e.kind));
            for (k, v) in e.slot.with(|h| h.counters()) {
                m.insert(k.into(), json!(v));
            }
            components.insert(e.name.clone(), Value::Object(m));
        }
        let mut ports = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let period = self.sampling_period.unwrap_or(0);
        for p in &self.ports {
            ports.insert(p.name().to_string(), json!(p.counters()));
            for b in [p.incoming(), p.outgoing()] {
                buffers.insert(
                    b.name().to_string(),
                    json!({
                        "capacity": b.capacity(),
                        "final_level": b.len(),
                        "max_level": b.high_watermark(),
                        "avg_level": b.average_level(),
                        "time_at_full_ticks": b.full_samples() * period,
                        "total_pushed": b.total_pushed(),
                    }),
                );
            }
        }
        let mut tracers = Map::new();
        for t in &self.tracers {
            tracers.insert(t.name().to_string(), t.report(self.base.base_hz()));
        }
        json!({
            "final_vtime_ticks": now.0,
            "final_vtime_s": self.base.to_secs(now),
            "messages_delivered": self.messages_delivered(),
            "components": components,
            "ports": ports,
            "buffers": buffers,
            "tracers": tracers,
        })
    }

    /// Read-side view for the monitoring API.
    pub fn hub(&self) -> Arc<MonitorHub> {
        Arc::new(MonitorHub::new(self))
    }
}
