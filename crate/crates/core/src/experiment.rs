//! Running an experiment described by a config and writing its outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::{Attach, AttachScope, ExperimentConfig, ModelParams, TracerKind};
use crate::error::{FaultReport, SimError};
use crate::models::{CacheStub, MemBank, PingAgent, TrafficGenerator};
use crate::monitor::MonitorHub;
use crate::sampler::SampleSink;
use crate::sim::{EngineKind, EngineMode, Outcome, SimBuilder, SimOptions, Simulation, Status};
use crate::ticking::{Component, TickMode};
use crate::time::Freq;
use crate::trace::{
    AverageTimeTracer, BusyTimeTracer, DbTracer, TagCountTracer, TotalTimeTracer, Tracer,
};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Command-line settings that take precedence over the config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub engine: Option<EngineKind>,
    pub workers: Option<usize>,
    pub ticking: Option<TickMode>,
    /// Also enables the monitor.
    pub monitor_port: Option<u16>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(e) = o.engine {
            self.engine.mode = e;
        }
        if let Some(w) = o.workers {
            self.engine.workers = w;
        }
        if let Some(t) = o.ticking {
            self.ticking.mode = t.into();
        }
        if let Some(p) = o.monitor_port {
            self.monitor.enabled = true;
            self.monitor.port = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
    }
}

/// How the process was started, for the run record.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub command_line: Vec<String>,
    pub working_directory: PathBuf,
}

impl Invocation {
    pub fn current() -> Invocation {
        Invocation {
            command_line: std::env::args().collect(),
            working_directory: std::env::current_dir().unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub summary: PathBuf,
    pub metrics: PathBuf,
    pub trace: Option<PathBuf>,
}

pub enum RunStatus {
    Clean,
    Deadlock,
    Fault(Box<FaultReport>),
}

pub struct RunReport {
    pub status: RunStatus,
    pub outcome: Outcome,
    pub final_vtime_ticks: u64,
    pub outputs: OutputPaths,
    pub summary: Value,
}

impl RunReport {
    /// 0 clean, 2 deadlock, 1 fault.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Clean => 0,
            RunStatus::Deadlock => 2,
            RunStatus::Fault(_) => 1,
        }
    }
}

/// A built, not yet run, experiment.
pub struct Experiment {
    config: ExperimentConfig,
    sim: Simulation,
    outputs: OutputPaths,
    sink: Arc<SampleSink>,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn tracer_for(
    kind: TracerKind,
    name: String,
    cfg: &crate::config::TracerConfig,
) -> Arc<dyn Tracer> {
    let filter = cfg.filter.clone();
    match kind {
        TracerKind::TotalTime => Arc::new(TotalTimeTracer::new(name, filter)),
        TracerKind::AverageTime => Arc::new(AverageTimeTracer::new(name, filter)),
        TracerKind::BusyTime => Arc::new(BusyTimeTracer::new(name, filter)),
        TracerKind::TagCount => Arc::new(TagCountTracer::new(
            name,
            cfg.tag.clone().unwrap_or_default(),
        )),
        TracerKind::Db => unreachable!("db tracers are built separately"),
    }
}

impl Experiment {
    /// Validates `config` and builds the simulation. Output files are
    /// created under `out_dir`.
    pub fn prepare(config: ExperimentConfig, out_dir: &Path) -> Result<Experiment, SimError> {
        let params = config.validate()?;
        let base = config.time_base()?;
        std::fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir.display(), e))?;
        let outputs = OutputPaths {
            summary: resolve(out_dir, &config.outputs.summary),
            metrics: resolve(out_dir, &config.outputs.metrics),
            trace: config
                .outputs
                .trace
                .as_ref()
                .map(|t| resolve(out_dir, &t.path)),
        };

        let opts = SimOptions {
            base,
            ticking: config.ticking.mode.into(),
            overrides: config.ticking.overrides.clone().into_iter().collect(),
            registry: config
                .tracing
                .backtrace
                .then_some(config.tracing.retained_tasks),
            audit: config.audit,
        };
        let mut b = SimBuilder::new(opts);
        if config.monitor.enabled && config.monitor.linger_ms > 0 {
            b.engine_mut()
                .set_linger(Some(Duration::from_millis(config.monitor.linger_ms)));
        }

        let component_names: Vec<String> =
            config.components.iter().map(|c| c.name.clone()).collect();
        let mut have_db = false;
        for (i, t) in config.tracers.iter().enumerate() {
            let name = config.tracer_name(i);
            if t.kind == TracerKind::Db {
                let out = config.outputs.trace.as_ref().unwrap();
                let db = DbTracer::create(
                    name,
                    outputs.trace.as_ref().unwrap(),
                    out.format,
                    base.base_hz(),
                )?;
                let targets = match &t.attach {
                    Attach::Only(list) => Some(list.clone()),
                    _ => None,
                };
                b.add_db_tracer(Arc::new(db), targets);
                have_db = true;
                continue;
            }
            match &t.attach {
                Attach::Scope(AttachScope::All) => b.add_tracer(tracer_for(t.kind, name, t), None),
                Attach::Only(list) => b.add_tracer(tracer_for(t.kind, name, t), Some(list.clone())),
                Attach::Scope(AttachScope::Each) => {
                    for c in &component_names {
                        b.add_tracer(
                            tracer_for(t.kind, format!("{name}@{c}"), t),
                            Some(vec![c.clone()]),
                        );
                    }
                }
            }
        }
        if let (Some(out), false) = (&config.outputs.trace, have_db) {
            let db = DbTracer::create(
                "trace",
                outputs.trace.as_ref().unwrap(),
                out.format,
                base.base_hz(),
            )?;
            b.add_db_tracer(Arc::new(db), None);
        }

        let sink = SampleSink::csv(&outputs.metrics)?;
        if config.sampling.enabled {
            let period = base.ns_to_ticks(config.sampling.period_ns).unwrap();
            b.sample_into(period, sink.clone());
        }

        for (c, p) in config.components.iter().zip(&params) {
            let cap = c.buffer_capacity.unwrap_or(config.default_buffer_capacity);
            for port in p.port_names(&c.name) {
                b.port(&port, cap, cap)?;
            }
        }
        let id = |b: &SimBuilder, name: &str| b.port_id(name).expect("validated port");
        for (c, p) in config.components.iter().zip(&params) {
            let ins = b.instrument(&c.name);
            let own = || b.port_by_name(&format!("{}.Port", c.name)).unwrap().clone();
            let model: Box<dyn Component> = match p {
                ModelParams::Ping(pp) => {
                    let mut builder = PingAgent::builder()
                        .role(pp.role)
                        .pings(pp.pings)
                        .drain(pp.drain)
                        .size_bytes(pp.size_bytes)
                        .compute_cost(pp.compute_cost);
                    if let Some(peer) = &pp.peer {
                        builder = builder.peer(id(&b, peer));
                    }
                    Box::new(builder.build(own(), ins))
                }
                ModelParams::Generator(g) => Box::new(
                    TrafficGenerator::builder()
                        .pattern(g.pattern.clone())
                        .total_requests(g.total_requests)
                        .destinations(g.destinations.iter().map(|d| id(&b, d)).collect())
                        .payload_bytes(g.payload_bytes)
                        .max_outstanding(g.max_outstanding)
                        .compute_cost(g.compute_cost)
                        .seed(config.component_seed(&c.name))
                        .build(own(), ins),
                ),
                ModelParams::Cache(cp) => {
                    let top = b.port_by_name(&format!("{}.Top", c.name)).unwrap().clone();
                    let bottom = b
                        .port_by_name(&format!("{}.Bottom", c.name))
                        .unwrap()
                        .clone();
                    Box::new(
                        CacheStub::builder()
                            .hit_latency_cycles(cp.hit_latency_cycles)
                            .pattern(cp.pattern)
                            .downstream(id(&b, &cp.downstream))
                            .response_bytes(cp.response_bytes)
                            .compute_cost(cp.compute_cost)
                            .build(top, bottom, ins),
                    )
                }
                ModelParams::Bank(bp) => Box::new(
                    MemBank::builder()
                        .latency_cycles(bp.latency_cycles)
                        .max_in_flight(bp.max_in_flight)
                        .response_bytes(bp.response_bytes)
                        .fault_on_request(bp.fault_on_request)
                        .compute_cost(bp.compute_cost)
                        .build(own(), ins),
                ),
            };
            b.add_component(&c.name, Freq(c.freq_hz), model)?;
        }
        for conn in &config.connections {
            let ports: Vec<&str> = conn.ports.iter().map(String::as_str).collect();
            b.connect(&conn.name, Freq(conn.freq_hz), conn.latency_cycles, &ports)?;
        }
        let sim = b.build()?;
        Ok(Experiment {
            config,
            sim,
            outputs,
            sink,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn simulation_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn outputs(&self) -> &OutputPaths {
        &self.outputs
    }

    pub fn hub(&self) -> Arc<MonitorHub> {
        self.sim.hub()
    }

    pub fn engine_mode(&self) -> EngineMode {
        self.config.engine.engine_mode()
    }

    /// Runs to completion and writes summary, metrics and trace files.
    /// Faults are reported through the returned status, not as errors.
    pub fn execute(mut self, invocation: &Invocation) -> Result<RunReport, SimError> {
        let mode = self.engine_mode();
        let start = unix_now();
        let wall = std::time::Instant::now();
        let result = self.sim.run(mode);
        let wall_seconds = wall.elapsed().as_secs_f64();
        let end = unix_now();
        let fault = match result {
            Ok(_) => None,
            Err(SimError::Fault(report)) => Some(report),
            Err(e) => return Err(e),
        };
        self.sink.flush()?;
        self.sim.finalize()?;

        let outcome = self.sim.outcome();
        let final_vtime = self.sim.engine().now().0;
        let outcome_json = match &fault {
            Some(f) => json!({
                "status": "fault",
                "fault": {
                    "handler": f.handler,
                    "time_ticks": f.time.0,
                    "message": f.message,
                    "frames": f.frames,
                },
                "stuck_buffers": outcome.stuck_buffers,
                "leftovers": outcome.leftovers,
            }),
            None => json!(outcome),
        };
        let ticks = self.sim.tick_counts();
        let run = json!({
            "command_line": invocation.command_line.join(" "),
            "working_directory": invocation.working_directory.display().to_string(),
            "start_unix_s": start,
            "end_unix_s": end,
            "wall_seconds": wall_seconds,
            "engine_mode": mode.kind(),
            "workers": mode.workers(),
            "ticking_mode": TickMode::from(self.config.ticking.mode),
            "seed": self.config.seed,
            "final_vtime_ticks": final_vtime,
            "messages_delivered": self.sim.messages_delivered(),
            "events_dispatched": self.sim.engine().progress().events(),
            "ticks_executed": ticks.ticks,
            "wasted_ticks": ticks.wasted,
            "stray_progress_ticks": ticks.stray_progress,
            "rule4_violations": ticks.rule4_violations,
            "fifo_violations": self.sim.fifo_violations(),
            "outputs": {
                "summary": self.outputs.summary.display().to_string(),
                "metrics": self.outputs.metrics.display().to_string(),
                "trace": self.outputs.trace.as_ref().map(|p| p.display().to_string()),
                "trace_format": self.config.outputs.trace.as_ref().map(|t| t.format),
            },
            "config": self.config,
        });
        let summary = json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "final_vtime_ticks": final_vtime,
            "final_vtime_s": self.sim.base().to_secs(self.sim.engine().now()),
            "outcome": outcome_json,
            "metrics": self.sim.metrics(),
            "run": run,
        });
        let status = match (fault, outcome.status) {
            (Some(f), _) => RunStatus::Fault(f),
            (None, Status::Deadlock) => RunStatus::Deadlock,
            (None, Status::Clean) => RunStatus::Clean,
        };
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&self.outputs.summary, text + "\n")
            .map_err(|e| SimError::io(self.outputs.summary.display(), e))?;
        Ok(RunReport {
            status,
            outcome,
            final_vtime_ticks: final_vtime,
            outputs: self.outputs,
            summary,
        })
    }
}

/// Loads, prepares and runs `config_path` in one go.
pub fn run_config(
    config_path: &Path,
    overrides: &Overrides,
    out_dir: &Path,
) -> Result<RunReport, SimError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    cfg.apply(overrides);
    Experiment::prepare(cfg, out_dir)?.execute(&Invocation::current())
}
