//! Experiment configuration.
//!
//! Configs are JSON. Unknown keys are rejected everywhere, and every error
//! names the offending key path, e.g. `components[2].params.pattern.rate`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::SimError;
use crate::models::{HitPattern, Pattern, PingRole};
use crate::sim::{EngineKind, EngineMode, DEFAULT_BUFFER_CAPACITY};
use crate::ticking::TickMode;
use crate::time::{Freq, TimeBase, DEFAULT_BASE_HZ};
use crate::trace::{TaskFilter, TraceFormat};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SAMPLING_PERIOD_NS: u64 = 1000;
pub const DEFAULT_RETAINED_TASKS: usize = 65_536;

pub const KINDS: [&str; 4] = ["ping_agent", "traffic_generator", "cache_stub", "mem_bank"];

fn default_base() -> u64 {
    DEFAULT_BASE_HZ
}

fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default = "default_base")]
    pub base_frequency_hz: u64,
    #[serde(default)]
    pub seed: u64,
    /// Capacity of every buffer without its own setting.
    #[serde(default = "default_capacity")]
    pub default_buffer_capacity: usize,
    pub components: Vec<ComponentConfig>,
    #[serde(default)]
    pub connections: Vec<ConnectionConfig>,
    #[serde(default)]
    pub ticking: TickingConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub tracers: Vec<TracerConfig>,
    #[serde(default)]
    pub tracing: TracingConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    /// Check per-source FIFO order on every retrieve.
    #[serde(default)]
    pub audit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub name: String,
    pub kind: String,
    pub freq_hz: u64,
    /// Capacity of the component's port buffers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionConfig {
    pub name: String,
    pub freq_hz: u64,
    #[serde(default)]
    pub latency_cycles: u64,
    pub ports: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TickingConfig {
    #[serde(default)]
    pub mode: TickModeConfig,
    #[serde(default)]
    pub overrides: BTreeMap<String, TickMode>,
}

/// `TickMode` with a config-side default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TickModeConfig {
    #[default]
    Smart,
    Always,
}

impl From<TickModeConfig> for TickMode {
    fn from(m: TickModeConfig) -> TickMode {
        match m {
            TickModeConfig::Smart => TickMode::Smart,
            TickModeConfig::Always => TickMode::Always,
        }
    }
}

impl From<TickMode> for TickModeConfig {
    fn from(m: TickMode) -> TickModeConfig {
        match m {
            TickMode::Smart => TickModeConfig::Smart,
            TickMode::Always => TickModeConfig::Always,
        }
    }
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub mode: EngineKind,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: EngineKind::Serial,
            workers: 1,
        }
    }
}

impl EngineConfig {
    pub fn engine_mode(&self) -> EngineMode {
        match self.mode {
            EngineKind::Serial => EngineMode::Serial,
            EngineKind::Parallel => EngineMode::Parallel {
                workers: self.workers,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracerKind {
    TotalTime,
    AverageTime,
    BusyTime,
    TagCount,
    Db,
}

/// Which components a tracer observes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Attach {
    /// `"all"`: one tracer shared by every component, or `"each"`: a
    /// separate tracer per component, named `<tracer>@<component>`.
    Scope(AttachScope),
    Only(Vec<String>),
}

impl Default for Attach {
    fn default() -> Self {
        Attach::Scope(AttachScope::All)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachScope {
    All,
    Each,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: TracerKind,
    #[serde(default)]
    pub filter: TaskFilter,
    /// Tag counted by a `tag_count` tracer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default)]
    pub attach: Attach,
}

fn default_retained() -> usize {
    DEFAULT_RETAINED_TASKS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracingConfig {
    /// Keep the task registry that architectural backtraces are built from.
    #[serde(default = "default_true")]
    pub backtrace: bool,
    #[serde(default = "default_retained")]
    pub retained_tasks: usize,
}

impl Default for TracingConfig {
    fn default() -> Self {
        TracingConfig {
            backtrace: true,
            retained_tasks: DEFAULT_RETAINED_TASKS,
        }
    }
}

fn default_period_ns() -> u64 {
    DEFAULT_SAMPLING_PERIOD_NS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_period_ns")]
    pub period_ns: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            enabled: true,
            period_ns: DEFAULT_SAMPLING_PERIOD_NS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceOutput {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: TraceFormat,
}

fn default_format() -> TraceFormat {
    TraceFormat::Csv
}

fn default_metrics() -> PathBuf {
    "metrics.csv".into()
}

fn default_summary() -> PathBuf {
    "summary.json".into()
}

/// Output paths, relative to the output directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceOutput>,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    #[serde(default = "default_summary")]
    pub summary: PathBuf,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig {
            trace: None,
            metrics: default_metrics(),
            summary: default_summary(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default)]
    pub enabled: bool,
    /// TCP port; 0 picks a free one.
    #[serde(default)]
    pub port: u16,
    /// Keep the engine alive this long after it runs out of work, so the
    /// run can still be inspected and force-ticked.
    #[serde(default)]
    pub linger_ms: u64,
    /// Directory of static dashboard assets to serve at `/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
}

fn default_pings() -> u64 {
    1
}

fn default_ping_size() -> u32 {
    8
}

fn default_bytes() -> u32 {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PingParams {
    pub role: PingRole,
    #[serde(default = "default_pings")]
    pub pings: u64,
    /// Peer port; required for an initiator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default = "default_true")]
    pub drain: bool,
    #[serde(default = "default_ping_size")]
    pub size_bytes: u32,
    #[serde(default)]
    pub compute_cost: u32,
}

fn default_outstanding() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub pattern: Pattern,
    pub total_requests: u64,
    pub destinations: Vec<String>,
    #[serde(default = "default_bytes")]
    pub payload_bytes: u32,
    #[serde(default = "default_outstanding")]
    pub max_outstanding: usize,
    #[serde(default)]
    pub compute_cost: u32,
}

fn default_hit_latency() -> u64 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheParams {
    #[serde(default = "default_hit_latency")]
    pub hit_latency_cycles: u64,
    #[serde(default)]
    pub pattern: HitPattern,
    pub downstream: String,
    #[serde(default = "default_bytes")]
    pub response_bytes: u32,
    #[serde(default)]
    pub compute_cost: u32,
}

fn default_bank_latency() -> u64 {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankParams {
    #[serde(default = "default_bank_latency")]
    pub latency_cycles: u64,
    #[serde(default = "default_outstanding")]
    pub max_in_flight: usize,
    #[serde(default = "default_bytes")]
    pub response_bytes: u32,
    /// Fail when admitting this request (1-based).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_on_request: Option<u64>,
    #[serde(default)]
    pub compute_cost: u32,
}

/// Parsed and validated parameters of one component.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Ping(PingParams),
    Generator(GeneratorParams),
    Cache(CacheParams),
    Bank(BankParams),
}

impl ModelParams {
    /// Port names the component declares, in declaration order.
    pub fn port_names(&self, component: &str) -> Vec<String> {
        match self {
            ModelParams::Cache(_) => {
                vec![format!("{component}.Top"), format!("{component}.Bottom")]
            }
            _ => vec![format!("{component}.Port")],
        }
    }
}

fn err(key: impl Into<String>, message: impl Into<String>) -> SimError {
    SimError::config(key, message)
}

fn parse_params<T: DeserializeOwned>(value: &Value, prefix: &str) -> Result<T, SimError> {
    let value = if value.is_null() {
        Value::Object(Default::default())
    } else {
        value.clone()
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." {
            prefix.to_string()
        } else {
            format!("{prefix}.{path}")
        };
        err(key, e.into_inner().to_string())
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, SimError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            err(key, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path.display(), e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn time_base(&self) -> Result<TimeBase, SimError> {
        TimeBase::new(self.base_frequency_hz).map_err(|e| err("base_frequency_hz", e.to_string()))
    }

    /// Per-component RNG seed.
    pub fn component_seed(&self, name: &str) -> u64 {
        self.seed ^ fnv1a(name)
    }

    /// Checks everything that can be checked without building, and returns
    /// the parsed parameters of each component.
    pub fn validate(&self) -> Result<Vec<ModelParams>, SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        let base = self.time_base()?;
        if self.default_buffer_capacity == 0 {
            return Err(err("default_buffer_capacity", "must be positive"));
        }
        if self.components.is_empty() {
            return Err(err("components", "at least one component is required"));
        }
        let check_freq = |key: String, hz: u64| -> Result<(), SimError> {
            base.period(Freq(hz))
                .map(|_| ())
                .map_err(|e| err(key, e.to_string()))
        };

        let mut names = HashSet::new();
        let mut params = Vec::with_capacity(self.components.len());
        let mut port_owner: HashMap<String, usize> = HashMap::new();
        for (i, c) in self.components.iter().enumerate() {
            let at = format!("components[{i}]");
            if c.name.is_empty() || c.name.contains(char::is_whitespace) {
                return Err(err(
                    format!("{at}.name"),
                    "names must be non-empty without spaces",
                ));
            }
            if !names.insert(c.name.as_str()) {
                return Err(err(
                    format!("{at}.name"),
                    format!("duplicate name {}", c.name),
                ));
            }
            check_freq(format!("{at}.freq_hz"), c.freq_hz)?;
            if c.buffer_capacity == Some(0) {
                return Err(err(format!("{at}.buffer_capacity"), "must be positive"));
            }
            let pk = format!("{at}.params");
            let p = match c.kind.as_str() {
                "ping_agent" => ModelParams::Ping(parse_params(&c.params, &pk)?),
                "traffic_generator" => {
                    let g: GeneratorParams = parse_params(&c.params, &pk)?;
                    g.pattern
                        .validate()
                        .map_err(|m| err(format!("{pk}.pattern"), m))?;
                    if g.destinations.is_empty() {
                        return Err(err(
                            format!("{pk}.destinations"),
                            "at least one destination",
                        ));
                    }
                    if g.max_outstanding == 0 {
                        return Err(err(format!("{pk}.max_outstanding"), "must be positive"));
                    }
                    ModelParams::Generator(g)
                }
                "cache_stub" => {
                    let cp: CacheParams = parse_params(&c.params, &pk)?;
                    if cp.pattern.hits + cp.pattern.misses == 0 {
                        return Err(err(format!("{pk}.pattern"), "pattern must not be empty"));
                    }
                    ModelParams::Cache(cp)
                }
                "mem_bank" => {
                    let b: BankParams = parse_params(&c.params, &pk)?;
                    if b.max_in_flight == 0 {
                        return Err(err(format!("{pk}.max_in_flight"), "must be positive"));
                    }
                    if b.fault_on_request == Some(0) {
                        return Err(err(
                            format!("{pk}.fault_on_request"),
                            "requests count from 1",
                        ));
                    }
                    ModelParams::Bank(b)
                }
                other => {
                    return Err(err(
                        format!("{at}.kind"),
                        format!("unknown kind {other}; known kinds: {}", KINDS.join(", ")),
                    ))
                }
            };
            for port in p.port_names(&c.name) {
                port_owner.insert(port, i);
            }
            params.push(p);
        }

        // Which connection serves each port.
        let mut served_by: HashMap<&str, usize> = HashMap::new();
        for (i, conn) in self.connections.iter().enumerate() {
            let at = format!("connections[{i}]");
            if !names.insert(conn.name.as_str()) {
                return Err(err(
                    format!("{at}.name"),
                    format!("duplicate name {}", conn.name),
                ));
            }
            check_freq(format!("{at}.freq_hz"), conn.freq_hz)?;
            if conn.ports.len() < 2 {
                return Err(err(
                    format!("{at}.ports"),
                    "a connection needs at least two ports",
                ));
            }
            for (j, p) in conn.ports.iter().enumerate() {
                let key = format!("{at}.ports[{j}]");
                if !port_owner.contains_key(p) {
                    return Err(err(key, format!("unknown port {p}")));
                }
                if let Some(prev) = served_by.insert(p.as_str(), i) {
                    return Err(err(
                        key,
                        format!(
                            "port {p} is already served by {}; each port can only be served by one connection",
                            self.connections[prev].name
                        ),
                    ));
                }
            }
        }
        let mut dangling: Vec<(&String, usize)> = port_owner
            .iter()
            .filter(|(p, _)| !served_by.contains_key(p.as_str()))
            .map(|(p, &i)| (p, i))
            .collect();
        dangling.sort_by_key(|&(p, i)| (i, p.clone()));
        if let Some((p, i)) = dangling.first() {
            return Err(err(
                format!("components[{i}]"),
                format!("port {p} is not connected"),
            ));
        }

        // Destinations must be reachable over the connection serving the
        // sending port.
        let reachable = |from: &str, to: &str| served_by.get(from) == served_by.get(to);
        for (i, (c, p)) in self.components.iter().zip(&params).enumerate() {
            let pk = format!("components[{i}].params");
            let own = format!("{}.Port", c.name);
            match p {
                ModelParams::Ping(pp) => match (&pp.role, &pp.peer) {
                    (PingRole::Initiator, None) => {
                        return Err(err(format!("{pk}.peer"), "an initiator needs a peer port"))
                    }
                    (_, Some(peer)) if !port_owner.contains_key(peer) => {
                        return Err(err(format!("{pk}.peer"), format!("unknown port {peer}")))
                    }
                    (_, Some(peer)) if !reachable(&own, peer) => {
                        return Err(err(
                            format!("{pk}.peer"),
                            format!("{peer} is not reachable from {own}"),
                        ))
                    }
                    _ => {}
                },
                ModelParams::Generator(g) => {
                    for (k, d) in g.destinations.iter().enumerate() {
                        let key = format!("{pk}.destinations[{k}]");
                        if !port_owner.contains_key(d) {
                            return Err(err(key, format!("unknown port {d}")));
                        }
                        if !reachable(&own, d) {
                            return Err(err(key, format!("{d} is not reachable from {own}")));
                        }
                    }
                }
                ModelParams::Cache(cp) => {
                    let bottom = format!("{}.Bottom", c.name);
                    if !port_owner.contains_key(&cp.downstream) {
                        return Err(err(
                            format!("{pk}.downstream"),
                            format!("unknown port {}", cp.downstream),
                        ));
                    }
                    if !reachable(&bottom, &cp.downstream) {
                        return Err(err(
                            format!("{pk}.downstream"),
                            format!("{} is not reachable from {bottom}", cp.downstream),
                        ));
                    }
                }
                ModelParams::Bank(_) => {}
            }
        }

        for name in self.ticking.overrides.keys() {
            if !names.contains(name.as_str()) {
                return Err(err(format!("ticking.overrides.{name}"), "unknown element"));
            }
        }
        if self.engine.workers == 0 {
            return Err(err("engine.workers", "must be at least 1"));
        }
        let mut tracer_names = HashSet::new();
        for (i, t) in self.tracers.iter().enumerate() {
            let at = format!("tracers[{i}]");
            if t.kind == TracerKind::TagCount && t.tag.is_none() {
                return Err(err(format!("{at}.tag"), "a tag_count tracer needs a tag"));
            }
            if t.kind != TracerKind::TagCount && t.tag.is_some() {
                return Err(err(
                    format!("{at}.tag"),
                    "only tag_count tracers take a tag",
                ));
            }
            if t.kind == TracerKind::Db && self.outputs.trace.is_none() {
                return Err(err(format!("{at}.kind"), "a db tracer needs outputs.trace"));
            }
            if let Attach::Only(list) = &t.attach {
                for (j, n) in list.iter().enumerate() {
                    if !self.components.iter().any(|c| &c.name == n) {
                        return Err(err(
                            format!("{at}.attach[{j}]"),
                            format!("unknown component {n}"),
                        ));
                    }
                }
            }
            if !tracer_names.insert(self.tracer_name(i)) {
                return Err(err(format!("{at}.name"), "duplicate tracer name"));
            }
        }
        if self
            .tracers
            .iter()
            .filter(|t| t.kind == TracerKind::Db)
            .count()
            > 1
        {
            return Err(err("tracers", "at most one db tracer"));
        }
        if self.sampling.enabled
            && base
                .ns_to_ticks(self.sampling.period_ns)
                .is_none_or(|t| t == 0)
        {
            return Err(err(
                "sampling.period_ns",
                "must be a positive whole number of ticks",
            ));
        }
        Ok(params)
    }

    /// Default tracer names are `<kind>-<index>`.
    pub fn tracer_name(&self, i: usize) -> String {
        let t = &self.tracers[i];
        t.name.clone().unwrap_or_else(|| {
            let kind = serde_json::to_value(t.kind).unwrap();
            format!("{}-{i}", kind.as_str().unwrap())
        })
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
