//! Task-based tracing.
//!
//! Models describe what they are doing as *tasks* through an [`Instrument`]
//! and never look at who is listening. Tracers attached to a component see
//! every start, end and tag of that component's tasks. Tasks point at their
//! parent, so a fault can be explained by walking the chain back to the
//! request that caused it.

mod db;
mod registry;
mod tracers;

use std::borrow::Cow;
use std::fmt::{self, Write as _};
use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::TraceError;
use crate::time::VTime;

pub use db::{read_trace, sort_rows, DbTracer, TagStamp, TraceFormat, TraceRow, CSV_HEADER};
pub use registry::{TaskRegistry, DEFAULT_RETAINED};
pub use tracers::{AverageTimeTracer, BusyTimeTracer, TagCountTracer, TaskFilter, TotalTimeTracer};

pub type Text = Cow<'static, str>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(Arc<str>);

impl TaskId {
    pub fn new(id: impl AsRef<str>) -> TaskId {
        TaskId(Arc::from(id.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub parent_id: Option<TaskId>,
    pub category: Text,
    pub action: Text,
    pub location: Arc<str>,
    pub start: VTime,
    pub end: Option<VTime>,
    pub tags: Vec<(Text, VTime)>,
    pub details: Option<serde_json::Value>,
}

impl Task {
    pub fn new(
        id: TaskId,
        category: impl Into<Text>,
        action: impl Into<Text>,
        location: Arc<str>,
        start: VTime,
    ) -> Task {
        Task {
            id,
            parent_id: None,
            category: category.into(),
            action: action.into(),
            location,
            start,
            end: None,
            tags: Vec::new(),
            details: None,
        }
    }

    pub fn with_parent(mut self, parent: Option<TaskId>) -> Task {
        self.parent_id = parent;
        self
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Task {
        self.details = Some(details);
        self
    }

    pub fn duration(&self) -> Option<u64> {
        self.end.map(|e| e.0 - self.start.0)
    }
}

/// Consumer of instrumentation callbacks. A tracer sees tasks but never
/// touches the model that produced them.
pub trait Tracer: Send + Sync {
    fn name(&self) -> &str;

    fn start_task(&self, _task: &Task) {}

    /// `task.end` is set.
    fn end_task(&self, _task: &Task) {}

    fn tag_task(&self, _task: &Task, _tag: &str, _time: VTime) {}

    /// Aggregate result for the run summary.
    fn report(&self, base_hz: u64) -> serde_json::Value;
}

/// One line of an architectural backtrace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Frame {
    pub id: String,
    pub location: String,
    pub category: String,
    pub action: String,
    pub start: VTime,
}

impl Frame {
    pub fn unknown(id: &TaskId) -> Frame {
        Frame {
            id: id.to_string(),
            location: "?".into(),
            category: "unknown task".into(),
            action: "?".into(),
            start: VTime::ZERO,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.category == "unknown task"
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} task={} start={}",
            self.location, self.category, self.action, self.id, self.start
        )
    }
}

/// Per-component instrumentation handle. Owned by the component and only
/// called from its handler.
pub struct Instrument {
    location: Arc<str>,
    prefix: Arc<str>,
    tracers: Vec<Arc<dyn Tracer>>,
    registry: Option<Arc<TaskRegistry>>,
    open: FxHashMap<TaskId, Task>,
    counter: u64,
    id_buf: String,
}

impl Instrument {
    /// An instrument that records nothing.
    pub fn disabled(location: impl Into<Arc<str>>) -> Instrument {
        let location = location.into();
        Instrument {
            prefix: location.clone(),
            location,
            tracers: Vec::new(),
            registry: None,
            open: FxHashMap::default(),
            counter: 0,
            id_buf: String::new(),
        }
    }

    pub fn new(
        location: impl Into<Arc<str>>,
        tracers: Vec<Arc<dyn Tracer>>,
        registry: Option<Arc<TaskRegistry>>,
    ) -> Instrument {
        let location = location.into();
        Instrument {
            prefix: location.clone(),
            location,
            tracers,
            registry,
            open: FxHashMap::default(),
            counter: 0,
            id_buf: String::new(),
        }
    }

    /// Uses `prefix` instead of the location when generating ids.
    pub fn with_id_prefix(mut self, prefix: &str) -> Instrument {
        self.prefix = Arc::from(prefix);
        self
    }

    pub fn location(&self) -> &Arc<str> {
        &self.location
    }

    /// False when nothing observes this component; callers may then skip
    /// building tasks altogether.
    pub fn enabled(&self) -> bool {
        !self.tracers.is_empty() || self.registry.is_some()
    }

    /// Deterministic `<component>-<n>` id.
    pub fn next_id(&mut self) -> TaskId {
        self.counter += 1;
        self.id_buf.clear();
        let _ = write!(self.id_buf, "{}-{}", self.prefix, self.counter);
        TaskId(Arc::from(self.id_buf.as_str()))
    }

    pub fn in_flight(&self) -> usize {
        self.open.len()
    }

    pub fn start_task(&mut self, task: Task) -> Result<(), TraceError> {
        if !self.enabled() {
            return Ok(());
        }
        if self.open.contains_key(&task.id) {
            return Err(TraceError::DuplicateTask(task.id.to_string()));
        }
        if let Some(reg) = &self.registry {
            reg.register(&task)?;
        }
        for t in &self.tracers {
            t.start_task(&task);
        }
        self.open.insert(task.id.clone(), task);
        Ok(())
    }

    pub fn end_task(&mut self, id: &TaskId, time: VTime) -> Result<(), TraceError> {
        if !self.enabled() {
            return Ok(());
        }
        let Some(task) = self.open.get(id) else {
            return Err(TraceError::UnknownTask(id.to_string()));
        };
        if time < task.start {
            return Err(TraceError::EndBeforeStart {
                id: id.to_string(),
                start: task.start.0,
                end: time.0,
            });
        }
        let mut task = self.open.remove(id).unwrap();
        task.end = Some(time);
        if let Some(reg) = &self.registry {
            reg.retire(id);
        }
        for t in &self.tracers {
            t.end_task(&task);
        }
        Ok(())
    }

    pub fn tag_task(
        &mut self,
        id: &TaskId,
        time: VTime,
        tag: impl Into<Text>,
    ) -> Result<(), TraceError> {
        if !self.enabled() {
            return Ok(());
        }
        let Some(task) = self.open.get_mut(id) else {
            return Err(TraceError::UnknownTask(id.to_string()));
        };
        let tag = tag.into();
        for t in &self.tracers {
            t.tag_task(task, &tag, time);
        }
        task.tags.push((tag, time));
        Ok(())
    }

    /// Task chain of `id`, root first.
    pub fn backtrace(&self, id: &TaskId) -> Vec<Frame> {
        match &self.registry {
            Some(reg) => reg.backtrace(id),
            None => vec![Frame::unknown(id)],
        }
    }
}
