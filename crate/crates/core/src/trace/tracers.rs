use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Task, Tracer};
use crate::time::{TimeBase, VTime};

/// Selects tasks by category and/or action. An empty filter matches all.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

impl TaskFilter {
    pub fn category(c: &str) -> TaskFilter {
        TaskFilter {
            category: Some(c.into()),
            action: None,
        }
    }

    pub fn action(a: &str) -> TaskFilter {
        TaskFilter {
            category: None,
            action: Some(a.into()),
        }
    }

    pub fn matches(&self, task: &Task) -> bool {
        self.category.as_deref().is_none_or(|c| c == task.category)
            && self.action.as_deref().is_none_or(|a| a == task.action)
    }
}

fn ns(base_hz: u64, ticks: u64) -> f64 {
    TimeBase::new(base_hz)
        .map(|b| b.to_ns(ticks))
        .unwrap_or(f64::NAN)
}

#[derive(Default)]
struct Durations {
    total: AtomicU64,
    count: AtomicU64,
}

impl Durations {
    fn add(&self, task: &Task) {
        if let Some(d) = task.duration() {
            self.total.fetch_add(d, Ordering::Relaxed);
            self.count.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Sum of durations of matching completed tasks.
pub struct TotalTimeTracer {
    name: String,
    filter: TaskFilter,
    acc: Durations,
}

impl TotalTimeTracer {
    pub fn new(name: impl Into<String>, filter: TaskFilter) -> Self {
        TotalTimeTracer {
            name: name.into(),
            filter,
            acc: Durations::default(),
        }
    }

    pub fn total(&self) -> u64 {
        self.acc.total.load(Ordering::Relaxed)
    }

    pub fn count(&self) -> u64 {
        self.acc.count.load(Ordering::Relaxed)
    }
}

impl Tracer for TotalTimeTracer {
    fn name(&self) -> &str {
        &self.name
    }

    fn end_task(&self, task: &Task) {
        if self.filter.matches(task) {
            self.acc.add(task);
        }
    }

    fn report(&self, base_hz: u64) -> serde_json::Value {
        json!({
            "kind": "total_time",
            "filter": self.filter,
            "count": self.count(),
            "total_ticks": self.total(),
            "total_ns": ns(base_hz, self.total()),
        })
    }
}

/// Mean duration of matching completed tasks; undefined with no tasks.
pub struct AverageTimeTracer {
    name: String,
    filter: TaskFilter,
    acc: Durations,
}

impl AverageTimeTracer {
    pub fn new(name: impl Into<String>, filter: TaskFilter) -> Self {
        AverageTimeTracer {
            name: name.into(),
            filter,
            acc: Durations::default(),
        }
    }

    pub fn count(&self) -> u64 {
        self.acc.count.load(Ordering::Relaxed)
    }

    /// Average in ticks.
    pub fn average(&self) -> Option<f64> {
        let n = self.count();
        (n > 0).then(|| self.acc.total.load(Ordering::Relaxed) as f64 / n as f64)
    }
}

impl Tracer for AverageTimeTracer {
    fn name(&self) -> &str {
        &self.name
    }

    fn end_task(&self, task: &Task) {
        if self.filter.matches(task) {
            self.acc.add(task);
        }
    }

    fn report(&self, base_hz: u64) -> serde_json::Value {
        let avg = self.average();
        json!({
            "kind": "average_time",
            "filter": self.filter,
            "count": self.count(),
            "average_ticks": avg,
            "average_ns": avg.map(|a| a * 1e9 / base_hz as f64),
        })
    }
}

/// Measure of the union of matching task intervals.
pub struct BusyTimeTracer {
    name: String,
    filter: TaskFilter,
    intervals: Mutex<Vec<(u64, u64)>>,
}

impl BusyTimeTracer {
    pub fn new(name: impl Into<String>, filter: TaskFilter) -> Self {
        BusyTimeTracer {
            name: name.into(),
            filter,
            intervals: Mutex::new(Vec::new()),
        }
    }

    pub fn busy(&self) -> u64 {
        let mut spans = self.intervals.lock().unwrap().clone();
        union_length(&mut spans)
    }
}

/// Total length covered by `spans`. Sorts in place.
pub(crate) fn union_length(spans: &mut [(u64, u64)]) -> u64 {
    spans.sort_unstable();
    let mut busy = 0;
    let mut current: Option<(u64, u64)> = None;
    for &(s, e) in spans.iter() {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                busy += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        busy += ce - cs;
    }
    busy
}

impl Tracer for BusyTimeTracer {
    fn name(&self) -> &str {
        &self.name
    }

    fn end_task(&self, task: &Task) {
        if self.filter.matches(task) {
            if let Some(end) = task.end {
                self.intervals.lock().unwrap().push((task.start.0, end.0));
            }
        }
    }

    fn report(&self, base_hz: u64) -> serde_json::Value {
        let busy = self.busy();
        json!({
            "kind": "busy_time",
            "filter": self.filter,
            "busy_ticks": busy,
            "busy_ns": ns(base_hz, busy),
        })
    }
}

/// Counts occurrences of one tag.
pub struct TagCountTracer {
    name: String,
    tag: String,
    count: AtomicU64,
}

impl TagCountTracer {
    pub fn new(name: impl Into<String>, tag: impl Into<String>) -> Self {
        TagCountTracer {
            name: name.into(),
            tag: tag.into(),
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

impl Tracer for TagCountTracer {
    fn name(&self) -> &str {
        &self.name
    }

    fn tag_task(&self, _task: &Task, tag: &str, _time: VTime) {
        if tag == self.tag {
            self.count.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn report(&self, _base_hz: u64) -> serde_json::Value {
        json!({ "kind": "tag_count", "tag": self.tag, "count": self.count() })
    }
}
