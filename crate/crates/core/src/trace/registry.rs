use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use dashmap::DashMap;
use rustc_hash::{FxBuildHasher, FxHashMap};

use super::{Frame, Task, TaskId, Text};
use crate::error::TraceError;
use crate::time::VTime;

/// Ended tasks kept around so a long-lived child can still name its parent.
pub const DEFAULT_RETAINED: usize = 64 * 1024;

const MAX_DEPTH: usize = 4096;

#[derive(Clone)]
struct Entry {
    parent: Option<TaskId>,
    location: Arc<str>,
    category: Text,
    action: Text,
    start: VTime,
}

impl Entry {
    fn frame(&self, id: &TaskId) -> Frame {
        Frame {
            id: id.to_string(),
            location: self.location.to_string(),
            category: self.category.to_string(),
            action: self.action.to_string(),
            start: self.start,
        }
    }
}

struct Retained {
    map: FxHashMap<TaskId, Entry>,
    order: VecDeque<TaskId>,
    cap: usize,
}

/// Process-wide view of in-flight tasks plus a bounded ring of recently
/// ended ones. Shared by every component; internally synchronized.
pub struct TaskRegistry {
    in_flight: DashMap<TaskId, Entry, FxBuildHasher>,
    retained: Mutex<Retained>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        TaskRegistry::with_capacity(DEFAULT_RETAINED)
    }
}

impl TaskRegistry {
    pub fn with_capacity(retained: usize) -> TaskRegistry {
        TaskRegistry {
            in_flight: DashMap::with_hasher(FxBuildHasher),
            retained: Mutex::new(Retained {
                map: FxHashMap::default(),
                order: VecDeque::new(),
                cap: retained,
            }),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub(crate) fn register(&self, task: &Task) -> Result<(), TraceError> {
        use dashmap::mapref::entry::Entry as MapEntry;
        match self.in_flight.entry(task.id.clone()) {
            MapEntry::Occupied(_) => Err(TraceError::DuplicateTask(task.id.to_string())),
            MapEntry::Vacant(v) => {
                v.insert(Entry {
                    parent: task.parent_id.clone(),
                    location: task.location.clone(),
                    category: task.category.clone(),
                    action: task.action.clone(),
                    start: task.start,
                });
                Ok(())
            }
        }
    }

    pub(crate) fn retire(&self, id: &TaskId) {
        let Some((id, entry)) = self.in_flight.remove(id) else {
            return;
        };
        let mut r = self.retained.lock().unwrap();
        if r.cap == 0 {
            return;
        }
        r.order.push_back(id.clone());
        r.map.insert(id, entry);
        while r.order.len() > r.cap {
            if let Some(old) = r.order.pop_front() {
                r.map.remove(&old);
            }
        }
    }

    fn lookup(&self, id: &TaskId) -> Option<Entry> {
        if let Some(e) = self.in_flight.get(id) {
            return Some(e.clone());
        }
        self.retained.lock().unwrap().map.get(id).cloned()
    }

    /// Walks the parent chain of `id`. Frames are returned root first. An id
    /// that cannot be resolved yields an "unknown task" frame; this never
    /// fails, since it runs while a fault is being reported.
    pub fn backtrace(&self, id: &TaskId) -> Vec<Frame> {
        let mut frames = Vec::new();
        let mut cursor = Some(id.clone());
        while let Some(cur) = cursor.take() {
            if frames.len() >= MAX_DEPTH {
                break;
            }
            match self.lookup(&cur) {
                Some(entry) => {
                    frames.push(entry.frame(&cur));
                    cursor = entry.parent;
                }
                None => frames.push(Frame::unknown(&cur)),
            }
        }
        frames.reverse();
        frames
    }
}
