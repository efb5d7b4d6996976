use std::backtrace::Backtrace;
use std::fmt;

use thiserror::Error;

use crate::time::VTime;
use crate::trace::{Frame, TaskId};

/// Instrumentation misuse. Always fatal: it signals a model bug.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("task `{0}` was already started")]
    DuplicateTask(String),
    #[error("task `{0}` is not in flight")]
    UnknownTask(String),
    #[error("task `{id}` cannot end at {end} before its start at {start}")]
    EndBeforeStart { id: String, start: u64, end: u64 },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("frequency {freq_hz} Hz does not divide the base frequency {base_hz} Hz")]
    Frequency { freq_hz: u64, base_hz: u64 },
    #[error("event scheduled at {at} is before the current time {now}")]
    PastEvent { at: u64, now: u64 },
    #[error("port `{0}` is already plugged into a connection")]
    DoublePlug(String),
    #[error("port `{0}` is not plugged into any connection")]
    Unplugged(String),
    #[error("destination port {dst} is not reachable through connection `{connection}`")]
    Unreachable { connection: String, dst: u32 },
    #[error("the engine has finished; it cannot be resumed")]
    Terminal,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Fault(Box<FaultReport>),
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> SimError {
        SimError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl fmt::Display, source: std::io::Error) -> SimError {
        SimError::Io {
            path: path.to_string(),
            source,
        }
    }
}

/// An error raised from inside a handler. Carries the task the handler was
/// working on, when it knows one, so the engine can print the architectural
/// backtrace next to the native one.
#[derive(Debug)]
pub struct Fault {
    pub message: String,
    pub task: Option<TaskId>,
    native: Backtrace,
}

impl Fault {
    pub fn new(message: impl Into<String>) -> Fault {
        Fault {
            message: message.into(),
            task: None,
            native: Backtrace::force_capture(),
        }
    }

    pub fn with_task(mut self, task: TaskId) -> Fault {
        self.task = Some(task);
        self
    }

    pub fn native_backtrace(&self) -> String {
        self.native.to_string()
    }
}

impl From<SimError> for Fault {
    fn from(e: SimError) -> Fault {
        Fault::new(e.to_string())
    }
}

impl From<TraceError> for Fault {
    fn from(e: TraceError) -> Fault {
        Fault::new(e.to_string())
    }
}

/// Everything known about a fault once the engine has stopped.
#[derive(Debug, Clone)]
pub struct FaultReport {
    pub time: VTime,
    pub handler: String,
    pub message: String,
    /// Task chain, root first. Empty when the fault named no task.
    pub frames: Vec<Frame>,
    pub native: String,
}

impl FaultReport {
    /// The simulation backtrace alone, one frame per line.
    pub fn render_frames(&self) -> String {
        let mut out = String::new();
        for (depth, frame) in self.frames.iter().enumerate() {
            out.push_str(&format!("  #{depth} {frame}\n"));
        }
        out
    }
}

impl fmt::Display for FaultReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "fault in `{}` at t={}: {}",
            self.handler, self.time, self.message
        )?;
        writeln!(f, "native backtrace:")?;
        writeln!(f, "{}", self.native.trim_end())?;
        writeln!(f, "simulation backtrace (root first):")?;
        if self.frames.is_empty() {
            write!(f, "  <no task context>")
        } else {
            write!(f, "{}", self.render_frames().trim_end())
        }
    }
}
