//! Periodic metrics sampling.
//!
//! The sampler is an exclusive handler: at each sample time it runs after
//! every ordinary event at that time, so it reads a settled state and the
//! output does not depend on the engine mode. It does not keep a run alive.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Fault, SimError};
use crate::event::{Event, EventCtx, EventKind, Handler};
use crate::messaging::{Port, PortCounters};
use crate::time::VTime;

pub const METRICS_HEADER: [&str; 4] = ["time_ticks", "target", "kind", "value"];

/// One line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub time_ticks: u64,
    pub target: String,
    pub kind: String,
    pub value: u64,
}

enum Sink {
    Csv(Box<csv::Writer<BufWriter<File>>>),
    Memory(Vec<SampleRow>),
}

/// Where samples go. Shared between the sampler and the run driver, which
/// flushes it at the end.
pub struct SampleSink {
    path: Option<PathBuf>,
    inner: Mutex<Sink>,
}

impl SampleSink {
    pub fn csv(path: &Path) -> Result<Arc<SampleSink>, SimError> {
        let file = File::create(path).map_err(|e| SimError::io(path.display(), e))?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        w.write_record(METRICS_HEADER)
            .map_err(|e| SimError::io(path.display(), e.into()))?;
        Ok(Arc::new(SampleSink {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(Sink::Csv(Box::new(w))),
        }))
    }

    pub fn memory() -> Arc<SampleSink> {
        Arc::new(SampleSink {
            path: None,
            inner: Mutex::new(Sink::Memory(Vec::new())),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn write(&self, row: SampleRow) -> Result<(), String> {
        match &mut *self.inner.lock().unwrap() {
            Sink::Csv(w) => w
                .serialize(&row)
                .map_err(|e| format!("writing {}: {e}", self.path.as_ref().unwrap().display())),
            Sink::Memory(rows) => {
                rows.push(row);
                Ok(())
            }
        }
    }

    /// Rows held in memory; empty for a file sink.
    pub fn rows(&self) -> Vec<SampleRow> {
        match &*self.inner.lock().unwrap() {
            Sink::Memory(rows) => rows.clone(),
            Sink::Csv(_) => Vec::new(),
        }
    }

    pub fn flush(&self) -> Result<(), SimError> {
        if let Sink::Csv(w) = &mut *self.inner.lock().unwrap() {
            let path = self.path.as_ref().unwrap();
            w.flush().map_err(|e| SimError::io(path.display(), e))?;
        }
        Ok(())
    }
}

/// Samples every port's buffer levels and traffic every `period` ticks.
///
/// Per port and sample, in port order: `buffer_level` of `<port>.in` and
/// `<port>.out`, then the increments since the previous sample of
/// `port_in_bytes`, `port_out_bytes`, `port_in_msgs` and `port_out_msgs`.
pub struct Sampler {
    period: u64,
    ports: Vec<Arc<Port>>,
    last: Vec<PortCounters>,
    sink: Arc<SampleSink>,
    samples: u64,
}

impl Sampler {
    pub fn new(period_ticks: u64, ports: Vec<Arc<Port>>, sink: Arc<SampleSink>) -> Sampler {
        assert!(period_ticks > 0, "sampling period must be positive");
        let last = vec![PortCounters::default(); ports.len()];
        Sampler {
            period: period_ticks,
            ports,
            last,
            sink,
            samples: 0,
        }
    }

    /// The first sample time.
    pub fn first_event(&self, handler: crate::event::HandlerId) -> Event {
        Event::new(VTime(self.period), handler, EventKind::Sampler)
    }

    fn sample(&mut self, now: VTime) -> Result<(), String> {
        let t = now.0;
        for (port, last) in self.ports.iter().zip(self.last.iter_mut()) {
            let inc = port.incoming().record_sample();
            let out = port.outgoing().record_sample();
            let c = port.counters();
            let rows = [
                (port.incoming().name(), "buffer_level", inc as u64),
                (port.outgoing().name(), "buffer_level", out as u64),
                (port.name(), "port_in_bytes", c.in_bytes - last.in_bytes),
                (port.name(), "port_out_bytes", c.out_bytes - last.out_bytes),
                (port.name(), "port_in_msgs", c.in_msgs - last.in_msgs),
                (port.name(), "port_out_msgs", c.out_msgs - last.out_msgs),
            ];
            for (target, kind, value) in rows {
                self.sink.write(SampleRow {
                    time_ticks: t,
                    target: target.to_string(),
                    kind: kind.to_string(),
                    value,
                })?;
            }
            *last = c;
        }
        self.samples += 1;
        Ok(())
    }
}

impl Handler for Sampler {
    fn name(&self) -> &str {
        "sampler"
    }

    fn kind(&self) -> &str {
        "sampler"
    }

    fn handle(&mut self, ev: &Event, ctx: &EventCtx<'_>) -> Result<(), Fault> {
        self.sample(ev.time).map_err(Fault::new)?;
        ctx.schedule(ev.time + self.period, EventKind::Sampler)
            .map_err(|e| Fault::new(e.to_string()))?;
        Ok(())
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![("samples", self.samples)]
    }
}
