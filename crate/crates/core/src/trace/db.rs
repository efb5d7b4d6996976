use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Task, Tracer};
use crate::error::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Jsonl => "jsonl",
        }
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "id",
    "parent_id",
    "category",
    "action",
    "location",
    "start_ticks",
    "end_ticks",
    "start_s",
    "end_s",
    "tags",
    "details",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagStamp {
    pub tag: String,
    pub ticks: u64,
}

/// One persisted task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: String,
    pub parent_id: String,
    pub category: String,
    pub action: String,
    pub location: String,
    pub start_ticks: u64,
    pub end_ticks: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub tags: Vec<TagStamp>,
    pub details: Option<serde_json::Value>,
}

impl TraceRow {
    pub fn from_task(task: &Task, base_hz: u64) -> TraceRow {
        let end = task.end.unwrap_or(task.start).0;
        TraceRow {
            id: task.id.to_string(),
            parent_id: task
                .parent_id
                .as_ref()
                .map(|p| p.to_string())
                .unwrap_or_default(),
            category: task.category.to_string(),
            action: task.action.to_string(),
            location: task.location.to_string(),
            start_ticks: task.start.0,
            end_ticks: end,
            start_s: task.start.0 as f64 / base_hz as f64,
            end_s: end as f64 / base_hz as f64,
            tags: task
                .tags
                .iter()
                .map(|(t, at)| TagStamp {
                    tag: t.to_string(),
                    ticks: at.0,
                })
                .collect(),
            details: task.details.clone(),
        }
    }

    fn from_csv_record(rec: &csv::StringRecord) -> Result<TraceRow, String> {
        let field = |i: usize| rec.get(i).ok_or_else(|| format!("missing column {i}"));
        let int = |i: usize| -> Result<u64, String> {
            field(i)?.parse().map_err(|e| format!("column {i}: {e}"))
        };
        let float = |i: usize| -> Result<f64, String> {
            field(i)?.parse().map_err(|e| format!("column {i}: {e}"))
        };
        let mut tags = Vec::new();
        for part in field(9)?.split(';').filter(|s| !s.is_empty()) {
            let (tag, at) = part
                .rsplit_once('@')
                .ok_or_else(|| format!("bad tag `{part}`"))?;
            tags.push(TagStamp {
                tag: tag.to_string(),
                ticks: at.parse().map_err(|e| format!("tag `{part}`: {e}"))?,
            });
        }
        let details = match field(10)? {
            "" => None,
            text => Some(serde_json::from_str(text).map_err(|e| e.to_string())?),
        };
        Ok(TraceRow {
            id: field(0)?.to_string(),
            parent_id: field(1)?.to_string(),
            category: field(2)?.to_string(),
            action: field(3)?.to_string(),
            location: field(4)?.to_string(),
            start_ticks: int(5)?,
            end_ticks: int(6)?,
            start_s: float(7)?,
            end_s: float(8)?,
            tags,
            details,
        })
    }
}

#[derive(Serialize)]
struct TagRef<'a> {
    tag: &'a str,
    ticks: u64,
}

/// Borrowed view of a task with the same serialized shape as [`TraceRow`].
#[derive(Serialize)]
struct RowRef<'a> {
    id: &'a str,
    parent_id: &'a str,
    category: &'a str,
    action: &'a str,
    location: &'a str,
    start_ticks: u64,
    end_ticks: u64,
    start_s: f64,
    end_s: f64,
    tags: Vec<TagRef<'a>>,
    details: &'a Option<serde_json::Value>,
}

impl<'a> RowRef<'a> {
    fn new(task: &'a Task, base_hz: u64) -> RowRef<'a> {
        let end = task.end.unwrap_or(task.start).0;
        RowRef {
            id: task.id.as_str(),
            parent_id: task.parent_id.as_ref().map_or("", |p| p.as_str()),
            category: &task.category,
            action: &task.action,
            location: &task.location,
            start_ticks: task.start.0,
            end_ticks: end,
            start_s: task.start.0 as f64 / base_hz as f64,
            end_s: end as f64 / base_hz as f64,
            tags: task
                .tags
                .iter()
                .map(|(t, at)| TagRef {
                    tag: t,
                    ticks: at.0,
                })
                .collect(),
            details: &task.details,
        }
    }

    fn jsonl(&self, out: &mut Vec<u8>) {
        serde_json::to_writer(&mut *out, self).expect("trace rows always serialize");
        out.push(b'\n');
    }

    fn csv(&self, out: &mut Vec<u8>) {
        let tags = self
            .tags
            .iter()
            .map(|t| format!("{}@{}", t.tag, t.ticks))
            .collect::<Vec<_>>()
            .join(";");
        let details = self
            .details
            .as_ref()
            .map(|d| d.to_string())
            .unwrap_or_default();
        let mut w = csv::WriterBuilder::new()
            .buffer_capacity(512)
            .from_writer(out);
        w.write_record([
            self.id,
            self.parent_id,
            self.category,
            self.action,
            self.location,
            &self.start_ticks.to_string(),
            &self.end_ticks.to_string(),
            &self.start_s.to_string(),
            &self.end_s.to_string(),
            &tags,
            &details,
        ])
        .expect("writing to memory");
        w.flush().expect("writing to memory");
    }
}

/// An encoded row waiting for the final sort; `line` indexes the shared
/// byte buffer.
struct Pending {
    start: u64,
    id: super::TaskId,
    line: std::ops::Range<usize>,
}

#[derive(Default)]
struct Rows {
    pending: Vec<Pending>,
    bytes: Vec<u8>,
}

/// Persists every completed task. Rows are encoded as tasks end and written
/// sorted by `(start, id)` when the run is finalized, so the file does not
/// depend on the order in which parallel workers ended tasks.
pub struct DbTracer {
    name: String,
    path: PathBuf,
    format: TraceFormat,
    base_hz: u64,
    rows: Mutex<Rows>,
    written: AtomicUsize,
    file: Mutex<Option<File>>,
}

impl DbTracer {
    /// Creates the output file immediately so an unwritable path fails
    /// before the run starts.
    pub fn create(
        name: impl Into<String>,
        path: impl AsRef<Path>,
        format: TraceFormat,
        base_hz: u64,
    ) -> Result<DbTracer, SimError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| SimError::io(path.display(), e))?;
        Ok(DbTracer {
            name: name.into(),
            path,
            format,
            base_hz,
            rows: Mutex::new(Rows::default()),
            written: AtomicUsize::new(0),
            file: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn format(&self) -> TraceFormat {
        self.format
    }

    /// Tasks recorded so far.
    pub fn len(&self) -> usize {
        self.rows.lock().unwrap().pending.len() + self.written.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the sorted trace. A second call is a no-op.
    pub fn finalize(&self) -> Result<(), SimError> {
        let Some(file) = self.file.lock().unwrap().take() else {
            return Ok(());
        };
        let Rows { mut pending, bytes } = std::mem::take(&mut *self.rows.lock().unwrap());
        pending.sort_unstable_by(|a, b| (a.start, &a.id).cmp(&(b.start, &b.id)));
        let io = |e: std::io::Error| SimError::io(self.path.display(), e);
        let mut w = BufWriter::new(file);
        if self.format == TraceFormat::Csv {
            let mut header = csv::Writer::from_writer(Vec::new());
            header.write_record(CSV_HEADER).map_err(|e| io(e.into()))?;
            w.write_all(&header.into_inner().map_err(|e| io(e.into_error()))?)
                .map_err(io)?;
        }
        for row in &pending {
            w.write_all(&bytes[row.line.clone()]).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.written.store(pending.len(), Ordering::Relaxed);
        Ok(())
    }
}

/// Canonical trace order.
pub fn sort_rows(rows: &mut [TraceRow]) {
    rows.sort_by(|a, b| (a.start_ticks, &a.id).cmp(&(b.start_ticks, &b.id)));
}

impl Tracer for DbTracer {
    fn name(&self) -> &str {
        &self.name
    }

    fn end_task(&self, task: &Task) {
        let row = RowRef::new(task, self.base_hz);
        let mut rows = self.rows.lock().unwrap();
        let rows = &mut *rows;
        let from = rows.bytes.len();
        match self.format {
            TraceFormat::Csv => row.csv(&mut rows.bytes),
            TraceFormat::Jsonl => row.jsonl(&mut rows.bytes),
        }
        rows.pending.push(Pending {
            start: task.start.0,
            id: task.id.clone(),
            line: from..rows.bytes.len(),
        });
    }

    fn report(&self, _base_hz: u64) -> serde_json::Value {
        json!({ "kind": "db", "format": self.format, "tasks": self.len() })
    }
}

/// Reads a trace written by [`DbTracer`], in file order.
pub fn read_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRow>, SimError> {
    let bad = |msg: String| {
        SimError::io(
            path.display(),
            std::io::Error::new(std::io::ErrorKind::InvalidData, msg),
        )
    };
    let file = File::open(path).map_err(|e| SimError::io(path.display(), e))?;
    let mut rows = Vec::new();
    match format {
        TraceFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            for rec in r.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                rows.push(TraceRow::from_csv_record(&rec).map_err(bad)?);
            }
        }
        TraceFormat::Jsonl => {
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| SimError::io(path.display(), e))?;
                if line.is_empty() {
                    continue;
                }
                rows.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::time::{VTime, DEFAULT_BASE_HZ};
    use crate::trace::TaskId;

    fn table_row() -> Task {
        let mut t = Task::new(
            TaskId::new("5C9dX8"),
            "Instruction",
            "Mem Read",
            Arc::from("CPU1.Core1"),
            VTime(145_660_000),
        )
        .with_parent(Some(TaskId::new("7F3sY2")))
        .with_details(json!({"inst": "add"}));
        t.tags.push(("cache hit".into(), VTime(145_661_000)));
        t.end = Some(VTime(145_670_000));
        t
    }

    #[test]
    fn example_row_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let db = DbTracer::create("db", &path, TraceFormat::Csv, DEFAULT_BASE_HZ).unwrap();
        db.end_task(&table_row());
        db.finalize().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let row = lines.next().unwrap();
        assert!(row.starts_with("5C9dX8,7F3sY2,Instruction,Mem Read,CPU1.Core1,145660000,"));
        assert!(row.contains(",0.00014566,"));
        assert!(row.contains("cache hit@145661000"));
        let back = read_trace(&path, TraceFormat::Csv).unwrap();
        assert_eq!(
            back,
            vec![TraceRow::from_task(&table_row(), DEFAULT_BASE_HZ)]
        );
        assert_eq!(back[0].details, Some(json!({"inst": "add"})));
    }

    #[test]
    fn example_row_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let db = DbTracer::create("db", &path, TraceFormat::Jsonl, DEFAULT_BASE_HZ).unwrap();
        db.end_task(&table_row());
        db.finalize().unwrap();
        let back = read_trace(&path, TraceFormat::Jsonl).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].start_s, 0.00014566);
        assert_eq!(back[0].tags[0].tag, "cache hit");
    }

    #[test]
    fn empty_run_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("e.csv");
        let jsonl_path = dir.path().join("e.jsonl");
        let a = DbTracer::create("a", &csv_path, TraceFormat::Csv, DEFAULT_BASE_HZ).unwrap();
        let b = DbTracer::create("b", &jsonl_path, TraceFormat::Jsonl, DEFAULT_BASE_HZ).unwrap();
        a.finalize().unwrap();
        b.finalize().unwrap();
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv_text.trim_end(), CSV_HEADER.join(","));
        assert_eq!(std::fs::read_to_string(&jsonl_path).unwrap(), "");
    }

    #[test]
    fn rows_are_sorted_by_start_then_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let db = DbTracer::create("db", &path, TraceFormat::Csv, DEFAULT_BASE_HZ).unwrap();
        for (id, start) in [("b", 5), ("a", 5), ("c", 1)] {
            let mut t = Task::new(TaskId::new(id), "c", "a", Arc::from("X"), VTime(start));
            t.end = Some(VTime(10));
            db.end_task(&t);
        }
        db.finalize().unwrap();
        let ids: Vec<_> = read_trace(&path, TraceFormat::Csv)
            .unwrap()
            .into_iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn unwritable_path_is_reported() {
        let err = DbTracer::create(
            "db",
            "/nonexistent-dir/x/trace.csv",
            TraceFormat::Csv,
            DEFAULT_BASE_HZ,
        )
        .err()
        .unwrap();
        assert!(err.to_string().contains("/nonexistent-dir/x/trace.csv"));
    }
}
