//! Comparing the outputs of two runs.
//!
//! Two runs are equal when their summaries match outside the `run` record,
//! their metrics files are byte-identical and their canonically sorted
//! traces are identical.

use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::SimError;
use crate::trace::{read_trace, sort_rows, TraceFormat};

const MAX_DIFFS: usize = 40;

/// Output files of one run, found through its summary.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub summary_path: PathBuf,
    pub summary: Value,
    pub metrics: Option<PathBuf>,
    pub trace: Option<(PathBuf, TraceFormat)>,
}

impl RunFiles {
    /// `path` is a run's output directory or its summary file.
    pub fn open(path: &Path) -> Result<RunFiles, SimError> {
        let summary_path = if path.is_dir() {
            path.join("summary.json")
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&summary_path)
            .map_err(|e| SimError::io(summary_path.display(), e))?;
        let summary: Value = serde_json::from_str(&text).map_err(|e| {
            SimError::io(
                summary_path.display(),
                std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            )
        })?;
        let dir = summary_path.parent().unwrap_or(Path::new("."));
        let outputs = &summary["run"]["outputs"];
        let locate = |v: &Value| -> Option<PathBuf> {
            let p = PathBuf::from(v.as_str()?);
            // Prefer the file next to the summary, so a moved run directory
            // still compares.
            let local = dir.join(p.file_name()?);
            Some(if local.exists() { local } else { p })
        };
        let metrics = locate(&outputs["metrics"]);
        let trace = locate(&outputs["trace"]).map(|p| {
            let format =
                serde_json::from_value(outputs["trace_format"].clone()).unwrap_or(TraceFormat::Csv);
            (p, format)
        });
        for p in metrics.iter().chain(trace.as_ref().map(|t| &t.0)) {
            if !p.exists() {
                return Err(SimError::io(
                    p.display(),
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "listed in summary but missing",
                    ),
                ));
            }
        }
        Ok(RunFiles {
            summary_path,
            summary,
            metrics,
            trace,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Comparison {
    pub differences: Vec<String>,
}

impl Comparison {
    pub fn is_equal(&self) -> bool {
        self.differences.is_empty()
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_equal() {
            return write!(f, "equal");
        }
        writeln!(f, "{} difference(s):", self.differences.len())?;
        for d in &self.differences {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

fn diff_json(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    if out.len() >= MAX_DIFFS {
        return;
    }
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = format!("{path}/{k}");
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_json(&p, va, vb, out),
                    (Some(_), None) => out.push(format!("{p}: only in first run")),
                    (None, Some(_)) => out.push(format!("{p}: only in second run")),
                    (None, None) => unreachable!(),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                diff_json(&format!("{path}/{i}"), va, vb, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

fn first_line_diff(a: &[u8], b: &[u8]) -> Option<usize> {
    let la: Vec<&[u8]> = a.split(|&c| c == b'\n').collect();
    let lb: Vec<&[u8]> = b.split(|&c| c == b'\n').collect();
    (0..la.len().max(lb.len()))
        .find(|&i| la.get(i) != lb.get(i))
        .map(|i| i + 1)
}

fn read(p: &Path) -> Result<Vec<u8>, SimError> {
    std::fs::read(p).map_err(|e| SimError::io(p.display(), e))
}

/// Compares two runs; see the module docs for what counts as equal.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison, SimError> {
    let ra = RunFiles::open(a)?;
    let rb = RunFiles::open(b)?;
    let mut diffs = Vec::new();

    let strip = |v: &Value| {
        let mut v = v.clone();
        if let Some(o) = v.as_object_mut() {
            o.remove("run");
        }
        v
    };
    diff_json(
        "summary",
        &strip(&ra.summary),
        &strip(&rb.summary),
        &mut diffs,
    );

    match (&ra.metrics, &rb.metrics) {
        (Some(pa), Some(pb)) => {
            let (da, db) = (read(pa)?, read(pb)?);
            if let Some(line) = first_line_diff(&da, &db) {
                diffs.push(format!("metrics: files differ from line {line}"));
            }
        }
        (None, None) => {}
        _ => diffs.push("metrics: present in only one run".into()),
    }

    match (&ra.trace, &rb.trace) {
        (Some((pa, fa)), Some((pb, fb))) => {
            let (da, db) = (read(pa)?, read(pb)?);
            if da != db {
                let mut xa = read_trace(pa, *fa)?;
                let mut xb = read_trace(pb, *fb)?;
                sort_rows(&mut xa);
                sort_rows(&mut xb);
                if xa.len() != xb.len() {
                    diffs.push(format!("trace: {} tasks != {} tasks", xa.len(), xb.len()));
                }
                if let Some(i) = (0..xa.len().min(xb.len())).find(|&i| xa[i] != xb[i]) {
                    diffs.push(format!(
                        "trace: first differing task at sorted position {i}: {} vs {}",
                        xa[i].id, xb[i].id
                    ));
                } else if xa.len() == xb.len() {
                    diffs.push("trace: same tasks, different bytes".into());
                }
            }
        }
        (None, None) => {}
        _ => diffs.push("trace: present in only one run".into()),
    }
    Ok(Comparison { differences: diffs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn json_diff_lists_paths() {
        let mut out = Vec::new();
        diff_json(
            "s",
            &json!({"a": 1, "b": {"c": [1, 2]}}),
            &json!({"a": 1, "b": {"c": [1, 3]}, "d": 0}),
            &mut out,
        );
        assert_eq!(out, ["s/b/c/1: 2 != 3", "s/d: only in second run"]);
    }

    #[test]
    fn line_diff() {
        assert_eq!(first_line_diff(b"a\nb\n", b"a\nb\n"), None);
        assert_eq!(first_line_diff(b"a\nb\n", b"a\nc\n"), Some(2));
    }

    #[test]
    fn missing_summary_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(compare_runs(dir.path(), dir.path()).is_err());
    }
}
