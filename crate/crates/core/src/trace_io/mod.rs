//! Attention trace files.
//!
//! A trace is UTF-8 newline-delimited JSON. The first line is the header
//! `{"version":"zigzag-trace/1","L":..,"h":..,"n":..,"w":..}`; every further
//! line is one observation-window row
//! `{"layer":..,"head":..,"row":..,"values":[..]}` with exactly `n` values.
//! Row `r` belongs to query position `n - w + r`; values past that position
//! are causal padding and must be exactly `0.0`.

mod report;
mod synth;

pub use report::{emit_report, read_report, report_csv, report_json, ReportFormat};
pub use synth::{generate_synth, SynthSpec};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const TRACE_VERSION: &str = "zigzag-trace/1";
const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: String,
    #[serde(rename = "L")]
    pub layers: usize,
    pub h: usize,
    pub n: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    layer: usize,
    head: usize,
    row: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub trace: AttentionTrace,
}

impl TraceFile {
    pub fn from_trace(trace: AttentionTrace) -> Self {
        Self {
            header: TraceHeader {
                version: TRACE_VERSION.to_string(),
                layers: trace.num_layers(),
                h: trace.num_heads(),
                n: trace.len(),
                w: trace.window(),
            },
            trace,
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        for (l, heads) in self.trace.layers().iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                for (r, values) in m.iter_rows().enumerate() {
                    let row = TraceRow {
                        layer: l,
                        head: h,
                        row: r,
                        values: values.to_vec(),
                    };
                    serde_json::to_writer(&mut out, &row)?;
                    out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// FNV-1a of the serialized file.
    pub fn checksum(&self) -> u64 {
        fnv1a(&self.to_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn save_trace(file: &TraceFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    file.write_to(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trace(BufReader::new(f))
}

/// Parses and validates a trace, stopping at the first problem.
pub fn parse_trace(reader: impl BufRead) -> Result<TraceFile> {
    let mut diagnostics = Vec::new();
    let file = scan(reader, &mut diagnostics, true)?;
    match diagnostics.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(file.expect("no diagnostics means a complete trace")),
    }
}

/// Every problem found in a trace, in file order. Empty means the trace is
/// valid. Header-level problems end the scan.
pub fn validate_trace(path: impl AsRef<Path>) -> Result<Vec<Error>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut diagnostics = Vec::new();
    if let Err(e) = scan(BufReader::new(f), &mut diagnostics, false) {
        diagnostics.push(e);
    }
    Ok(diagnostics)
}

fn trace_err(line: usize, message: impl Into<String>) -> Error {
    Error::Trace {
        line,
        message: message.into(),
    }
}

/// Returns `Err` only for problems that make the rest of the file
/// meaningless; row-level problems are pushed to `diagnostics`.
fn scan(reader: impl BufRead, diagnostics: &mut Vec<Error>, stop_early: bool) -> Result<Option<TraceFile>> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io("<trace>", e))?,
        None => return Err(trace_err(1, "empty trace file")),
    };
    let header: TraceHeader =
        serde_json::from_str(&header_line).map_err(|e| trace_err(1, format!("bad header: {e}")))?;
    if header.version != TRACE_VERSION {
        return Err(Error::Version {
            expected: TRACE_VERSION.into(),
            found: header.version,
        });
    }
    let (layers, heads, n, w) = (header.layers, header.h, header.n, header.w);
    if w == 0 || n < w {
        return Err(Error::Shape(format!("header n = {n} must be >= w = {w} >= 1")));
    }
    if layers == 0 || heads == 0 {
        return Err(Error::Shape("header L and h must be at least 1".into()));
    }

    let cells = layers * heads * w;
    let mut data: Vec<Option<Vec<f64>>> = vec![None; cells];
    let mut present = vec![false; cells];
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if stop_early && !diagnostics.is_empty() {
            return Ok(None);
        }
        let row: TraceRow = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                diagnostics.push(trace_err(lineno, format!("bad row: {e}")));
                continue;
            }
        };
        if row.layer >= layers || row.head >= heads || row.row >= w {
            diagnostics.push(Error::Shape(format!(
                "line {lineno}: row (layer {}, head {}, row {}) outside header bounds",
                row.layer, row.head, row.row
            )));
            continue;
        }
        let slot = (row.layer * heads + row.head) * w + row.row;
        if std::mem::replace(&mut present[slot], true) {
            diagnostics.push(trace_err(
                lineno,
                format!(
                    "duplicate row (layer {}, head {}, row {})",
                    row.layer, row.head, row.row
                ),
            ));
            continue;
        }
        if row.values.len() != n {
            diagnostics.push(Error::Shape(format!(
                "line {lineno}: {} values, expected n = {n}",
                row.values.len()
            )));
            continue;
        }
        if let Some(i) = row.values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            diagnostics.push(trace_err(lineno, format!("value {i} is negative or non-finite")));
            continue;
        }
        let query = n - w + row.row;
        if row.values[query + 1..].iter().any(|&v| v != 0.0) {
            diagnostics.push(trace_err(
                lineno,
                format!("nonzero padding past causal position {query}"),
            ));
            continue;
        }
        let sum: f64 = row.values.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            diagnostics.push(Error::RowSum {
                layer: row.layer,
                head: row.head,
                row: row.row,
                sum,
            });
            continue;
        }
        data[slot] = Some(row.values);
    }
    if stop_early && !diagnostics.is_empty() {
        return Ok(None);
    }
    let missing = present.iter().filter(|p| !**p).count();
    if missing > 0 {
        let first = present.iter().position(|p| !p).expect("missing > 0");
        diagnostics.push(Error::Shape(format!(
            "{missing} rows missing, first at layer {}, head {}, row {}",
            first / (heads * w),
            (first / w) % heads,
            first % w
        )));
        return Ok(None);
    }
    if !diagnostics.is_empty() {
        return Ok(None);
    }

    let mut rows = data.into_iter().map(|d| d.expect("checked above"));
    let mut matrices = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut layer = Vec::with_capacity(heads);
        for _ in 0..heads {
            let block: Vec<f64> = rows.by_ref().take(w).flatten().collect();
            layer.push(Matrix::from_vec(w, n, block)?);
        }
        matrices.push(layer);
    }
    Ok(Some(TraceFile {
        header,
        trace: AttentionTrace::new(n, w, matrices)?,
    }))
}
