use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Parameter(format!("unknown report format {s:?}"))),
        }
    }
}

const CSV_COMMENT: &str = "# columns: layer = 0-based layer index; metric = budget|lmba|lmbo|attn_loss|attn_loss_secondary|out_loss; value = metric value for that layer\n";

/// Pretty JSON with a trailing newline; field order is fixed by the types.
pub fn report_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Long-format CSV: a comment line, a `layer,metric,value` header, then one
/// row per layer per metric present in the report.
pub fn report_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "metric", "value"])?;
    let columns = report.per_layer.columns();
    for layer in 0..report.per_layer.num_layers() {
        for (name, values) in &columns {
            if let Some(v) = values.get(layer) {
                w.write_record([layer.to_string(), name.to_string(), v.to_string()])?;
            }
        }
    }
    let body = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    Ok(format!("{CSV_COMMENT}{}", String::from_utf8(body).expect("csv is utf-8")))
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report)?,
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{PerLayer, ReportMeta};

    fn meta() -> ReportMeta {
        ReportMeta {
            policy: "zigzagkv-bb16".into(),
            budget: 32,
            b_bound: Some(16),
            seed: 7,
            window: 8,
            len: 256,
        }
    }

    fn sample() -> MetricsReport {
        let per_layer = PerLayer {
            budget: vec![40, 24, 32],
            lmba: vec![12.5, 1.0, 0.1 + 0.2],
            lmbo: vec![],
            attn_loss: vec![0.0, 1.0 / 3.0, 0.123456789012345],
            attn_loss_secondary: vec![0.05, 0.4, 0.2],
            out_loss: vec![],
        };
        MetricsReport::new(meta(), per_layer, Some(0.75))
    }

    #[test]
    fn json_reemit_is_byte_identical() {
        let text = report_json(&sample()).unwrap();
        let parsed: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, sample());
        assert_eq!(report_json(&parsed).unwrap(), text);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["meta"]["B"], 32);
        assert_eq!(value["meta"]["B_bound"], 16);
        assert!(value["per_layer"]["attn_loss"].is_array());
        assert!(value["aggregate"].is_object());
    }

    #[test]
    fn csv_row_count() {
        let text = report_csv(&sample()).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        // 3 layers x 4 populated metrics + header
        assert_eq!(rows.len(), 3 * 4 + 1);
        assert_eq!(rows[0], "layer,metric,value");
        assert!(text.starts_with("# columns:"));
    }

    #[test]
    fn empty_report_is_header_only() {
        let empty = MetricsReport::new(meta(), PerLayer::default(), None);
        let text = report_csv(&empty).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows, vec!["layer,metric,value"]);
    }

    #[test]
    fn emit_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        emit_report(&sample(), ReportFormat::Json, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), sample());
        let err = emit_report(&sample(), ReportFormat::Csv, dir.path().join("missing/r.csv"));
        assert!(matches!(err, Err(Error::Io { .. })));
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    }
}
