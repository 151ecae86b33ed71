//! Metrics as JSON lines, plus CSV export.
//!
//! Keys are written in a fixed order and floats with 17 significant digits
//! so every value survives a text round trip.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gessl::MetricsRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";

/// `{:.16e}`: one leading digit and sixteen decimals.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), fmt_f64)
}

pub fn to_json_line(r: &MetricsRecord) -> String {
    let mut s = String::from("{");
    let _ = write!(
        s,
        "\"step\":{},\"episode\":{},\"inner_loss_mean\":{},\"distill_loss\":{},\
         \"outer_grad_norm\":{},\"probe_acc\":{},\"sigma_mean\":{},\"seed\":{},\"wall_ms\":{}",
        r.step,
        r.episode,
        fmt_f64(r.inner_loss_mean),
        fmt_opt(r.distill_loss),
        fmt_f64(r.outer_grad_norm),
        fmt_opt(r.probe_acc),
        fmt_opt(r.sigma_mean),
        r.seed,
        r.wall_ms
    );
    s.push('}');
    s
}

pub fn parse_json_line(line: &str) -> std::result::Result<MetricsRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// Appends records to `sink`, one per line.
pub fn emit_metrics<W: std::io::Write>(records: &[MetricsRecord], sink: &mut W) -> std::io::Result<()> {
    for r in records {
        writeln!(sink, "{}", to_json_line(r))?;
    }
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    emit_metrics(records, &mut f).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_json_line(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub const CSV_COLUMNS: [&str; 9] = [
    "step",
    "episode",
    "seed",
    "inner_loss_mean",
    "distill_loss",
    "outer_grad_norm",
    "probe_acc",
    "sigma_mean",
    "wall_ms",
];

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.episode.to_string(),
            r.seed.to_string(),
            fmt_f64(r.inner_loss_mean),
            r.distill_loss.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.outer_grad_norm),
            r.probe_acc.map(fmt_f64).unwrap_or_default(),
            r.sigma_mean.map(fmt_f64).unwrap_or_default(),
            r.wall_ms.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Pivots `run_dir/metrics.jsonl` into `run_dir/metrics.csv`.
pub fn export_csv(run_dir: &Path) -> Result<PathBuf> {
    let records = read_jsonl(&run_dir.join(METRICS_FILE))?;
    let out = run_dir.join(METRICS_CSV);
    write_csv(&out, &records)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            episode: step - 1,
            inner_loss_mean: 0.1 + 0.2,
            distill_loss: Some(1.0 / 3.0),
            outer_grad_norm: 1e-300,
            probe_acc: None,
            sigma_mean: Some(std::f64::consts::PI),
            seed: 4,
            wall_ms: 12,
        }
    }

    #[test]
    fn line_round_trip_and_key_order() {
        let r = rec(1);
        let line = to_json_line(&r);
        assert!(line.starts_with("{\"step\":1,\"episode\":0,\"inner_loss_mean\":3.0000000000000004e-1"));
        assert_eq!(parse_json_line(&line).unwrap(), r);
    }

    #[test]
    fn seventeen_significant_digits() {
        let s = fmt_f64(1.0 / 3.0);
        let mantissa = s.split('e').next().unwrap().replace('.', "");
        assert_eq!(mantissa.len(), 17);
        assert_eq!(s.parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn csv_rows_match_lines_and_bad_lines_report_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<MetricsRecord> = (1..=4).map(rec).collect();
        write_jsonl(&dir.path().join(METRICS_FILE), &recs).unwrap();
        let csv_path = export_csv(dir.path()).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(text.lines().count(), recs.len() + 1);
        let bad = format!("{}\n{{\"step\": oops}}\n", to_json_line(&recs[0]));
        assert!(matches!(parse_jsonl(&bad), Err(Error::Parse { line: 2, .. })));
    }
}
