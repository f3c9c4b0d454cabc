//! Metrics records and their JSONL / CSV sinks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smdp::TerminationReason;

pub const SCHEMA_VERSION: u32 = 1;

/// Summary of one bin of environment frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub run: String,
    pub seed: u64,
    /// Environment steps collected when the bin closed.
    pub frames: u64,
    /// Episodes finished within the bin.
    pub episodes: u64,
    pub episode_return_mean: Option<f64>,
    pub success_rate: Option<f64>,
    /// High-level decisions within the bin.
    pub decisions: u64,
    pub avg_llc_steps: Option<f64>,
    /// Fraction of decisions per termination reason.
    pub termination: BTreeMap<TerminationReason, f64>,
    pub llc_steps: u64,
    pub hlc_steps: u64,
    pub llc_loss: Option<f64>,
    pub llc_kl_to_behavior: Option<f64>,
    pub llc_encoder_kl: Option<f64>,
    pub hlc_loss: Option<f64>,
    pub hlc_gate_probability: Option<f64>,
    pub hlc_value_loss: Option<f64>,
}

impl MetricsRecord {
    pub fn fraction(&self, reason: TerminationReason) -> f64 {
        self.termination.get(&reason).copied().unwrap_or(0.0)
    }
}

fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "schema_version",
        "run",
        "seed",
        "frames",
        "episodes",
        "episode_return_mean",
        "success_rate",
        "decisions",
        "avg_llc_steps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(
        TerminationReason::ALL
            .iter()
            .map(|r| format!("frac_{}", r.name())),
    );
    h.extend(
        [
            "llc_steps",
            "hlc_steps",
            "llc_loss",
            "llc_kl_to_behavior",
            "llc_encoder_kl",
            "hlc_loss",
            "hlc_gate_probability",
            "hlc_value_loss",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_row(r: &MetricsRecord) -> Vec<String> {
    let mut row = vec![
        r.schema_version.to_string(),
        r.run.clone(),
        r.seed.to_string(),
        r.frames.to_string(),
        r.episodes.to_string(),
        opt(r.episode_return_mean),
        opt(r.success_rate),
        r.decisions.to_string(),
        opt(r.avg_llc_steps),
    ];
    row.extend(
        TerminationReason::ALL
            .iter()
            .map(|&t| r.fraction(t).to_string()),
    );
    row.extend([
        r.llc_steps.to_string(),
        r.hlc_steps.to_string(),
        opt(r.llc_loss),
        opt(r.llc_kl_to_behavior),
        opt(r.llc_encoder_kl),
        opt(r.hlc_loss),
        opt(r.hlc_gate_probability),
        opt(r.hlc_value_loss),
    ]);
    row
}

/// Writes `<stem>.jsonl` and `<stem>.csv` side by side. Records must come in
/// nondecreasing frame order.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    last: Option<u64>,
    rows: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path, stem: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl = BufWriter::new(File::create(dir.join(format!("{stem}.jsonl")))?);
        let mut csv = BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?);
        writeln!(csv, "{}", csv_header().join(","))?;
        csv.flush()?;
        Ok(Self {
            jsonl,
            csv,
            last: None,
            rows: 0,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(previous) = self.last {
            if record.frames < previous {
                return Err(Error::OutOfOrder {
                    previous,
                    frames: record.frames,
                });
            }
        }
        if record.run.contains([',', '"', '\n']) {
            return Err(Error::Config(format!(
                "run label `{}` is not CSV-safe",
                record.run
            )));
        }
        serde_json::to_writer(&mut self.jsonl, record)?;
        writeln!(self.jsonl)?;
        writeln!(self.csv, "{}", csv_row(record).join(","))?;
        self.last = Some(record.frames);
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(mut self) -> Result<()> {
        self.jsonl.flush()?;
        self.csv.flush()?;
        Ok(())
    }
}

pub fn write_all(dir: &Path, stem: &str, records: &[MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(dir, stem)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Appends any serializable value as one JSON line. Objects without a
/// `schema_version` field get the current one.
pub struct JsonlLog {
    out: BufWriter<File>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, value: &impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        if let Some(obj) = v.as_object_mut() {
            obj.entry("schema_version").or_insert(SCHEMA_VERSION.into());
        }
        serde_json::to_writer(&mut self.out, &v)?;
        writeln!(self.out)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frames: u64) -> MetricsRecord {
        MetricsRecord {
            schema_version: SCHEMA_VERSION,
            run: "h2o2".into(),
            frames,
            episodes: 2,
            success_rate: Some(0.5),
            termination: [(TerminationReason::Timeout, 1.0)].into_iter().collect(),
            ..Default::default()
        }
    }

    #[test]
    fn jsonl_lines_carry_the_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let mut log = JsonlLog::create(&path).unwrap();
        log.write(&serde_json::json!({"a": 1})).unwrap();
        log.write(&serde_json::json!({"schema_version": 7}))
            .unwrap();
        log.flush().unwrap();
        let lines: Vec<serde_json::Value> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines[0]["schema_version"], SCHEMA_VERSION);
        assert_eq!(lines[1]["schema_version"], 7);
    }

    #[test]
    fn empty_run_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path(), "m", &[]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("schema_version,"));
        assert_eq!(
            std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap(),
            ""
        );
    }

    #[test]
    fn rows_match_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(10), record(10), record(30)];
        write_all(dir.path(), "m", &recs).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + recs.len());
        let header = csv.lines().next().unwrap().split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == header));
        assert_eq!(read_jsonl(&dir.path().join("m.jsonl")).unwrap(), recs);
    }

    #[test]
    fn out_of_order_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), "m").unwrap();
        w.write(&record(20)).unwrap();
        assert!(matches!(
            w.write(&record(10)),
            Err(Error::OutOfOrder {
                previous: 20,
                frames: 10
            })
        ));
    }

    #[test]
    fn unwritable_path_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        assert!(MetricsWriter::create(&file.join("sub"), "m").is_err());
    }
}
