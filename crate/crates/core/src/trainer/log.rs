use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmtError, Result};

/// One adaptation iteration. Loss fields hold the weighted contribution of
/// each term to `l_total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub l_contrast: f64,
    pub l_unsup_det: f64,
    pub l_sup_det: f64,
    pub l_total: f64,
    pub num_pseudo_labels: usize,
    pub num_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub map50: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurnInRecord {
    pub iter: usize,
    pub l_sup_det: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Train(StepRecord),
    Eval(EvalRecord),
}

// Integer map keys do not survive serde's buffered tagged-enum path, so the
// tag is dispatched by hand.
impl<'de> Deserialize<'de> for LogRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let mut v = serde_json::Value::deserialize(d)?;
        let kind = v
            .as_object_mut()
            .and_then(|o| o.remove("kind"))
            .ok_or_else(|| D::Error::missing_field("kind"))?;
        match kind.as_str() {
            Some("train") => serde_json::from_value(v)
                .map(LogRecord::Train)
                .map_err(D::Error::custom),
            Some("eval") => serde_json::from_value(v)
                .map(LogRecord::Eval)
                .map_err(D::Error::custom),
            _ => Err(D::Error::unknown_variant(
                &kind.to_string(),
                &["train", "eval"],
            )),
        }
    }
}

/// Append-only adaptation log, serialized as JSON lines. Burn-in losses are
/// kept apart in [`BurnInRecord`]s.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<LogRecord>,
}

impl MetricLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Train(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn final_map(&self) -> Option<f64> {
        self.evals().last().map(|e| e.map50)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CmtError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| CmtError::io(path, e))?;
        w.flush().map_err(|e| CmtError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| CmtError::io(path, e))?;
        let mut log = MetricLog::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CmtError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            log.push(serde_json::from_str(&line).map_err(|e| CmtError::format(path, e))?);
        }
        Ok(log)
    }
}
