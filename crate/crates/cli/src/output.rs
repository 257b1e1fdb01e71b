//! CSV payloads, scalar summaries and the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{io_err, CliError, ExperimentConfig};

/// One CSV file: a header and rows of already formatted cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: Vec<String>) -> Self {
        Table {
            name: name.to_string(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }
}

/// Header cells `prefix0, prefix1, …`.
pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn cells(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// What a subcommand produced, before it is written out.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.summary.insert(name.to_string(), value.into());
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn summary_table(&self) -> Table {
        let mut t = Table::new("summary", vec!["metric".into(), "value".into()]);
        for (k, v) in &self.summary {
            let cell = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            t.push(vec![k.clone(), cell]);
        }
        t
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        for t in self
            .tables
            .iter()
            .chain(std::iter::once(&self.summary_table()))
        {
            let path = dir.join(format!("{}.csv", t.name));
            let bytes = t.to_bytes().map_err(|e| io_err(&path, e))?;
            std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub version: String,
    pub wall_clock_seconds: f64,
    /// `ok`, `failed` or `acceptance-failed`.
    pub status: String,
    pub failure_stage: Option<String>,
    pub error: Option<String>,
    pub files: Vec<String>,
    pub summary: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            config: config.clone(),
            master_seed: config.seed(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
            status: "ok".into(),
            failure_stage: None,
            error: None,
            files: Vec::new(),
            summary: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    pub fn fail(&mut self, stage: Option<&str>, error: &str) {
        self.status = "failed".into();
        self.failure_stage = stage.map(str::to_string);
        self.error = Some(error.to_string());
    }

    pub fn absorb(&mut self, o: &Outcome) {
        self.files = o
            .tables
            .iter()
            .map(|t| format!("{}.csv", t.name))
            .chain(["summary.csv".to_string()])
            .collect();
        self.summary = o.summary.clone();
        self.checks = o.checks.clone();
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_with_commas_are_quoted() {
        let mut t = Table::new("x", vec!["a".into(), "b".into()]);
        t.push(vec!["holder:theta=0.5,scale=1".into(), "1".into()]);
        let s = String::from_utf8(t.to_bytes().unwrap()).unwrap();
        assert_eq!(s, "a,b\n\"holder:theta=0.5,scale=1\",1\n");
    }

    #[test]
    fn summary_is_sorted_and_plain() {
        let mut o = Outcome::default();
        o.metric("z", 0.5);
        o.metric("a", "text");
        o.metric("m", true);
        let s = String::from_utf8(o.summary_table().to_bytes().unwrap()).unwrap();
        assert_eq!(s, "metric,value\na,text\nm,true\nz,0.5\n");
    }
}
