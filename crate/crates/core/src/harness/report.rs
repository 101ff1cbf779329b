use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::Summary;

/// One measured item: a group label (arm, prior level, ...), an index within
/// the group and named values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub group: String,
    pub item: usize,
    pub values: BTreeMap<String, f64>,
}

impl Record {
    pub fn new(group: impl Into<String>, item: usize, values: &[(&str, f64)]) -> Self {
        Self {
            group: group.into(),
            item,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    /// Free-text protocol notes (e.g. whether synthesis was clipped).
    pub header: Vec<String>,
    pub config: serde_json::Value,
    pub records: Vec<Record>,
    /// `group -> value name -> summary`, recomputable from `records`.
    pub aggregates: BTreeMap<String, BTreeMap<String, Summary>>,
    /// Named derived quantities (MAPE per arm, PSNR gaps, ...).
    pub derived: BTreeMap<String, f64>,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            header: Vec::new(),
            config,
            records: Vec::new(),
            aggregates: BTreeMap::new(),
            derived: BTreeMap::new(),
            wall_time_s: 0.0,
        }
    }

    /// Recomputes `aggregates` from `records`.
    pub fn aggregate(&mut self) {
        let mut cols: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for r in &self.records {
            let g = cols.entry(r.group.clone()).or_default();
            for (k, v) in &r.values {
                g.entry(k.clone()).or_default().push(*v);
            }
        }
        self.aggregates = cols
            .into_iter()
            .map(|(g, m)| {
                let s = m.into_iter().filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s))).collect();
                (g, s)
            })
            .collect();
    }

    pub fn mean(&self, group: &str, value: &str) -> Option<f64> {
        self.aggregates.get(group)?.get(value).map(|s| s.mean)
    }

    pub fn to_json(&self) -> String {
        // Non-finite values (PSNR sentinels) are not valid JSON numbers.
        let v = serde_json::to_value(self).unwrap_or(serde_json::Value::Null);
        serde_json::to_string_pretty(&v).unwrap()
    }

    /// Flat per-record CSV: `group,item,<value columns...>`.
    pub fn to_csv(&self) -> String {
        let mut keys: Vec<&String> = self.records.iter().flat_map(|r| r.values.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut out = String::from("group,item");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{}", r.group, r.item);
            for k in &keys {
                match r.values.get(*k) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table of group means.
    pub fn table(&self) -> String {
        let mut out = format!("== {} ==\n", self.name);
        for h in &self.header {
            let _ = writeln!(out, "# {h}");
        }
        for (g, m) in &self.aggregates {
            let _ = write!(out, "{g:<28}");
            for (k, s) in m {
                let _ = write!(out, " {k}={:.5}±{:.5}", s.mean, s.std);
            }
            out.push('\n');
        }
        for (k, v) in &self.derived {
            let _ = writeln!(out, "{k:<28} {v:.5}");
        }
        let _ = writeln!(out, "wall time {:.2}s", self.wall_time_s);
        out
    }
}
