//! Metrics records, aligned text tables, and plot-ready curve files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One self-describing metrics record; emitted one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub condition: String,
    pub seed: u64,
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

pub fn to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<MetricRecord>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("metrics line {}: {e}", i + 1)))
        .collect()
}

/// Atomic write: temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| format!("mkdir {}: {e}", dir.display()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f =
        std::fs::File::create(&tmp).map_err(|e| format!("create {}: {e}", tmp.display()))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| format!("write {}: {e}", tmp.display()))?;
    f.sync_all().map_err(|e| e.to_string())?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| format!("rename to {}: {e}", path.display()))
}

/// Two-column `step value` text for a curve.
pub fn plot_data(points: &[(usize, f64)]) -> String {
    let mut out = String::new();
    for (s, v) in points {
        let _ = writeln!(out, "{s} {v}");
    }
    out
}

/// An aligned text table: one label column plus numeric columns.
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    rows: Vec<(String, Vec<Option<f64>>)>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            title: title.into(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows
            .push((label.into(), values.into_iter().map(Some).collect()));
    }

    pub fn sparse_row(&mut self, label: impl Into<String>, values: Vec<Option<f64>>) {
        self.rows.push((label.into(), values));
    }

    /// A `label_a - label_b` delta row computed from two existing rows.
    pub fn delta_row(&mut self, a: &str, b: &str) {
        let find = |l: &str| {
            self.rows
                .iter()
                .find(|(label, _)| label == l)
                .map(|(_, v)| v.clone())
        };
        let (Some(va), Some(vb)) = (find(a), find(b)) else {
            return;
        };
        let delta = va
            .iter()
            .zip(&vb)
            .map(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            })
            .collect();
        self.rows.push((format!("{a}-{b}"), delta));
    }

    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = Vec::new();
        widths.push(
            self.rows
                .iter()
                .map(|(l, _)| l.len())
                .chain([self.title.len()])
                .max()
                .unwrap_or(0),
        );
        let fmt_val = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        for (c, name) in self.columns.iter().enumerate() {
            let w = self
                .rows
                .iter()
                .map(|(_, vals)| vals.get(c).map_or(1, |v| fmt_val(v).len()))
                .chain([name.len()])
                .max()
                .unwrap_or(0);
            widths.push(w);
        }
        let mut out = String::new();
        let _ = write!(out, "{:<w$}", self.title, w = widths[0]);
        for (c, name) in self.columns.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", name, w = widths[c + 1]);
        }
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * self.columns.len();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for (label, vals) in &self.rows {
            let _ = write!(out, "{:<w$}", label, w = widths[0]);
            for (c, _) in self.columns.iter().enumerate() {
                let s = vals.get(c).map_or("-".to_string(), |v| fmt_val(v));
                let _ = write!(out, "  {:>w$}", s, w = widths[c + 1]);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cond: &str, task: &str, value: f64) -> MetricRecord {
        MetricRecord {
            run_id: "r1".into(),
            condition: cond.into(),
            seed: 1,
            step: 100,
            task: task.into(),
            metric: "accuracy".into(),
            value,
        }
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let records = vec![
            rec("A", "surface", 0.8125),
            rec("D", "composition", 0.4417823),
            MetricRecord {
                step: 0,
                value: f64::MIN_POSITIVE,
                ..rec("B", "loss", 0.0)
            },
        ];
        let text = to_jsonl(&records);
        let back = from_jsonl(&text).unwrap();
        assert_eq!(records, back);
        assert!(from_jsonl("{not json}").is_err());
    }

    #[test]
    fn delta_rows_are_column_subtraction() {
        let mut t = Table::new("Condition", &["surface", "composition"]);
        t.row("D", vec![0.9, 0.7]);
        t.row("B", vec![0.92, 0.5]);
        t.delta_row("D", "B");
        let s = t.render();
        let last = s.lines().last().unwrap();
        assert!(last.starts_with("D-B"));
        assert!(last.contains("-0.0200"));
        assert!(last.contains("0.2000"));
    }

    #[test]
    fn empty_table_renders_header_only() {
        let t = Table::new("Rank", &["surface", "composition", "overall"]);
        let s = t.render();
        assert_eq!(s.lines().count(), 2);
        assert!(s.contains("overall"));
    }

    #[test]
    fn plot_data_is_two_columns() {
        let s = plot_data(&[(0, 3.5), (10, 1.25)]);
        assert_eq!(s, "0 3.5\n10 1.25\n");
    }

    #[test]
    fn atomic_write_lands_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        write_atomic(&p, "hello\n").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "hello\n");
        assert!(!p.with_extension("tmp").exists());
    }
}
