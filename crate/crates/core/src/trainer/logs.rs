//! Loss logging: per-step training records plus periodic validation records,
//! with CSV export/import.
//!
//! Train CSV header: `step,train_loss,lr,wall_clock_s`.
//! Validation CSV header: `step,valid_loss,valid_ppl`.
//! Every artifact is byte-deterministic given the run seed except the
//! `wall_clock_s` column.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEntry {
    pub step: u64,
    pub train_loss: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalEntry {
    pub step: u64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
}

pub const TRAIN_CSV_HEADER: &str = "step,train_loss,lr,wall_clock_s";
pub const EVAL_CSV_HEADER: &str = "step,valid_loss,valid_ppl";

/// Full record of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    entries: Vec<TrainEntry>,
    eval_entries: Vec<EvalEntry>,
}

impl LossLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TrainEntry] {
        &self.entries
    }

    pub fn eval_entries(&self) -> &[EvalEntry] {
        &self.eval_entries
    }

    /// Appends a train record; steps must arrive strictly increasing.
    pub fn push_train(&mut self, entry: TrainEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.step <= last.step {
                return Err(Error::Data(format!(
                    "train log steps must increase: {} after {}",
                    entry.step, last.step
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Appends an eval record; steps must arrive strictly increasing.
    pub fn push_eval(&mut self, entry: EvalEntry) -> Result<()> {
        if let Some(last) = self.eval_entries.last() {
            if entry.step <= last.step {
                return Err(Error::Data(format!(
                    "eval log steps must increase: {} after {}",
                    entry.step, last.step
                )));
            }
        }
        self.eval_entries.push(entry);
        Ok(())
    }

    pub fn train_csv(&self) -> String {
        let mut s = String::from(TRAIN_CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.step, e.train_loss, e.lr, e.wall_clock_s
            ));
        }
        s
    }

    pub fn eval_csv(&self) -> String {
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for e in &self.eval_entries {
            s.push_str(&format!("{},{},{}\n", e.step, e.valid_loss, e.valid_ppl));
        }
        s
    }

    pub fn parse_train_csv(text: &str) -> Result<Vec<TrainEntry>> {
        let mut rows = csv_rows(text, TRAIN_CSV_HEADER, 4)?;
        let entries: Vec<TrainEntry> = rows
            .drain(..)
            .map(|row| TrainEntry {
                step: row[0] as u64,
                train_loss: row[1],
                lr: row[2],
                wall_clock_s: row[3],
            })
            .collect();
        check_increasing(entries.iter().map(|e| e.step), "train")?;
        Ok(entries)
    }

    pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalEntry>> {
        let mut rows = csv_rows(text, EVAL_CSV_HEADER, 3)?;
        let entries: Vec<EvalEntry> = rows
            .drain(..)
            .map(|row| EvalEntry {
                step: row[0] as u64,
                valid_loss: row[1],
                valid_ppl: row[2],
            })
            .collect();
        check_increasing(entries.iter().map(|e| e.step), "eval")?;
        Ok(entries)
    }

    /// Rebuilds a log from the two CSV bodies.
    pub fn from_csv(train: &str, eval: &str) -> Result<Self> {
        Ok(LossLog {
            entries: Self::parse_train_csv(train)?,
            eval_entries: Self::parse_eval_csv(eval)?,
        })
    }
}

fn check_increasing(steps: impl Iterator<Item = u64>, which: &str) -> Result<()> {
    let mut prev: Option<u64> = None;
    for s in steps {
        if let Some(p) = prev {
            if s <= p {
                return Err(Error::Data(format!(
                    "{which} log steps must increase: {s} after {p}"
                )));
            }
        }
        prev = Some(s);
    }
    Ok(())
}

/// Parses a simple numeric CSV with a fixed expected header and column count.
fn csv_rows(text: &str, header: &str, n_cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == header => {}
        other => {
            return Err(Error::Data(format!(
                "expected CSV header {header:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(Error::Data(format!(
                "row {}: expected {n_cols} columns, got {}",
                i + 2,
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(n_cols);
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("row {}: bad numeric field {f:?}", i + 2))
            })?);
        }
        rows.push(row);
    }
    Ok(rows)
}
