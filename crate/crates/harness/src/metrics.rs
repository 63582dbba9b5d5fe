//! Per-step metric records and their CSV form.

use std::io::Write;
use std::path::Path;

use dipp_core::align::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

/// Column order of every metrics file. Missing values are empty cells.
pub const COLUMNS: [&str; 9] = [
    "step",
    "dsm_loss",
    "ta_loss",
    "pseudo_loss",
    "mean_reward",
    "score_diff_norm",
    "energy_distance",
    "mean_error",
    "log_ratio",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub dsm_loss: Option<f64>,
    pub ta_loss: Option<f64>,
    pub pseudo_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub score_diff_norm: Option<f64>,
    pub energy_distance: Option<f64>,
    /// Largest per-condition distance between generated and true means.
    pub mean_error: Option<f64>,
    pub log_ratio: Option<f64>,
}

impl From<&StepRecord> for MetricRecord {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step as u64,
            ta_loss: Some(r.ta_loss),
            pseudo_loss: Some(r.pseudo_loss),
            mean_reward: r.mean_reward,
            score_diff_norm: Some(r.score_diff_norm),
            ..Self::default()
        }
    }
}

impl MetricRecord {
    pub fn get(&self, column: &str) -> Option<Option<f64>> {
        Some(match column {
            "step" => Some(self.step as f64),
            "dsm_loss" => self.dsm_loss,
            "ta_loss" => self.ta_loss,
            "pseudo_loss" => self.pseudo_loss,
            "mean_reward" => self.mean_reward,
            "score_diff_norm" => self.score_diff_norm,
            "energy_distance" => self.energy_distance,
            "mean_error" => self.mean_error,
            "log_ratio" => self.log_ratio,
            _ => return None,
        })
    }
}

/// Every `every`-th record plus the last one.
pub fn thin<T: Clone>(records: &[T], every: usize) -> Vec<T> {
    let every = every.max(1);
    let mut out: Vec<T> = records.iter().step_by(every).cloned().collect();
    if records.len() > 1 && (records.len() - 1) % every != 0 {
        out.push(records[records.len() - 1].clone());
    }
    out
}

fn f64_cell(v: Option<f64>) -> String {
    // `Display` for f64 is the shortest string that parses back exactly.
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(HarnessError::Usage(format!("no metric records to write to {}", path.display())));
    }
    if let Some(w) = records.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(HarnessError::Usage(format!(
            "metric steps must increase, got {} after {}",
            w[1].step, w[0].step
        )));
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(COLUMNS)?;
    for r in records {
        let row: Vec<String> = COLUMNS
            .iter()
            .map(|c| match *c {
                "step" => r.step.to_string(),
                c => f64_cell(r.get(c).flatten()),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(HarnessError::Usage(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// Re-emits the named columns of a metrics file as CSV.
pub fn plot_data(input: &Path, columns: &[String], out: &mut dyn Write) -> Result<()> {
    if let Some(bad) = columns.iter().find(|c| !COLUMNS.contains(&c.as_str())) {
        return Err(HarnessError::Usage(format!("unknown column '{bad}', expected one of {COLUMNS:?}")));
    }
    let records = read_metrics_csv(input)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for r in &records {
        let row: Vec<String> = columns
            .iter()
            .map(|c| match c.as_str() {
                "step" => r.step.to_string(),
                c => f64_cell(r.get(c).flatten()),
            })
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| HarnessError::Usage(format!("writing plot data: {e}")))?;
    Ok(())
}
