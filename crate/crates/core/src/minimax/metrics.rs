//! Per-interval training metrics and their CSV form.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged interval. Losses are interval means of unweighted batch
/// losses; accuracies are measured on the probe set and are present only at
/// accuracy checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub clean_loss: Option<f64>,
    pub adv_loss: Option<f64>,
    pub grad_phi_norm: Option<f64>,
    pub probe_clean_acc: Option<f64>,
    pub probe_fgs_acc: Option<f64>,
    pub probe_gen_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

pub const METRICS_COLUMNS: &str = "iteration,clean_loss,adv_loss,grad_phi_norm,probe_clean_acc,probe_fgs_acc,probe_gen_acc";

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

impl MetricsLog {
    /// CSV body without the timestamp line.
    pub fn csv_body(&self) -> String {
        let mut s = String::from(METRICS_COLUMNS);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration,
                cell(r.clean_loss),
                cell(r.adv_loss),
                cell(r.grad_phi_norm),
                cell(r.probe_clean_acc),
                cell(r.probe_fgs_acc),
                cell(r.probe_gen_acc)
            );
        }
        s
    }

    /// A `# created unix=<seconds>` line followed by the CSV body.
    pub fn to_csv(&self) -> String {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        format!("# created unix={secs}\n{}", self.csv_body())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last_with<F: Fn(&MetricsRecord) -> Option<f64>>(&self, f: F) -> Option<f64> {
        self.records.iter().rev().find_map(f)
    }
}
