//! Append-only training metrics with strictly increasing steps.

use std::path::Path;

use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub task: String,
    pub mean_reward: Real,
    pub loss: Real,
    pub lr: Real,
    pub degenerate_rate: Real,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,epoch,task,mean_reward,loss,lr,degenerate_rate,wall_ms";

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; panics if the step does not increase.
    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            assert!(
                row.step > last.step,
                "metrics steps must strictly increase ({} after {})",
                row.step,
                last.step
            );
        }
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.8},{:.4},{}\n",
                r.step, r.epoch, r.task, r.mean_reward, r.loss, r.lr, r.degenerate_rate, r.wall_ms
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}
