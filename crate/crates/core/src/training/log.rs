use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        iteration: u64,
        loss_rgb: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        loss_feat: Option<f64>,
        total: f64,
        lr_backbone: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lr_head: Option<f64>,
        /// Seconds since the run started.
        elapsed: f64,
    },
    Eval {
        iteration: u64,
        psnr: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        feat_mse: Option<f64>,
    },
}

impl LogRecord {
    pub fn iteration(&self) -> u64 {
        match self {
            LogRecord::Step { iteration, .. } | LogRecord::Eval { iteration, .. } => *iteration,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    /// `(iteration, loss_rgb, loss_feat, total)` for every step, without
    /// timing, so two runs can be compared exactly.
    pub fn losses(&self) -> Vec<(u64, f64, Option<f64>, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step {
                    iteration,
                    loss_rgb,
                    loss_feat,
                    total,
                    ..
                } => Some((*iteration, *loss_rgb, *loss_feat, *total)),
                LogRecord::Eval { .. } => None,
            })
            .collect()
    }

    pub fn last_total(&self) -> Option<f64> {
        self.losses().last().map(|l| l.3)
    }

    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json_lines().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}
