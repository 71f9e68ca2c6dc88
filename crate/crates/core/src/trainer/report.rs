use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossBreakdown;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainVisit {
    pub domain: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean breakdown over the epoch's steps.
    pub loss: LossBreakdown,
    pub source_domain_trace: Vec<DomainVisit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub accuracy: f64,
    pub f1: f64,
}

/// JSON artifact of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: serde_json::Value,
    pub per_epoch: Vec<EpochRecord>,
    /// Target-domain metrics; `null` when the target carries no held-out labels.
    #[serde(rename = "final")]
    pub final_metrics: Option<FinalMetrics>,
    pub seed: u64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
