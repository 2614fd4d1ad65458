//! Per-run bookkeeping, serialized as JSON in the run directory so that
//! `--resume` can restart from the last complete iteration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::EpochLoss;
use crate::error::{Error, Result};

/// Mean held-out metrics at one point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dsc: f64,
    pub h95: f64,
    pub lavd: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Everything recorded about one self-training iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Checkpoint path relative to the run directory (empty for in-memory runs).
    pub checkpoint: String,
    pub subset_ids: Vec<String>,
    /// How many pseudo labels ended the iteration in each provenance state.
    pub provenance_counts: BTreeMap<String, usize>,
    pub finetune_trace: Vec<EpochLoss>,
    pub retrain_trace: Vec<EpochLoss>,
    /// Held-out target metrics of the retrained model, when an eval set was
    /// provided.
    pub eval: Option<EvalSummary>,
    /// Set once every artifact of the iteration has been persisted.
    pub complete: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub variant: String,
    pub base_trace: Vec<EpochLoss>,
    pub base_eval: Option<EvalSummary>,
    pub iterations: Vec<IterationRecord>,
}

impl RunHistory {
    pub fn new(seed: u64, variant: &str) -> Self {
        RunHistory {
            seed,
            variant: variant.to_string(),
            base_trace: Vec::new(),
            base_eval: None,
            iterations: Vec::new(),
        }
    }

    /// Index of the last iteration marked complete (1-based), or 0.
    pub fn last_complete(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.complete)
            .map(|r| r.iteration)
            .max()
            .unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("history serialization failed: {e}")))?;
        // write-then-rename keeps the file coherent if interrupted
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("history parse failed ({path:?}): {e}")))
    }
}
