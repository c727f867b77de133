//! Per-cell run records and the history CSV.

use anyhow::{bail, Context, Result};
use debias_core::metrics::BiasReport;
use debias_core::trainer::{HistoryRow, Strategy};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const RECORD_FILE: &str = "run_record.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Own-domain comparison of the bias heads against the shared head.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BiasHeadScores {
    /// Mean own-domain test score of the visual-world head.
    pub vw: f64,
    /// Mean own-domain test score of the per-domain bias heads.
    pub bias: f64,
}

/// Everything one completed (strategy, holdout, seed) cell produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub data_hash: String,
    pub strategy: Strategy,
    pub holdout: String,
    pub seed: u64,
    pub report: BiasReport,
    /// Validation score at the end of training.
    pub final_val: Option<f64>,
    pub bias_head_internal: Option<BiasHeadScores>,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub wall_clock_secs: f64,
    /// Only records written after a fully completed run carry `true`.
    pub complete: bool,
}

impl RunRecord {
    /// Atomically write the record: a crash mid-run leaves no complete
    /// record behind.
    pub fn write(&self, cell_dir: &Path) -> Result<()> {
        let tmp = cell_dir.join(format!("{RECORD_FILE}.tmp"));
        let dst = cell_dir.join(RECORD_FILE);
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &dst)?;
        Ok(())
    }

    pub fn read(cell_dir: &Path) -> Result<Self> {
        let path = cell_dir.join(RECORD_FILE);
        let rec: RunRecord = serde_json::from_str(
            &std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?;
        if !rec.complete {
            bail!("record {} is not marked complete", path.display());
        }
        Ok(rec)
    }

    pub fn exists(cell_dir: &Path) -> bool {
        cell_dir.join(RECORD_FILE).is_file()
    }
}

/// Write the loss-component log: one line per step with the component
/// columns, plus the validation score at eval steps.
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,l_vw,l_bias,l_aug,r_wvw,r_delta,r_alpha,l_domain,val_score")?;
    for row in history {
        let m = &row.metrics;
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            m.step, m.l_vw, m.l_bias, m.l_aug, m.r_wvw, m.r_delta, m.r_alpha, m.l_domain
        )?;
        match row.val_score {
            Some(v) => writeln!(f, ",{v}")?,
            None => writeln!(f, ",")?,
        }
    }
    f.flush()?;
    Ok(())
}
