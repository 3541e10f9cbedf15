use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldar_core::trainer::StepMetrics;

use crate::error::{LabError, Result};

pub const HEADER: &str = "step,mean_reward,baseline,loss,mean_qL,mean_qU,passage_ratio,token_ratio";

/// One CSV row per training step. Floats use the shortest representation
/// that parses back to the same value.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut w = MetricsWriter { path: path.to_path_buf(), out: BufWriter::new(file) };
        w.line(HEADER)?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| LabError::io(&self.path, e))
    }

    pub fn push(&mut self, m: &StepMetrics) -> Result<()> {
        self.line(&format_row(m))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| LabError::io(&self.path, e))
    }
}

pub fn format_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.step, m.mean_reward, m.baseline, m.loss, m.mean_q_l, m.mean_q_u, m.passage_ratio, m.token_ratio
    )
}
