//! Line-delimited training metrics.
//!
//! Records carry only logical time (the iteration counter) so two runs with
//! the same seed produce byte-identical streams.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: String,
    pub iteration: usize,
    /// Greedy exact-action accuracy at oracle states; absent between eval points.
    pub step_sr: Option<f64>,
    /// Greedy task success rate; absent between eval points.
    pub trace_sr: Option<f64>,
    pub loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub lambda_t: f64,
    pub ref_updated: bool,
    pub mean_reward: f64,
    /// Groups dropped because an episode failed.
    #[serde(default)]
    pub failed_groups: usize,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records always serialize")
    }
}

/// Append-only destination for metric records.
pub trait MetricSink {
    fn emit(&mut self, record: &MetricRecord) -> std::io::Result<()>;
}

impl MetricSink for Vec<MetricRecord> {
    fn emit(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonlSink<W: Write> {
    out: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricSink for JsonlSink<W> {
    fn emit(&mut self, record: &MetricRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record.to_line())?;
        self.out.flush()
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricSink for NullSink {
    fn emit(&mut self, _: &MetricRecord) -> std::io::Result<()> {
        Ok(())
    }
}
