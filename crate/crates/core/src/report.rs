//! Report stream: line-delimited JSON records plus text-rendered depth
//! histograms per difficulty bucket.

use crate::data::Difficulty;
use crate::error::{CoreError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One record per training epoch; written as a JSONL stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub alpha: f64,
    pub mean_depth: f64,
    pub flops_ratio: f64,
    pub mean_reward: f64,
    pub policy_entropy: f64,
}

pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| CoreError::Format(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CoreError::Format(e.to_string())))
        .collect()
}

/// Per-bucket depth counts; index d-1 holds the count of samples exiting at
/// depth d.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthHistogram {
    pub bucket: Difficulty,
    pub counts: Vec<u64>,
}

impl DepthHistogram {
    pub fn new(bucket: Difficulty, max_depth: usize) -> Self {
        DepthHistogram {
            bucket,
            counts: vec![0; max_depth],
        }
    }

    pub fn record(&mut self, depth: usize) -> Result<()> {
        if depth == 0 || depth > self.counts.len() {
            return Err(CoreError::Input(format!(
                "depth {depth} outside 1..={}",
                self.counts.len()
            )));
        }
        self.counts[depth - 1] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Smallest depth attaining the maximum count.
    pub fn modal_depth(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best + 1
    }
}

/// Aligned text table, one row per bucket, one column per depth.
pub fn render_histograms(hists: &[DepthHistogram]) -> String {
    if hists.is_empty() {
        return String::new();
    }
    let max_depth = hists.iter().map(|h| h.counts.len()).max().unwrap();
    let mut widths: Vec<usize> = (1..=max_depth).map(|d| d.to_string().len()).collect();
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            widths[i] = widths[i].max(c.to_string().len());
        }
    }
    let label_w = hists
        .iter()
        .map(|h| format!("{:?}", h.bucket).len())
        .max()
        .unwrap()
        .max("bucket".len());
    let mut out = String::new();
    out.push_str(&format!("{:label_w$}", "bucket"));
    for (i, w) in widths.iter().enumerate() {
        out.push_str(&format!("  {:>w$}", i + 1));
    }
    out.push_str("  total  mode\n");
    for h in hists {
        out.push_str(&format!("{:label_w$}", format!("{:?}", h.bucket)));
        for (i, w) in widths.iter().enumerate() {
            let c = h.counts.get(i).copied().unwrap_or(0);
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push_str(&format!("  {:>5}  {:>4}\n", h.total(), h.modal_depth()));
    }
    out
}

/// Appends one serialized record to an open JSONL stream.
pub fn append_record<T: Serialize, W: Write>(w: &mut W, record: &T) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| CoreError::Format(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| CoreError::io("<stream>", e))
}
