//! Per-update metrics: line-delimited JSON, one object per PPO update,
//! append-only.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub update: u64,
    pub wall_clock_s: f64,
    pub mean_episode_reward: f64,
    /// Mean fractional success over episodes finished in this update's rollout.
    pub mean_success: f64,
    /// Deterministic-evaluation success, present on eval-cadence updates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_success: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub lr: f64,
}

/// Append-only JSONL writer; each record is flushed on write.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            update: step / 100,
            wall_clock_s: 1.5,
            mean_episode_reward: -10.0,
            mean_success: 0.25,
            eval_success: if step % 200 == 0 { Some(0.5) } else { None },
            policy_loss: 0.01,
            value_loss: 4.0,
            entropy: 8.0,
            clip_fraction: 0.1,
            approx_kl: 0.002,
            lr: 2.5e-4,
        }
    }

    #[test]
    fn append_and_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut w = MetricsWriter::create(&path).unwrap();
            for s in [100u64, 200, 300] {
                w.append(&record(s)).unwrap();
            }
        }
        let records = read_metrics(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0], record(100));
        assert_eq!(records[1].eval_success, Some(0.5));
        assert!(records.windows(2).all(|w| w[0].step < w[1].step));
    }
}
