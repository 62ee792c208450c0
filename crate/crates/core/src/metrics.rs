//! Metrics streams (newline-delimited JSON) and per-trial summaries.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zapping::ZapMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Transfer,
}

/// One evaluation point.
///
/// `step` is an event clock that advances once per optimizer update and once
/// per zap event, so an evaluation taken right after a zap gets its own step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: Phase,
    pub classes_seen: usize,
    /// Accuracy on the training examples seen so far (transfer only).
    pub train_acc: Option<f64>,
    /// Accuracy on held-out examples (pre-training validation or transfer test).
    pub test_acc: Option<f64>,
    /// Mean cross-entropy on the held-out examples.
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZapEvent {
    pub step: u64,
    pub mode: ZapMode,
    pub classes: Vec<usize>,
}

/// First line of every metrics file, tying the stream to its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsEvent {
    Header(StreamHeader),
    Eval(MetricsRecord),
    Zap(ZapEvent),
}

/// Records and zap events of a stream read back from disk, without headers.
pub fn records_of(events: &[MetricsEvent]) -> impl Iterator<Item = &MetricsRecord> {
    events.iter().filter_map(|e| match e {
        MetricsEvent::Eval(r) => Some(r),
        _ => None,
    })
}

pub fn header_of(events: &[MetricsEvent]) -> Option<&StreamHeader> {
    events.iter().find_map(|e| match e {
        MetricsEvent::Header(h) => Some(h),
        _ => None,
    })
}

/// In-memory metrics stream for one phase of one trial.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub events: Vec<MetricsEvent>,
    started: Option<Instant>,
}

impl MetricsLog {
    pub fn new(record_wall_clock: bool) -> Self {
        MetricsLog {
            events: Vec::new(),
            started: record_wall_clock.then(Instant::now),
        }
    }

    fn last_eval_step(&self, phase: Phase) -> Option<u64> {
        self.events.iter().rev().find_map(|e| match e {
            MetricsEvent::Eval(r) if r.phase == phase => Some(r.step),
            _ => None,
        })
    }

    /// Appends an evaluation unless one was already taken at this step.
    pub fn eval(&mut self, mut record: MetricsRecord) {
        if let Some(prev) = self.last_eval_step(record.phase) {
            debug_assert!(record.step >= prev, "metrics steps must not go backwards");
            if record.step <= prev {
                return;
            }
        }
        record.wall_clock = self.started.map(|t| t.elapsed().as_secs_f64());
        self.events.push(MetricsEvent::Eval(record));
    }

    pub fn zap(&mut self, step: u64, mode: ZapMode, classes: Vec<usize>) {
        self.events.push(MetricsEvent::Zap(ZapEvent { step, mode, classes }));
    }

    pub fn records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.events.iter().filter_map(|e| match e {
            MetricsEvent::Eval(r) => Some(r),
            _ => None,
        })
    }

    pub fn zaps(&self) -> impl Iterator<Item = &ZapEvent> {
        self.events.iter().filter_map(|e| match e {
            MetricsEvent::Zap(z) => Some(z),
            _ => None,
        })
    }

    pub fn last_record(&self) -> Option<&MetricsRecord> {
        self.records().last()
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.events.extend(other.events);
    }
}

pub fn write_ndjson(path: &Path, events: &[MetricsEvent]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ndjson(path: &Path) -> Result<Vec<MetricsEvent>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|err| Error::InvalidArgument(format!("{}:{}: {err}", path.display(), i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Final numbers of one (pretrain seed, transfer seed) trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    /// Short method label, e.g. `asb+zap` or `iid`.
    pub method: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Architecture of the pre-trained network, with its pre-training head.
    pub architecture: String,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub pretrain_seed: u64,
    pub transfer_seed: u64,
    pub transfer_lr: f64,
    pub pretrain_val_acc: Option<f64>,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

impl TrialSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            phase: Phase::Transfer,
            classes_seen: 1,
            train_acc: Some(0.5),
            test_acc: Some(0.25),
            loss: Some(1.0),
            wall_clock: None,
        }
    }

    #[test]
    fn duplicate_steps_are_dropped() {
        let mut log = MetricsLog::new(false);
        log.eval(rec(3));
        log.eval(rec(3));
        log.zap(4, ZapMode::PerEpisodeClass, vec![2]);
        log.eval(rec(4));
        assert_eq!(log.records().count(), 2);
        assert_eq!(log.zaps().count(), 1);
    }

    #[test]
    fn ndjson_round_trip() {
        let mut log = MetricsLog::new(false);
        log.eval(rec(1));
        log.zap(2, ZapMode::IidCadence, vec![0, 3]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ndjson");
        write_ndjson(&p, &log.events).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("wall_clock"));
        assert_eq!(read_ndjson(&p).unwrap(), log.events);
    }
}
