//! Learning-rate and seed sweeps with best-configuration selection.
//!
//! A sweep pre-trains once per (inner lr, outer lr, pretrain seed) and reuses
//! that network for every (transfer lr, transfer seed). Output layout:
//!
//! ```text
//! <out>/<pretrain key>/checkpoint.zck
//! <out>/<pretrain key>/pretrain.ndjson
//! <out>/<pretrain key>/<transfer key>/metrics.ndjson
//! <out>/<pretrain key>/<transfer key>/summary.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::checkpoint::{self, Provenance};
use crate::config::{ExperimentConfig, PretrainMethod};
use crate::data::{ClassDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{write_ndjson, MetricsEvent, StreamHeader, TrialSummary};
use crate::model::Model;
use crate::protocols::{build_model, method_label, pretrain, transfer};
use crate::stats::{mean, std_dev};

pub const CHECKPOINT_FILE: &str = "checkpoint.zck";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain.ndjson";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainKey {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub seed: u64,
}

impl PretrainKey {
    pub fn dir_name(&self) -> String {
        format!("pre_in{}_out{}_s{}", self.inner_lr, self.outer_lr, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferKey {
    pub lr: f64,
    pub seed: u64,
}

impl TransferKey {
    pub fn dir_name(&self) -> String {
        format!("tr_lr{}_s{}", self.lr, self.seed)
    }
}

fn or_default(grid: &[f64], fallback: f64) -> Vec<f64> {
    if grid.is_empty() {
        vec![fallback]
    } else {
        grid.to_vec()
    }
}

/// Pre-training and transfer grids of `cfg`. Empty sweep lists fall back to
/// the single values in `[pretrain]` and `[transfer]`; i.i.d. pre-training has
/// no inner loop, so its inner learning rate is not swept.
pub fn grid(cfg: &ExperimentConfig) -> (Vec<PretrainKey>, Vec<TransferKey>) {
    let s = cfg.sweep.clone().unwrap_or_default();
    let inner = match cfg.pretrain.method {
        PretrainMethod::Iid => vec![cfg.pretrain.inner_lr],
        _ => or_default(&s.inner_lrs, cfg.pretrain.inner_lr),
    };
    let outer = or_default(&s.outer_lrs, cfg.pretrain.outer_lr);
    let pseeds = if s.pretrain_seeds.is_empty() { vec![cfg.pretrain.seed] } else { s.pretrain_seeds.clone() };
    let tseeds = if s.transfer_seeds.is_empty() { vec![cfg.transfer.seed] } else { s.transfer_seeds.clone() };
    let mut pre = Vec::new();
    for &inner_lr in &inner {
        for &outer_lr in &outer {
            for &seed in &pseeds {
                pre.push(PretrainKey { inner_lr, outer_lr, seed });
            }
        }
    }
    let mut tr = Vec::new();
    for &lr in &or_default(&s.transfer_lrs, cfg.transfer.lr) {
        for &seed in &tseeds {
            tr.push(TransferKey { lr, seed });
        }
    }
    (pre, tr)
}

pub fn pretrain_config(cfg: &ExperimentConfig, key: &PretrainKey) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.pretrain.inner_lr = key.inner_lr;
    c.pretrain.outer_lr = key.outer_lr;
    c.pretrain.seed = key.seed;
    c
}

pub fn transfer_config(cfg: &ExperimentConfig, pre: &PretrainKey, key: &TransferKey) -> ExperimentConfig {
    let mut c = pretrain_config(cfg, pre);
    c.transfer.lr = key.lr;
    c.transfer.seed = key.seed;
    c
}

/// Stable textual identity of a network shape.
pub fn architecture_id(model: &Model) -> String {
    serde_json::to_string(model.architecture()).expect("architecture serializes")
}

fn trial_name(cfg: &ExperimentConfig, pre: &PretrainKey, tr: Option<&TransferKey>) -> String {
    let mut s = format!(
        "method={} inner_lr={} outer_lr={} pretrain_seed={}",
        method_label(cfg),
        pre.inner_lr,
        pre.outer_lr,
        pre.seed
    );
    if let Some(t) = tr {
        s.push_str(&format!(" transfer_lr={} transfer_seed={}", t.lr, t.seed));
    }
    s
}

pub fn header(cfg: &ExperimentConfig, ds: &ClassDataset) -> MetricsEvent {
    MetricsEvent::Header(StreamHeader {
        config_hash: cfg.hash(),
        dataset_hash: ds.fingerprint(),
    })
}

fn tag(trial: String) -> impl FnOnce(Error) -> Error {
    move |e| Error::Trial {
        trial,
        source: Box::new(e),
    }
}

pub struct Pretrained {
    pub key: PretrainKey,
    pub model: Model,
    pub events: Vec<MetricsEvent>,
    pub val_acc: Option<f64>,
}

/// Pre-trains one grid point and, given `dir`, writes its checkpoint and metrics.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    key: &PretrainKey,
    dir: Option<&Path>,
) -> Result<Pretrained> {
    let c = pretrain_config(cfg, key);
    let run = || -> Result<Pretrained> {
        let out = pretrain(&c, ds, split, build_model(&c, ds, split)?)?;
        if let Some(dir) = dir {
            fs::create_dir_all(dir)?;
            let prov = Provenance {
                seed: Some(key.seed),
                config_hash: Some(c.hash()),
            };
            checkpoint::save(&dir.join(CHECKPOINT_FILE), &out.model, &prov)?;
            let mut events = vec![header(&c, ds)];
            events.extend(out.metrics.events.iter().cloned());
            write_ndjson(&dir.join(PRETRAIN_METRICS_FILE), &events)?;
        }
        Ok(Pretrained {
            key: *key,
            model: out.model,
            events: out.metrics.events,
            val_acc: out.final_val_acc,
        })
    };
    run().map_err(tag(trial_name(&c, key, None)))
}

/// Transfers one pre-trained network and, given `dir`, writes the trial's
/// combined metrics stream and summary.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    pre: &Pretrained,
    key: &TransferKey,
    dir: Option<&Path>,
) -> Result<TrialSummary> {
    let c = transfer_config(cfg, &pre.key, key);
    let run = || -> Result<TrialSummary> {
        let out = transfer(&pre.model, &c, ds, split)?;
        let summary = TrialSummary {
            method: method_label(&c),
            config_hash: c.hash(),
            dataset_hash: ds.fingerprint(),
            architecture: architecture_id(&pre.model),
            inner_lr: pre.key.inner_lr,
            outer_lr: pre.key.outer_lr,
            pretrain_seed: pre.key.seed,
            transfer_seed: key.seed,
            transfer_lr: key.lr,
            pretrain_val_acc: pre.val_acc,
            final_train_acc: out.final_train_acc,
            final_test_acc: out.final_test_acc,
        };
        if let Some(dir) = dir {
            fs::create_dir_all(dir)?;
            let mut events = vec![header(&c, ds)];
            events.extend(pre.events.iter().cloned());
            events.extend(out.metrics.events);
            write_ndjson(&dir.join(METRICS_FILE), &events)?;
            summary.save(&dir.join(SUMMARY_FILE))?;
        }
        Ok(summary)
    };
    run().map_err(tag(trial_name(&c, &pre.key, Some(key))))
}

/// Mean and spread of one configuration over its seed pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub method: String,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub transfer_lr: f64,
    pub trials: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_train_acc: f64,
    pub std_train_acc: f64,
}

/// Groups trials by (method, learning rates) in first-seen order.
pub fn score_configs(trials: &[TrialSummary]) -> Vec<ConfigScore> {
    let mut groups: Vec<(ConfigScore, Vec<f64>, Vec<f64>)> = Vec::new();
    for t in trials {
        let same = |s: &ConfigScore| {
            s.method == t.method && s.inner_lr == t.inner_lr && s.outer_lr == t.outer_lr && s.transfer_lr == t.transfer_lr
        };
        let idx = match groups.iter().position(|(s, _, _)| same(s)) {
            Some(i) => i,
            None => {
                let s = ConfigScore {
                    method: t.method.clone(),
                    inner_lr: t.inner_lr,
                    outer_lr: t.outer_lr,
                    transfer_lr: t.transfer_lr,
                    trials: 0,
                    mean_test_acc: 0.0,
                    std_test_acc: 0.0,
                    mean_train_acc: 0.0,
                    std_train_acc: 0.0,
                };
                groups.push((s, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        groups[idx].1.push(t.final_test_acc);
        groups[idx].2.push(t.final_train_acc);
    }
    groups
        .into_iter()
        .map(|(mut s, test, train)| {
            s.trials = test.len();
            s.mean_test_acc = mean(&test);
            s.std_test_acc = std_dev(&test);
            s.mean_train_acc = mean(&train);
            s.std_train_acc = std_dev(&train);
            s
        })
        .collect()
}

/// Best configuration per method by mean final test accuracy. Ties keep the
/// configuration seen first.
pub fn select_best(trials: &[TrialSummary]) -> Vec<ConfigScore> {
    let mut best: Vec<ConfigScore> = Vec::new();
    for s in score_configs(trials) {
        match best.iter_mut().find(|b| b.method == s.method) {
            Some(b) if s.mean_test_acc > b.mean_test_acc => *b = s,
            Some(_) => {}
            None => best.push(s),
        }
    }
    best
}

/// Directory and summary of every trial under `root` (any directory holding
/// a `summary.json`), in sorted path order.
pub fn find_trials(root: &Path) -> Result<Vec<(PathBuf, TrialSummary)>> {
    let mut paths = Vec::new();
    for e in WalkDir::new(root).sort_by_file_name() {
        let e = e.map_err(std::io::Error::from)?;
        if e.file_type().is_file() && e.file_name() == SUMMARY_FILE {
            paths.push(e.into_path());
        }
    }
    paths
        .into_iter()
        .map(|p| {
            let s = TrialSummary::load(&p)?;
            Ok((p.parent().unwrap_or(root).to_path_buf(), s))
        })
        .collect()
}

/// Every trial summary under `root`, in sorted path order.
pub fn load_summaries(root: &Path) -> Result<Vec<TrialSummary>> {
    Ok(find_trials(root)?.into_iter().map(|(_, s)| s).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub scores: Vec<ConfigScore>,
    pub best: Vec<ConfigScore>,
    pub trials: Vec<TrialSummary>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Pre-trains one network per key on `jobs` threads, in key order.
pub fn pretrain_all(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    keys: &[PretrainKey],
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<Pretrained>> {
    pool(jobs)?.install(|| {
        keys.par_iter()
            .map(|k| run_pretrain(cfg, ds, split, k, out.map(|o| o.join(k.dir_name())).as_deref()))
            .collect()
    })
}

/// Transfers every pre-trained network with every key; results are ordered
/// by network, then key.
pub fn transfer_all(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    pretrained: &[Pretrained],
    keys: &[TransferKey],
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<TrialSummary>> {
    let pairs: Vec<(&Pretrained, &TransferKey)> = pretrained.iter().flat_map(|p| keys.iter().map(move |t| (p, t))).collect();
    pool(jobs)?.install(|| {
        pairs
            .par_iter()
            .map(|(p, t)| {
                let dir = out.map(|o| o.join(p.key.dir_name()).join(t.dir_name()));
                run_transfer(cfg, ds, split, p, t, dir.as_deref())
            })
            .collect()
    })
}

/// Runs the full grid of `cfg` on `jobs` worker threads. Any failing trial
/// aborts the sweep with that trial's identity.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    ds: &ClassDataset,
    split: &SplitPlan,
    out: Option<&Path>,
    jobs: usize,
) -> Result<SweepReport> {
    let (pre_keys, tr_keys) = grid(cfg);
    if pre_keys.is_empty() || tr_keys.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let pretrained = pretrain_all(cfg, ds, split, &pre_keys, out, jobs)?;
    let trials = transfer_all(cfg, ds, split, &pretrained, &tr_keys, out, jobs)?;
    Ok(SweepReport {
        scores: score_configs(&trials),
        best: select_best(&trials),
        trials,
    })
}
