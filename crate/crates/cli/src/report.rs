//! Method comparison: best configuration per method, mean ± std of final
//! accuracies and pairwise Mann-Whitney U tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zaplab_core::metrics::TrialSummary;
use zaplab_core::stats::{mann_whitney_u, mean, std_dev};
use zaplab_core::sweep::{find_trials, select_best, ConfigScore};

/// Trials of one method at its best configuration.
#[derive(Debug, Clone)]
pub struct MethodGroup {
    pub name: String,
    pub source: PathBuf,
    pub best: ConfigScore,
    pub trials: Vec<(PathBuf, TrialSummary)>,
}

impl MethodGroup {
    pub fn test_accs(&self) -> Vec<f64> {
        self.trials.iter().map(|(_, t)| t.final_test_acc).collect()
    }

    pub fn train_accs(&self) -> Vec<f64> {
        self.trials.iter().map(|(_, t)| t.final_train_acc).collect()
    }

    /// Pre-training validation accuracies, when every trial recorded one.
    pub fn pretrain_accs(&self) -> Option<Vec<f64>> {
        self.trials.iter().map(|(_, t)| t.pretrain_val_acc).collect()
    }
}

/// Reads one directory of trials (a sweep output or any tree of trial
/// directories) holding a single method, and keeps its best configuration.
pub fn load_group(dir: &Path) -> Result<MethodGroup> {
    let all = find_trials(dir).with_context(|| format!("reading trials under {}", dir.display()))?;
    if all.is_empty() {
        bail!("no trial summaries under {}", dir.display());
    }
    let method = all[0].1.method.clone();
    if let Some((p, t)) = all.iter().find(|(_, t)| t.method != method) {
        bail!("{} mixes methods `{method}` and `{}` ({})", dir.display(), t.method, p.display());
    }
    let summaries: Vec<TrialSummary> = all.iter().map(|(_, s)| s.clone()).collect();
    let best = select_best(&summaries).remove(0);
    let trials = all
        .into_iter()
        .filter(|(_, t)| t.inner_lr == best.inner_lr && t.outer_lr == best.outer_lr && t.transfer_lr == best.transfer_lr)
        .collect();
    Ok(MethodGroup {
        name: method,
        source: dir.to_path_buf(),
        best,
        trials,
    })
}

/// Fails unless every trial shares one architecture and one dataset.
pub fn check_poolable(groups: &[MethodGroup]) -> Result<()> {
    let mut reference: Option<(&str, &str, &Path)> = None;
    for g in groups {
        for (p, t) in &g.trials {
            match reference {
                None => reference = Some((&t.architecture, &t.dataset_hash, p)),
                Some((arch, data, first)) => {
                    if t.architecture != arch {
                        bail!("architecture of {} differs from {}", p.display(), first.display());
                    }
                    if t.dataset_hash != data {
                        bail!("dataset hash of {} differs from {}", p.display(), first.display());
                    }
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        MeanStd { mean: mean(xs), std: std_dev(xs) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub source: String,
    pub trials: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub transfer_lr: f64,
    pub pretrain_val: Option<MeanStd>,
    pub transfer_train: MeanStd,
    pub transfer_test: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub u: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<MethodRow>,
    /// Two-sided tests on final transfer test accuracy.
    pub tests: Vec<PairTest>,
}

pub const MIN_TRIALS: usize = 2;

pub fn compare(groups: &[MethodGroup]) -> Result<CompareReport> {
    if groups.len() < 2 {
        bail!("compare needs at least two methods");
    }
    for g in groups {
        if g.trials.len() < MIN_TRIALS {
            bail!(
                "{} has {} trial(s) at its best configuration; at least {MIN_TRIALS} are needed",
                g.source.display(),
                g.trials.len()
            );
        }
    }
    check_poolable(groups)?;
    let rows = groups
        .iter()
        .map(|g| MethodRow {
            method: g.name.clone(),
            source: g.source.display().to_string(),
            trials: g.trials.len(),
            inner_lr: g.best.inner_lr,
            outer_lr: g.best.outer_lr,
            transfer_lr: g.best.transfer_lr,
            pretrain_val: g.pretrain_accs().map(|v| MeanStd::of(&v)),
            transfer_train: MeanStd::of(&g.train_accs()),
            transfer_test: MeanStd::of(&g.test_accs()),
        })
        .collect();
    let mut tests = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let r = mann_whitney_u(&groups[i].test_accs(), &groups[j].test_accs())?;
            tests.push(PairTest {
                a: groups[i].name.clone(),
                b: groups[j].name.clone(),
                u: r.u,
                p_value: r.p_value,
            });
        }
    }
    Ok(CompareReport { rows, tests })
}

fn pct(m: &MeanStd) -> String {
    format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std)
}

/// Plain-text table, accuracies in percent.
pub fn render(report: &CompareReport) -> String {
    let mut s = String::new();
    let w = report.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(
        s,
        "{:<w$}  {:>3}  {:>11}  {:>14}  {:>14}  {:>14}",
        "method", "n", "transfer lr", "pretrain val", "transfer train", "transfer test"
    );
    for r in &report.rows {
        let pre = r.pretrain_val.as_ref().map(pct).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<w$}  {:>3}  {:>11}  {:>14}  {:>14}  {:>14}",
            r.method,
            r.trials,
            r.transfer_lr,
            pre,
            pct(&r.transfer_train),
            pct(&r.transfer_test)
        );
    }
    let _ = writeln!(s, "\ntwo-sided Mann-Whitney U on final transfer test accuracy:");
    for t in &report.tests {
        let _ = writeln!(s, "  {} vs {}: U = {}, p = {:.4}", t.a, t.b, t.u, t.p_value);
    }
    s
}
