//! Library behind the `zaplab` binary.

pub mod gradcheck;
pub mod manifest;
pub mod plot;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use zaplab_core::checkpoint;
use zaplab_core::config::ExperimentConfig;
use zaplab_core::data::{make_split, ClassDataset, SplitPlan};
use zaplab_core::protocols::{evaluate, method_label};
use zaplab_core::sweep::{self, PretrainKey, Pretrained, SweepReport, TransferKey};

use crate::manifest::{RunManifest, TrialStatus};

#[derive(Debug, Parser)]
#[command(name = "zaplab", version, about = "Zapping pre-training and transfer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Where the experiment config comes from.
#[derive(Debug, Clone, Args)]
pub struct ConfigSource {
    /// TOML config file (may name a `preset` to extend).
    #[arg(long, conflicts_with_all = ["preset", "manifest"])]
    pub config: Option<PathBuf>,
    /// Built-in preset, e.g. `synth-desk` or `omniglot-table4`.
    #[arg(long, conflicts_with = "manifest")]
    pub preset: Option<String>,
    /// Replay the config embedded in an earlier run's manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<(ExperimentConfig, Option<String>)> {
        match (&self.config, &self.preset, &self.manifest) {
            (Some(p), _, _) => Ok((ExperimentConfig::from_file(p)?, Some(p.display().to_string()))),
            (_, Some(name), _) => Ok((ExperimentConfig::preset(name)?, None)),
            (_, _, Some(m)) => {
                let m = RunManifest::load(m)?;
                Ok((m.config, m.config_path))
            }
            _ => bail!("one of --config, --preset or --manifest is required"),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train one network; writes a checkpoint, metrics and a manifest.
    Pretrain {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a pre-trained checkpoint to the held-out classes.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the learning-rate and seed grid of a config.
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent trials (defaults to the number of physical cores).
        #[arg(long, default_value_t = num_cpus::get_physical())]
        jobs: usize,
    },
    /// Compare methods, one trial directory per method.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Draw trajectory and final-accuracy charts as SVG.
    Plot {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients and meta-gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Dataset and split of a config, with the dataset root named on failure.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(ClassDataset, SplitPlan)> {
    let ds = cfg.data.load().with_context(|| match cfg.data.resolved_root() {
        Some(root) => format!("loading dataset from {}", root.display()),
        None => "generating synthetic dataset".to_string(),
    })?;
    let d = &cfg.data;
    let split = make_split(&ds, d.pretrain_classes, d.transfer_classes, d.split_seed)?;
    Ok((ds, split))
}

fn pretrain_key(cfg: &ExperimentConfig) -> PretrainKey {
    PretrainKey {
        inner_lr: cfg.pretrain.inner_lr,
        outer_lr: cfg.pretrain.outer_lr,
        seed: cfg.pretrain.seed,
    }
}

fn status<T>(trial: &str, r: &zaplab_core::Result<T>) -> TrialStatus {
    TrialStatus {
        trial: trial.to_string(),
        ok: r.is_ok(),
        error: r.as_ref().err().map(|e| e.to_string()),
    }
}

pub fn cmd_pretrain(source: &ConfigSource, out: &Path) -> Result<RunManifest> {
    let (cfg, path) = source.resolve()?;
    let (ds, split) = load_data(&cfg)?;
    let mut manifest = RunManifest::new("pretrain", path, &cfg, ds.fingerprint(), out);
    let key = pretrain_key(&cfg);
    let r = sweep::run_pretrain(&cfg, &ds, &split, &key, Some(out));
    manifest.trials.push(status(&format!("{} pretrain_seed={}", method_label(&cfg), key.seed), &r));
    manifest.save(out)?;
    let p = r?;
    println!(
        "pre-trained {} (seed {}): validation accuracy {}; wrote {}",
        method_label(&cfg),
        key.seed,
        p.val_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
        out.display()
    );
    Ok(manifest)
}

pub fn cmd_transfer(ckpt: &Path, source: &ConfigSource, out: &Path) -> Result<RunManifest> {
    let (cfg, path) = source.resolve()?;
    let (ds, split) = load_data(&cfg)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let expected = cfg.architecture(ds.image_shape(), split.pretrain.len());
    let expected = zaplab_core::model::Architecture::Convnet(expected);
    if *model.architecture() != expected {
        bail!(
            "architecture mismatch: checkpoint {} holds {:?} but the config describes {:?}",
            ckpt.display(),
            model.architecture(),
            expected
        );
    }
    let mut manifest = RunManifest::new("transfer", path, &cfg, ds.fingerprint(), out);
    let val_acc = evaluate(&model, &ds, &split.pretrain_validation(&ds))?.map(|e| e.accuracy);
    let pre = Pretrained {
        key: pretrain_key(&cfg),
        model,
        events: Vec::new(),
        val_acc,
    };
    let key = TransferKey {
        lr: cfg.transfer.lr,
        seed: cfg.transfer.seed,
    };
    let r = sweep::run_transfer(&cfg, &ds, &split, &pre, &key, Some(out));
    manifest.trials.push(status(&format!("transfer_lr={} transfer_seed={}", key.lr, key.seed), &r));
    manifest.save(out)?;
    let s = r?;
    println!(
        "transfer finished: train accuracy {:.4}, test accuracy {:.4}; wrote {}",
        s.final_train_acc,
        s.final_test_acc,
        out.display()
    );
    Ok(manifest)
}

pub fn cmd_sweep(source: &ConfigSource, out: &Path, jobs: usize) -> Result<(RunManifest, Option<SweepReport>)> {
    let (cfg, path) = source.resolve()?;
    let (ds, split) = load_data(&cfg)?;
    let mut manifest = RunManifest::new("sweep", path, &cfg, ds.fingerprint(), out);
    fs::create_dir_all(out)?;
    let r = sweep::run_sweep(&cfg, &ds, &split, Some(out), jobs);
    match &r {
        Ok(report) => {
            for t in &report.trials {
                manifest.trials.push(TrialStatus {
                    trial: format!(
                        "method={} inner_lr={} outer_lr={} pretrain_seed={} transfer_lr={} transfer_seed={}",
                        t.method, t.inner_lr, t.outer_lr, t.pretrain_seed, t.transfer_lr, t.transfer_seed
                    ),
                    ok: true,
                    error: None,
                });
            }
            fs::write(out.join("report.json"), serde_json::to_vec_pretty(report)?)?;
        }
        Err(zaplab_core::Error::Trial { trial, source }) => manifest.trials.push(TrialStatus {
            trial: trial.clone(),
            ok: false,
            error: Some(source.to_string()),
        }),
        Err(e) => manifest.trials.push(TrialStatus {
            trial: "sweep".into(),
            ok: false,
            error: Some(e.to_string()),
        }),
    }
    manifest.save(out)?;
    let report = r?;
    for b in &report.best {
        println!(
            "{}: best transfer lr {} (inner {}, outer {}): test {:.4} ± {:.4} over {} trials",
            b.method, b.transfer_lr, b.inner_lr, b.outer_lr, b.mean_test_acc, b.std_test_acc, b.trials
        );
    }
    Ok((manifest, Some(report)))
}

pub fn cmd_compare(dirs: &[PathBuf], json: Option<&Path>) -> Result<report::CompareReport> {
    let groups = dirs.iter().map(|d| report::load_group(d)).collect::<Result<Vec<_>>>()?;
    let rep = report::compare(&groups)?;
    print!("{}", report::render(&rep));
    if let Some(p) = json {
        fs::write(p, serde_json::to_vec_pretty(&rep)?)?;
    }
    Ok(rep)
}

pub fn cmd_plot(dirs: &[PathBuf], out: &Path) -> Result<plot::PlotOutput> {
    if dirs.is_empty() {
        bail!("nothing to plot");
    }
    let groups = dirs.iter().map(|d| report::load_group(d)).collect::<Result<Vec<_>>>()?;
    let p = plot::plot(&groups, out)?;
    for f in &p.files {
        println!("wrote {}", f.display());
    }
    Ok(p)
}

/// Runs both check suites; returns whether every check passed.
pub fn cmd_gradcheck(seed: u64) -> bool {
    let mut ok = true;
    for c in gradcheck::gradient_suite(seed).into_iter().chain(gradcheck::meta_suite(seed)) {
        ok &= c.passed();
        println!(
            "{} {:<55} error {:.3e} (tolerance {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance
        );
    }
    ok
}

/// Dispatches a parsed command line. `Ok(false)` means the command ran but
/// something it checked did not pass.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { source, out } => Ok(cmd_pretrain(&source, &out)?.all_ok()),
        Command::Transfer { checkpoint, source, out } => Ok(cmd_transfer(&checkpoint, &source, &out)?.all_ok()),
        Command::Sweep { source, out, jobs } => Ok(cmd_sweep(&source, &out, jobs)?.0.all_ok()),
        Command::Compare { dirs, json } => cmd_compare(&dirs, json.as_deref()).map(|_| true),
        Command::Plot { dirs, out } => cmd_plot(&dirs, &out).map(|_| true),
        Command::Gradcheck { seed } => Ok(cmd_gradcheck(seed)),
    }
}
