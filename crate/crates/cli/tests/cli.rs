use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use zaplab_cli::manifest::{RunManifest, MANIFEST_FILE};
use zaplab_cli::{cmd_compare, cmd_plot, cmd_sweep, ConfigSource};
use zaplab_core::metrics::{header_of, read_ndjson, records_of, TrialSummary};
use zaplab_core::sweep::{CHECKPOINT_FILE, METRICS_FILE, PRETRAIN_METRICS_FILE, SUMMARY_FILE};

const TINY: &str = r#"
preset = "synth-desk"
[data]
train_per_class = 4
pretrain_classes = 6
transfer_classes = 4
[data.synth]
classes = 10
per_class = 6
image_size = 8
seed = 3
[model]
channels = 4
[pretrain]
inner_steps = 2
remember = 3
outer_steps = 3
batch_size = 8
eval_every = 1
[transfer]
batch_size = 8
eval_every_classes = 1
"#;

fn zaplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zaplab")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn pretrain_writes_checkpoint_metrics_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let out = tmp.path().join("run");
    let o = zaplab(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [CHECKPOINT_FILE, PRETRAIN_METRICS_FILE, MANIFEST_FILE] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let events = read_ndjson(&out.join(PRETRAIN_METRICS_FILE)).unwrap();
    assert!(header_of(&events).is_some());
    // One evaluation before training and one after each of the three outer steps.
    let steps: Vec<u64> = records_of(&events).map(|r| r.step).collect();
    assert_eq!(steps.len(), 4);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert!(m.all_ok());
    assert_eq!(m.config_hash, m.config.hash());
}

#[test]
fn unknown_method_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "preset = \"synth-desk\"\n[pretrain]\nmethod = \"maml\"\n").unwrap();
    let o = zaplab(&["pretrain", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("method"), "{err}");
}

#[test]
fn missing_config_source_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let o = zaplab(&["pretrain", "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--config"));
}

#[test]
fn manifest_replay_reproduces_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[pretrain.zap]\nmode = \"per_episode_class\"\n");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(zaplab(&["pretrain", "--config", s(&cfg), "--out", s(&a)]).status.success());
    fs::remove_file(&cfg).unwrap();
    let o = zaplab(&["pretrain", "--manifest", s(&a.join(MANIFEST_FILE)), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join(PRETRAIN_METRICS_FILE)).unwrap(),
        fs::read(b.join(PRETRAIN_METRICS_FILE)).unwrap()
    );
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn tampered_manifest_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let a = tmp.path().join("a");
    assert!(zaplab(&["pretrain", "--config", s(&cfg), "--out", s(&a)]).status.success());
    let path = a.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("\"outer_steps\": 3", "\"outer_steps\": 4", 1);
    fs::write(&path, text).unwrap();
    let o = zaplab(&["pretrain", "--manifest", s(&path), "--out", s(&tmp.path().join("b"))]);
    assert!(!o.status.success());
}

#[test]
fn transfer_runs_on_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let pre = tmp.path().join("pre");
    let tr = tmp.path().join("tr");
    assert!(zaplab(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]).status.success());
    let o = zaplab(&["transfer", "--checkpoint", s(&pre.join(CHECKPOINT_FILE)), "--config", s(&cfg), "--out", s(&tr)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = TrialSummary::load(&tr.join(SUMMARY_FILE)).unwrap();
    assert!((0.0..=1.0).contains(&summary.final_test_acc));
    assert!(summary.pretrain_val_acc.is_some());
    let events = read_ndjson(&tr.join(METRICS_FILE)).unwrap();
    // Four transfer classes, evaluated after each one.
    let seen: Vec<usize> = records_of(&events).map(|r| r.classes_seen).collect();
    assert_eq!(seen, vec![1, 2, 3, 4]);
}

#[test]
fn transfer_rejects_a_mismatched_architecture() {
    let tmp = TempDir::new().unwrap();
    let three = write_config(tmp.path(), "three.toml", "");
    let four = write_config(tmp.path(), "four.toml", "");
    let text = fs::read_to_string(&four).unwrap().replace("channels = 4", "channels = 4\nblocks = 4\nfinal_pool = false");
    fs::write(&four, text.replace("image_size = 8", "image_size = 16")).unwrap();
    let three_img = fs::read_to_string(&three).unwrap().replace("image_size = 8", "image_size = 16");
    fs::write(&three, three_img).unwrap();
    let pre = tmp.path().join("pre");
    assert!(zaplab(&["pretrain", "--config", s(&three), "--out", s(&pre)]).status.success());
    let o = zaplab(&[
        "transfer",
        "--checkpoint",
        s(&pre.join(CHECKPOINT_FILE)),
        "--config",
        s(&four),
        "--out",
        s(&tmp.path().join("tr")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("architecture mismatch"), "{}", stderr(&o));
}

fn sweep(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let cfg = write_config(
        dir,
        &format!("{name}.toml"),
        &format!("{extra}\n[sweep]\npretrain_seeds = [0, 1, 2]\ntransfer_seeds = [0]\ntransfer_lrs = [0.01, 0.1]\n"),
    );
    let out = dir.join(name);
    let src = ConfigSource { config: Some(cfg), preset: None, manifest: None };
    let (m, report) = cmd_sweep(&src, &out, 2).unwrap();
    assert!(m.all_ok());
    assert_eq!(report.unwrap().trials.len(), 6);
    out
}

#[test]
fn compare_and_plot_real_sweeps() {
    let tmp = TempDir::new().unwrap();
    let plain = sweep(tmp.path(), "asb", "[pretrain.zap]\nmode = \"off\"\n");
    let zap = sweep(tmp.path(), "asbzap", "[pretrain.zap]\nmode = \"per_episode_class\"\n");

    // The same trials on both sides are indistinguishable.
    let same = cmd_compare(&[plain.clone(), plain.clone()], None).unwrap();
    assert!((same.tests[0].p_value - 1.0).abs() < 1e-12);

    let json = tmp.path().join("cmp.json");
    let rep = cmd_compare(&[plain.clone(), zap.clone()], Some(&json)).unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert_eq!(rep.rows[0].trials, 3);
    assert!(json.is_file());

    let figs = tmp.path().join("figs");
    let out = cmd_plot(&[plain, zap], &figs).unwrap();
    assert_eq!(out.files.len(), 3);
    assert_eq!(out.test_curve.series.len(), 2);
    assert!(!out.test_curve.series[0].dashed);
    assert!(out.test_curve.series[1].dashed);
    let svg = fs::read_to_string(&out.files[1]).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);
    assert!(svg.contains("classes seen") && svg.contains("accuracy"));
    assert!(svg.contains("stroke-dasharray=\"6 4\""));
    let bars = fs::read_to_string(&out.files[2]).unwrap();
    for b in &out.bars {
        assert!(bars.contains(&format!("data-std=\"{}\"", b.std)), "bar {} {}", b.method, b.kind);
    }
}

fn planted(dir: &Path, method: &str, accs: &[f64]) -> PathBuf {
    let root = dir.join(method.replace('+', "_"));
    for (i, &a) in accs.iter().enumerate() {
        let d = root.join(format!("t{i}"));
        fs::create_dir_all(&d).unwrap();
        TrialSummary {
            method: method.into(),
            config_hash: "c".into(),
            dataset_hash: "d".into(),
            architecture: "arch".into(),
            inner_lr: 0.01,
            outer_lr: 0.001,
            pretrain_seed: i as u64,
            transfer_seed: 0,
            transfer_lr: 0.01,
            pretrain_val_acc: Some(0.5),
            final_train_acc: a,
            final_test_acc: a,
        }
        .save(&d.join(SUMMARY_FILE))
        .unwrap();
    }
    root
}

#[test]
fn compare_detects_a_planted_separation() {
    let tmp = TempDir::new().unwrap();
    let lo = planted(tmp.path(), "asb", &[0.10, 0.12, 0.11, 0.13, 0.09]);
    let hi = planted(tmp.path(), "asb+zap", &[0.30, 0.32, 0.31, 0.29, 0.33]);
    let rep = cmd_compare(&[lo, hi], None).unwrap();
    // Complete separation of 5 vs 5: two-sided exact p = 2/252.
    assert!((rep.tests[0].p_value - 2.0 / 252.0).abs() < 1e-12);
    assert_eq!(rep.tests[0].u, 0.0);
}

#[test]
fn compare_refuses_a_single_trial() {
    let tmp = TempDir::new().unwrap();
    let a = planted(tmp.path(), "asb", &[0.1]);
    let b = planted(tmp.path(), "asb+zap", &[0.3, 0.4]);
    let err = cmd_compare(&[a, b], None).unwrap_err().to_string();
    assert!(err.contains("at least 2"), "{err}");
}

#[test]
fn compare_refuses_mixed_datasets() {
    let tmp = TempDir::new().unwrap();
    let a = planted(tmp.path(), "asb", &[0.1, 0.2]);
    let b = planted(tmp.path(), "asb+zap", &[0.3, 0.4]);
    let p = b.join("t0").join(SUMMARY_FILE);
    let mut t = TrialSummary::load(&p).unwrap();
    t.dataset_hash = "other".into();
    t.save(&p).unwrap();
    assert!(cmd_compare(&[a, b], None).unwrap_err().to_string().contains("dataset hash"));
}

#[test]
fn gradcheck_command_passes() {
    let o = zaplab(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert!(!out.contains("FAIL"));
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() > 20);
}
