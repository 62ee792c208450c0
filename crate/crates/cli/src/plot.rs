//! SVG line and bar charts of transfer trajectories and final accuracies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use zaplab_core::metrics::{read_ndjson, records_of, Phase};
use zaplab_core::stats::{mean, std_dev};
use zaplab_core::sweep::METRICS_FILE;

use crate::report::MethodGroup;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
pub const DASH: &str = "6 4";

/// (classes seen, accuracy) pairs.
pub type Points = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub dashed: bool,
    pub points: Points,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub method: String,
    pub kind: String,
    pub mean: f64,
    pub std: f64,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn is_zap(method: &str) -> bool {
    method.contains("+zap")
}

struct Frame {
    x0: f64,
    x1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(y: f64) -> f64 {
        H - BOTTOM - y.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
    }
}

fn open_svg(s: &mut String, title: &str, desc: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<desc>{}</desc>", esc(desc));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, (LEFT + W - RIGHT) / 2.0, esc(title));
}

fn y_axis(s: &mut String) {
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let py = Frame::py(y);
        let _ = writeln!(s, r#"<line x1="{}" y1="{py}" x2="{LEFT}" y2="{py}" stroke="black"/>"#, LEFT - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, LEFT - 7.0, py + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">accuracy</text>"#,
        (TOP + H - BOTTOM) / 2.0
    );
}

/// Line chart over classes seen; zap methods are dashed.
pub fn line_svg(chart: &LineChart, desc: &str) -> String {
    let xs = chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    let f = Frame { x0, x1 };
    let mut s = String::new();
    open_svg(&mut s, &chart.title, desc);
    y_axis(&mut s);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - BOTTOM, W - RIGHT);
    let ticks = 5;
    for i in 0..=ticks {
        let x = x0 + (x1 - x0) * i as f64 / ticks as f64;
        let px = f.px(x);
        let _ = writeln!(s, r#"<line x1="{px}" y1="{0}" x2="{px}" y2="{1}" stroke="black"/>"#, H - BOTTOM, H - BOTTOM + 4.0);
        let _ = writeln!(s, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, (x * 10.0).round() / 10.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">classes seen</text>"#, (LEFT + W - RIGHT) / 2.0, H - 12.0);
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if series.dashed { format!(r#" stroke-dasharray="{DASH}""#) } else { String::new() };
        let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), Frame::py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
            esc(&series.label),
            pts.join(" ")
        );
        for &(x, y) in &series.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, f.px(x), Frame::py(y));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 24.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 30.0, ly + 4.0, esc(&series.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars (one group per method) with ±1 sample-std error bars.
pub fn bar_svg(title: &str, bars: &[Bar], desc: &str) -> String {
    let mut s = String::new();
    open_svg(&mut s, title, desc);
    y_axis(&mut s);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, H - BOTTOM, W - RIGHT);
    let mut methods: Vec<&str> = Vec::new();
    let mut kinds: Vec<&str> = Vec::new();
    for b in bars {
        if !methods.contains(&b.method.as_str()) {
            methods.push(&b.method);
        }
        if !kinds.contains(&b.kind.as_str()) {
            kinds.push(&b.kind);
        }
    }
    let slot = (W - LEFT - RIGHT) / methods.len().max(1) as f64;
    let bw = slot * 0.7 / kinds.len().max(1) as f64;
    for b in bars {
        let m = methods.iter().position(|m| *m == b.method).unwrap();
        let k = kinds.iter().position(|k| *k == b.kind).unwrap();
        let x = LEFT + slot * m as f64 + slot * 0.15 + bw * k as f64;
        let (top, base) = (Frame::py(b.mean), Frame::py(0.0));
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect class="bar" data-method="{}" data-kind="{}" data-mean="{}" x="{x:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="{color}"/>"#,
            esc(&b.method),
            esc(&b.kind),
            b.mean,
            base - top
        );
        let cx = x + bw / 2.0;
        let (lo, hi) = (Frame::py(b.mean - b.std), Frame::py(b.mean + b.std));
        let _ = writeln!(
            s,
            r#"<path class="errorbar" data-std="{}" d="M{cx:.2},{lo:.2}V{hi:.2}M{:.2},{lo:.2}h{:.2}M{:.2},{hi:.2}h{:.2}" stroke="black" fill="none"/>"#,
            b.std,
            cx - bw / 4.0,
            bw / 2.0,
            cx - bw / 4.0,
            bw / 2.0
        );
    }
    for (m, name) in methods.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + slot * (m as f64 + 0.5),
            H - BOTTOM + 18.0,
            esc(name)
        );
    }
    for (k, kind) in kinds.iter().enumerate() {
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="14" height="10" fill="{}"/>"#, ly - 6.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 20.0, ly + 4.0, esc(kind));
    }
    s.push_str("</svg>\n");
    s
}

/// Mean transfer trajectory of a group: for every `classes_seen` value, the
/// last transfer record of each trial, averaged over trials.
fn trajectory(group: &MethodGroup) -> Result<(Points, Points)> {
    let mut train: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut test: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (dir, _) in &group.trials {
        let path = dir.join(METRICS_FILE);
        let events = read_ndjson(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut last: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for r in records_of(&events).filter(|r| r.phase == Phase::Transfer) {
            last.insert(r.classes_seen, (r.train_acc, r.test_acc));
        }
        for (c, (a, b)) in last {
            if let Some(a) = a {
                train.entry(c).or_default().push(a);
            }
            if let Some(b) = b {
                test.entry(c).or_default().push(b);
            }
        }
    }
    let avg = |m: BTreeMap<usize, Vec<f64>>| m.into_iter().map(|(c, v)| (c as f64, mean(&v))).collect();
    Ok((avg(train), avg(test)))
}

pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub train_curve: LineChart,
    pub test_curve: LineChart,
    pub bars: Vec<Bar>,
}

pub const TRAIN_CURVE_FILE: &str = "train_so_far.svg";
pub const TEST_CURVE_FILE: &str = "held_out.svg";
pub const BARS_FILE: &str = "final_accuracy.svg";

/// Writes the two trajectory charts and the final-accuracy bar chart.
pub fn plot(groups: &[MethodGroup], out: &Path) -> Result<PlotOutput> {
    if groups.is_empty() {
        bail!("nothing to plot");
    }
    let mut train_curve = LineChart {
        title: "Accuracy on classes seen so far (training images)".into(),
        series: Vec::new(),
    };
    let mut test_curve = LineChart {
        title: "Accuracy on classes seen so far (held-out images)".into(),
        series: Vec::new(),
    };
    let mut bars = Vec::new();
    let mut hashes = Vec::new();
    for g in groups {
        let (tr, te) = trajectory(g)?;
        let dashed = is_zap(&g.name);
        train_curve.series.push(Series { label: g.name.clone(), dashed, points: tr });
        test_curve.series.push(Series { label: g.name.clone(), dashed, points: te });
        if let Some(pre) = g.pretrain_accs() {
            bars.push(Bar {
                method: g.name.clone(),
                kind: "pre-training".into(),
                mean: mean(&pre),
                std: std_dev(&pre),
            });
        }
        let test = g.test_accs();
        bars.push(Bar {
            method: g.name.clone(),
            kind: "transfer".into(),
            mean: mean(&test),
            std: std_dev(&test),
        });
        for (_, t) in &g.trials {
            let h = format!("{} config {}", t.method, t.config_hash);
            if !hashes.contains(&h) {
                hashes.push(h);
            }
        }
    }
    let desc = hashes.join("; ");
    fs::create_dir_all(out)?;
    let files = vec![out.join(TRAIN_CURVE_FILE), out.join(TEST_CURVE_FILE), out.join(BARS_FILE)];
    fs::write(&files[0], line_svg(&train_curve, &desc))?;
    fs::write(&files[1], line_svg(&test_curve, &desc))?;
    fs::write(&files[2], bar_svg("Final accuracy (mean ± std)", &bars, &desc))?;
    Ok(PlotOutput {
        files,
        train_curve,
        test_curve,
        bars,
    })
}
