//! CSV tables and SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use hype_core::pipeline::{episodes_to_exceed, Method, TrialResult};
use hype_core::theory::SweepRow;

use crate::config::ConfigError;

/// `x` with 9 significant digits: fixed notation for moderate magnitudes,
/// scientific otherwise.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0.00000000".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..9).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, x)
    } else {
        format!("{x:.8e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(sig9).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub const TRIALS_HEADER: [&str; 8] = [
    "trial_id",
    "method",
    "episode",
    "return",
    "normalized_return",
    "selected_model",
    "correct",
    "steps",
];

/// One row per trial and episode, in trial order.
pub fn trials_csv(results: &[TrialResult]) -> Result<String> {
    let mut sorted: Vec<&TrialResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.trial_id);
    let rows = sorted.into_iter().flat_map(|r| {
        (0..r.returns.len()).map(move |e| {
            vec![
                r.trial_id.to_string(),
                r.method.name().to_string(),
                (e + 1).to_string(),
                sig9(r.returns[e]),
                sig9(r.normalized_returns[e]),
                r.selected_model_id.to_string(),
                r.correct_selection.to_string(),
                r.steps_per_episode[e].to_string(),
            ]
        })
    });
    csv_string(&TRIALS_HEADER, rows)
}

/// Reads a trials table back. Only the columns of the table are filled in;
/// the experiment, task and re-selection fields are left empty.
pub fn parse_trials_csv(text: &str) -> std::result::Result<Vec<TrialResult>, ConfigError> {
    let bad = |m: String| ConfigError(format!("trials table: {m}"));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRIALS_HEADER {
        return Err(bad(format!("expected columns {TRIALS_HEADER:?}, got {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut trials: Vec<TrialResult> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |i: usize| bad(format!("row {}: cannot parse {} = {:?}", line + 1, TRIALS_HEADER[i], field(i)));
        let trial_id: usize = field(0).parse().map_err(|_| parse_err(0))?;
        let method: Method = field(1).parse().map_err(|_| parse_err(1))?;
        let episode: usize = field(2).parse().map_err(|_| parse_err(2))?;
        let ret: f64 = field(3).parse().map_err(|_| parse_err(3))?;
        let norm: f64 = field(4).parse().map_err(|_| parse_err(4))?;
        let selected: usize = field(5).parse().map_err(|_| parse_err(5))?;
        let correct: bool = field(6).parse().map_err(|_| parse_err(6))?;
        let steps: usize = field(7).parse().map_err(|_| parse_err(7))?;
        if trials.last().is_none_or(|t| t.trial_id != trial_id) {
            trials.push(TrialResult {
                trial_id,
                method,
                true_base_task_id: 0,
                selected_model_id: selected,
                correct_selection: correct,
                experiment: Vec::new(),
                degenerate: false,
                returns: Vec::new(),
                normalized_returns: Vec::new(),
                steps_per_episode: Vec::new(),
                episodes_to_exceed_02: None,
                episodes_to_exceed_08: None,
                reselections: 0,
                selection_steps: 0,
            });
        }
        let t = trials.last_mut().expect("pushed above");
        if t.method != method || episode != t.returns.len() + 1 {
            return Err(bad(format!("row {}: episodes of trial {trial_id} out of order", line + 1)));
        }
        t.selected_model_id = selected;
        t.correct_selection = correct;
        t.returns.push(ret);
        t.normalized_returns.push(norm);
        t.steps_per_episode.push(steps);
    }
    if trials.is_empty() {
        return Err(bad("no rows".into()));
    }
    for t in &mut trials {
        t.episodes_to_exceed_02 = episodes_to_exceed(&t.normalized_returns, 0.2);
        t.episodes_to_exceed_08 = episodes_to_exceed(&t.normalized_returns, 0.8);
    }
    Ok(trials)
}

pub fn summary_csv(summary: &hype_core::pipeline::Summary) -> Result<String> {
    let rows = summary.per_episode.iter().map(|e| {
        vec![
            summary.method.name().to_string(),
            e.episode.to_string(),
            sig9(e.mean_normalized_return),
            sig9(e.std_normalized_return),
            sig9(e.mean_steps),
        ]
    });
    csv_string(
        &["method", "episode", "mean_normalized_return", "std_normalized_return", "mean_steps"],
        rows,
    )
}

pub fn theory_csv(rows: &[SweepRow]) -> Result<String> {
    let out = rows.iter().map(|r| {
        vec![
            r.policy.name().to_string(),
            r.horizon.to_string(),
            r.reps.to_string(),
            sig9(r.epsilon_or_alpha),
            sig9(r.error_rate),
            opt(r.bound_value),
            opt(r.ior),
        ]
    });
    csv_string(
        &["policy", "T", "reps", "epsilon_or_alpha", "error_rate", "bound_value", "ior"],
        out,
    )
}

pub fn loss_csv(traces: &[(usize, &hype_core::dynamics::LossTrace)]) -> Result<String> {
    let rows = traces.iter().flat_map(|(id, t)| {
        t.train.iter().enumerate().map(move |(e, l)| {
            vec![
                id.to_string(),
                (e + 1).to_string(),
                sig9(*l),
                t.validation.get(e).map(|v| sig9(*v)).unwrap_or_default(),
            ]
        })
    });
    csv_string(&["model_id", "epoch", "train_loss", "validation_loss"], rows)
}

pub fn generic_csv(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    csv_string(header, rows)
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Half-width of a shaded band around each point.
    pub spread: Option<Vec<f64>>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_y: bool,
    pub series: Vec<Series>,
}

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

impl Chart<'_> {
    pub fn to_svg(&self) -> String {
        let tr = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                if self.log_y && y <= 0.0 {
                    continue;
                }
                let d = s.spread.as_ref().map_or(0.0, |v| v[i]);
                xs.push(x);
                ys.push(tr(y + d));
                ys.push(tr(if self.log_y { y } else { y - d }));
            }
        }
        let (mut x0, mut x1) = bounds(&xs);
        let (mut y0, mut y1) = bounds(&ys);
        if x1 <= x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 <= y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        if self.log_y {
            y0 = y0.floor();
            y1 = y1.ceil();
        }
        let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            escape(self.title)
        );
        let (bx, by) = (H - BOTTOM, W - RIGHT);
        let _ = writeln!(
            svg,
            r#"<path d="M{LEFT} {TOP} L{LEFT} {bx} L{by} {bx}" fill="none" stroke="black"/>"#
        );
        for i in 0..=5 {
            let x = x0 + (x1 - x0) * i as f64 / 5.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(x),
                bx + 18.0,
                tick(x)
            );
            let y = y0 + (y1 - y0) * i as f64 / 5.0;
            let label = if self.log_y { format!("1e{}", tick(y)) } else { tick(y) };
            let _ = writeln!(
                svg,
                r##"<line x1="{LEFT}" y1="{0:.1}" x2="{by}" y2="{0:.1}" stroke="#dddddd"/><text x="{1:.1}" y="{2:.1}" text-anchor="end">{3}</text>"##,
                py(y),
                LEFT - 6.0,
                py(y) + 4.0,
                label
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{1}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            escape(self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let pts: Vec<(usize, (f64, f64))> = s
                .points
                .iter()
                .copied()
                .enumerate()
                .filter(|(_, (_, y))| !self.log_y || *y > 0.0)
                .collect();
            if let Some(spread) = &s.spread {
                if !self.log_y && !pts.is_empty() {
                    let mut band = String::new();
                    for &(i, (x, y)) in &pts {
                        let _ = write!(band, "{:.2},{:.2} ", px(x), py(y + spread[i]));
                    }
                    for &(i, (x, y)) in pts.iter().rev() {
                        let _ = write!(band, "{:.2},{:.2} ", px(x), py(y - spread[i]));
                    }
                    let _ = writeln!(
                        svg,
                        r#"<polygon points="{}" fill="{}" fill-opacity="0.15" stroke="none"/>"#,
                        band.trim_end(),
                        s.color
                    );
                }
            }
            let line: Vec<String> = pts
                .iter()
                .map(|&(_, (x, y))| format!("{:.2},{:.2}", px(x), py(tr(y))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                line.join(" "),
                s.color
            );
            for p in &line {
                let (cx, cy) = p.split_once(',').expect("formatted as x,y");
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{}"/>"#, s.color);
            }
            let ly = TOP + 10.0 + 20.0 * k as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{3}" stroke-width="2"/><text x="{4}" y="{5}">{6}</text>"#,
                W - RIGHT + 12.0,
                ly,
                W - RIGHT + 32.0,
                s.color,
                W - RIGHT + 38.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn bounds(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn tick(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
