//! Line-delimited metric records, the summary table and SVG plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use csi_llm_core::eval::{OneStepGrid, PredictionRecord, RolloutResult};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// `step` is the 1-based index of the predicted trajectory step.
    OneStep,
    /// `step` counts predictions ahead of the context, starting at 1.
    Rollout,
    /// Same `step` convention as one-step.
    Ablation,
}

/// One metric event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub scenario: String,
    pub variant: String,
    pub context_length: usize,
    pub step: usize,
    pub nmse_linear: Option<f64>,
    pub nmse_db: Option<f64>,
    pub protocol: Protocol,
    /// Rollout window longer than the training window.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub beyond_trained_length: bool,
}

fn from_prediction(
    run_id: &str,
    r: &PredictionRecord,
    step: usize,
    protocol: Protocol,
) -> MetricRecord {
    MetricRecord {
        run_id: run_id.into(),
        scenario: r.scenario.clone(),
        variant: r.variant.clone(),
        context_length: r.context_length,
        step,
        nmse_linear: r.nmse.map(|n| n.linear),
        nmse_db: r.nmse.map(|n| n.db),
        protocol,
        beyond_trained_length: false,
    }
}

/// Populated cells of a one-step grid.
pub fn grid_records(run_id: &str, grid: &OneStepGrid, protocol: Protocol) -> Vec<MetricRecord> {
    grid.cells
        .iter()
        .filter_map(|(_, r)| r.as_ref())
        .map(|r| from_prediction(run_id, r, r.target_step + 1, protocol))
        .collect()
}

pub fn rollout_records(
    run_id: &str,
    result: &RolloutResult,
    trained_length: usize,
) -> Vec<MetricRecord> {
    result
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| MetricRecord {
            beyond_trained_length: result.window_policy
                == csi_llm_core::eval::WindowPolicy::RetainAll
                && r.context_length > trained_length,
            ..from_prediction(run_id, r, k + 1, Protocol::Rollout)
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Column order of the one-step table.
pub const TABLE_COLUMNS: [(&str, &str); 6] = [
    ("no-prediction", "No-prediction"),
    ("fixed4", "Fixed-4"),
    ("fixed8", "Fixed-8"),
    ("fixed16", "Fixed-16"),
    ("parallel4", "Fixed-4-parallel"),
    ("csi-llm", "Csi-LLM"),
];

fn fmt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn scenarios_in(records: &[&MetricRecord]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in records {
        if !seen.contains(&r.scenario) {
            seen.push(r.scenario.clone());
        }
    }
    seen
}

/// Number of populated Csi-LLM cells in the one-step table.
pub fn csi_llm_cell_count(records: &[MetricRecord]) -> usize {
    records
        .iter()
        .filter(|r| {
            r.protocol == Protocol::OneStep && r.variant == "csi-llm" && r.nmse_db.is_some()
        })
        .map(|r| (&r.scenario, r.context_length))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Plain-text summary: one-step table (rows = context length, columns =
/// predictors, one block per scenario), rollout means and the ablation pairs.
pub fn summary(records: &[MetricRecord]) -> String {
    let mut s = String::new();
    let one: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::OneStep)
        .collect();
    if !one.is_empty() {
        let _ = writeln!(s, "One-step prediction NMSE (dB)");
        for sc in scenarios_in(&one) {
            let rows: Vec<&&MetricRecord> = one.iter().filter(|r| r.scenario == sc).collect();
            let target = rows.first().map(|r| r.step).unwrap_or(0);
            let _ = writeln!(s, "\nScenario {sc} (target step {target})");
            let _ = write!(s, "{:>8}", "Length");
            for (_, title) in TABLE_COLUMNS {
                let _ = write!(s, " {title:>17}");
            }
            s.push('\n');
            let lengths: BTreeSet<usize> = rows.iter().map(|r| r.context_length).collect();
            for l in lengths {
                let _ = write!(s, "{l:>8}");
                for (key, _) in TABLE_COLUMNS {
                    let v = rows
                        .iter()
                        .find(|r| r.variant == key && r.context_length == l)
                        .and_then(|r| r.nmse_db);
                    let _ = write!(s, " {:>17}", fmt_db(v));
                }
                s.push('\n');
            }
        }
    }

    let roll: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::Rollout)
        .collect();
    if !roll.is_empty() {
        let _ = writeln!(s, "\nAutoregressive rollout NMSE (dB) per predicted step");
        for sc in scenarios_in(&roll) {
            let _ = writeln!(s, "\nScenario {sc}");
            let by_variant = group_curves(&roll, &sc);
            let horizon = by_variant.values().map(|c| c.len()).max().unwrap_or(0);
            let _ = write!(s, "{:>18}", "Step");
            for k in 1..=horizon {
                let _ = write!(s, " {k:>8}");
            }
            let _ = writeln!(s, " {:>9}", "mean");
            for (variant, curve) in &by_variant {
                let _ = write!(s, "{variant:>18}");
                for (_, v) in curve {
                    let _ = write!(s, " {:>8}", v.map_or("-".into(), |v| format!("{v:.2}")));
                }
                let lin: Vec<f64> = roll
                    .iter()
                    .filter(|r| r.scenario == sc && &r.variant == variant)
                    .filter_map(|r| r.nmse_linear)
                    .collect();
                let mean = (!lin.is_empty())
                    .then(|| csi_llm_core::eval::to_db(lin.iter().sum::<f64>() / lin.len() as f64));
                let _ = writeln!(s, " {:>9}", mean.map_or("-".into(), |v| format!("{v:.2}")));
            }
            if roll
                .iter()
                .any(|r| r.scenario == sc && r.beyond_trained_length)
            {
                let _ = writeln!(
                    s,
                    "  note: Csi-LLM windows grew beyond the training length l_m"
                );
            }
        }
    }

    let abl: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::Ablation)
        .collect();
    if !abl.is_empty() {
        let _ = writeln!(s, "\nInitialization ablation, one-step NMSE (dB)");
        let arms: Vec<String> = {
            let mut v: Vec<String> = Vec::new();
            for r in &abl {
                if !v.contains(&r.variant) {
                    v.push(r.variant.clone());
                }
            }
            v
        };
        let _ = write!(s, "{:>10} {:>8}", "Scenario", "Length");
        for a in &arms {
            let _ = write!(s, " {a:>22}");
        }
        s.push('\n');
        for sc in scenarios_in(&abl) {
            let lengths: BTreeSet<usize> = abl
                .iter()
                .filter(|r| r.scenario == sc)
                .map(|r| r.context_length)
                .collect();
            for l in lengths {
                let _ = write!(s, "{sc:>10} {l:>8}");
                for a in &arms {
                    let v = abl
                        .iter()
                        .find(|r| r.scenario == sc && &r.variant == a && r.context_length == l)
                        .and_then(|r| r.nmse_db);
                    let _ = write!(s, " {:>22}", fmt_db(v));
                }
                s.push('\n');
            }
        }
    }
    s
}

/// `variant → [(step, dB)]` for one scenario's rollout records.
fn group_curves(
    roll: &[&MetricRecord],
    scenario: &str,
) -> BTreeMap<String, Vec<(usize, Option<f64>)>> {
    let mut out: BTreeMap<String, Vec<(usize, Option<f64>)>> = BTreeMap::new();
    for r in roll.iter().filter(|r| r.scenario == scenario) {
        out.entry(r.variant.clone())
            .or_default()
            .push((r.step, r.nmse_db));
    }
    for c in out.values_mut() {
        c.sort_by_key(|(k, _)| *k);
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 60.0;
const MR: f64 = 160.0;
const MT: f64 = 40.0;
const MB: f64 = 50.0;

fn svg_frame(title: &str, ylabel: &str, xlabel: &str, ymin: f64, ymax: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml(title)
    );
    let (x0, y0, x1, y1) = (ML, H - MB, W - MR, MT);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let v = ymin + (ymax - ymin) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml(ylabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0,
        xml(xlabel)
    );
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.5);
    ((lo - pad).floor(), (hi + pad).ceil())
}

/// NMSE-vs-step curves for one scenario.
pub fn rollout_svg(records: &[MetricRecord], scenario: &str) -> Option<String> {
    let roll: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::Rollout)
        .collect();
    let curves = group_curves(&roll, scenario);
    if curves.is_empty() {
        return None;
    }
    let horizon = curves
        .values()
        .flat_map(|c| c.iter().map(|(k, _)| *k))
        .max()
        .unwrap_or(1)
        .max(2);
    let (ymin, ymax) = y_range(
        curves
            .values()
            .flat_map(|c| c.iter().filter_map(|(_, v)| *v)),
    );
    let mut s = svg_frame(
        &format!("Rollout NMSE, {scenario}"),
        "NMSE (dB)",
        "prediction step",
        ymin,
        ymax,
    );
    let (x0, y0, x1, y1) = (ML, H - MB, W - MR, MT);
    let px = |k: usize| x0 + (x1 - x0) * (k as f64 - 1.0) / (horizon as f64 - 1.0);
    let py = |v: f64| y0 - (y0 - y1) * (v - ymin) / (ymax - ymin);
    for k in 1..=horizon {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{k}</text>"#,
            px(k),
            y0 + 16.0
        );
    }
    for (i, (variant, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{:.1},{:.1}", px(*k), py(v))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = y1 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x1 + 12.0,
            x1 + 32.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            x1 + 38.0,
            ly + 4.0,
            xml(variant)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Paired bars per (scenario, length) for the ablation arms.
pub fn ablation_svg(records: &[MetricRecord]) -> Option<String> {
    let abl: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::Ablation && r.nmse_db.is_some())
        .collect();
    if abl.is_empty() {
        return None;
    }
    let mut arms: Vec<&str> = Vec::new();
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in &abl {
        if !arms.contains(&r.variant.as_str()) {
            arms.push(&r.variant);
        }
        let g = (r.scenario.clone(), r.context_length);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let (lo, hi) = y_range(abl.iter().filter_map(|r| r.nmse_db));
    let (ymin, ymax) = (lo.min(0.0), hi.max(0.0));
    let mut s = svg_frame(
        "Initialization ablation",
        "NMSE (dB)",
        "scenario / context length",
        ymin,
        ymax,
    );
    let (x0, y0, x1, y1) = (ML, H - MB, W - MR, MT);
    let py = |v: f64| y0 - (y0 - y1) * (v - ymin) / (ymax - ymin);
    let gw = (x1 - x0) / groups.len() as f64;
    let bw = gw * 0.8 / arms.len() as f64;
    for (g, (sc, l)) in groups.iter().enumerate() {
        let gx = x0 + gw * g as f64 + gw * 0.1;
        for (a, arm) in arms.iter().enumerate() {
            let Some(v) = abl
                .iter()
                .find(|r| &r.scenario == sc && r.context_length == *l && r.variant == *arm)
                .and_then(|r| r.nmse_db)
            else {
                continue;
            };
            let (ya, yb) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{ya:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bw * a as f64,
                bw,
                (yb - ya).max(0.5),
                PALETTE[a % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{} l={l}</text>"#,
            gx + gw * 0.4,
            y0 + 16.0,
            xml(sc)
        );
    }
    for (a, arm) in arms.iter().enumerate() {
        let ly = y1 + 18.0 * a as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="14" height="10" fill="{}"/>"#,
            x1 + 14.0,
            ly - 6.0,
            PALETTE[a % PALETTE.len()]
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            x1 + 34.0,
            ly + 4.0,
            xml(arm)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `plots/rollout_<scenario>.svg` and `plots/ablation.svg` where data
/// exists. Returns the files written.
pub fn write_plots(records: &[MetricRecord], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut written = Vec::new();
    let roll: Vec<&MetricRecord> = records
        .iter()
        .filter(|r| r.protocol == Protocol::Rollout)
        .collect();
    for sc in scenarios_in(&roll) {
        if let Some(svg) = rollout_svg(records, &sc) {
            let path = dir.join(format!("rollout_{sc}.svg"));
            std::fs::write(&path, svg).map_err(|e| LabError::io(&path, e))?;
            written.push(path);
        }
    }
    if let Some(svg) = ablation_svg(records) {
        let path = dir.join("ablation.svg");
        std::fs::write(&path, svg).map_err(|e| LabError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `records.ndjson`, `summary.txt` and `plots/` under `out`.
pub fn emit_report(records: &[MetricRecord], out: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(LabError::Precondition("no results to report".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    write_records(&out.join("records.ndjson"), records)?;
    let summary_path = out.join("summary.txt");
    let mut f = std::fs::File::create(&summary_path).map_err(|e| LabError::io(&summary_path, e))?;
    f.write_all(summary(records).as_bytes())
        .map_err(|e| LabError::io(&summary_path, e))?;
    write_plots(records, &out.join("plots"))?;
    Ok(())
}
