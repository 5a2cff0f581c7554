//! Run outputs: per-round CSV, summary JSON, and static SVG charts.
//!
//! All emitters are pure functions of their inputs (no timestamps, no
//! locale-dependent formatting), so artifacts are byte-identical across
//! reruns of the same configuration.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PartitionPlan;
use crate::engine::RoundRecord;
use crate::error::SimError;
use crate::model::Dataset;
use crate::Result;

/// Aggregate statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    /// Mean centralized accuracy over rounds `[activation_round, T)`.
    pub mean_post_attack_accuracy: f64,
    pub final_accuracy: f64,
    pub rounds: usize,
    pub warnings: Vec<String>,
}

/// Mean centralized accuracy over the post-attack window.
///
/// An activation round at or past the end of the run falls back to the mean
/// over all rounds, flagged in `warnings`. The caller fills `config_hash`.
pub fn summarize(records: &[RoundRecord], activation_round: usize) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(SimError::InvalidInput("no round records to summarize".into()));
    }
    let mut sorted: Vec<&RoundRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.round);

    let mut warnings = Vec::new();
    let window: Vec<&&RoundRecord> = sorted
        .iter()
        .filter(|r| r.round >= activation_round)
        .collect();
    let mean = if window.is_empty() {
        warnings.push(format!(
            "activation round {activation_round} is past the end of the run; \
             averaging over all {} rounds",
            sorted.len()
        ));
        sorted.iter().map(|r| r.accuracy).sum::<f64>() / sorted.len() as f64
    } else {
        window.iter().map(|r| r.accuracy).sum::<f64>() / window.len() as f64
    };

    Ok(RunSummary {
        config_hash: String::new(),
        mean_post_attack_accuracy: mean,
        final_accuracy: sorted.last().unwrap().accuracy,
        rounds: sorted.len(),
        warnings,
    })
}

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Serializes round records as CSV: header
/// `round,accuracy,server_loss,attacked,stop_j,v_min,v_max`, one row per
/// round, six fractional digits, LF line endings. `stop_j` is empty for
/// aggregators without a greedy trace.
pub fn round_csv(records: &[RoundRecord]) -> String {
    let mut out = String::from("round,accuracy,server_loss,attacked,stop_j,v_min,v_max\n");
    for r in records {
        let stop_j = r
            .greedy
            .as_ref()
            .map(|g| g.stop_j.to_string())
            .unwrap_or_default();
        let v_min = r.client_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let v_max = r
            .client_losses
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            fmt6(r.accuracy),
            fmt6(r.server_loss),
            r.attacked,
            stop_j,
            fmt6(v_min),
            fmt6(v_max),
        ));
    }
    out
}

/// Writes [`round_csv`] to a file.
pub fn write_round_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    write_bytes(path, round_csv(records).as_bytes())
}

/// Writes a [`RunSummary`] as pretty JSON with a trailing newline.
pub fn write_summary_json(summary: &RunSummary, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(summary)
        .map_err(|e| SimError::Config(format!("summary serialization failed: {e}")))?;
    body.push('\n');
    write_bytes(path, body.as_bytes())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    file.write_all(bytes).map_err(|e| SimError::io(path, e))
}

/// Cross-seed aggregate emitted by the sweep and report verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedSummary {
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    /// Mean of the per-run post-attack means.
    pub mean_post_attack_accuracy: f64,
    /// Sample standard deviation of the per-run post-attack means; 0 for a
    /// single run.
    pub std_post_attack_accuracy: f64,
    pub mean_final_accuracy: f64,
    pub per_run: Vec<RunSummary>,
}

/// Combines per-seed summaries into mean and sample standard deviation.
pub fn combine_summaries(runs: &[(u64, RunSummary)]) -> Result<CombinedSummary> {
    if runs.is_empty() {
        return Err(SimError::InvalidInput("no run summaries to combine".into()));
    }
    let n = runs.len() as f64;
    let mean = runs
        .iter()
        .map(|(_, s)| s.mean_post_attack_accuracy)
        .sum::<f64>()
        / n;
    let std = if runs.len() > 1 {
        (runs
            .iter()
            .map(|(_, s)| (s.mean_post_attack_accuracy - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let mean_final = runs.iter().map(|(_, s)| s.final_accuracy).sum::<f64>() / n;
    Ok(CombinedSummary {
        n_runs: runs.len(),
        seeds: runs.iter().map(|(seed, _)| *seed).collect(),
        mean_post_attack_accuracy: mean,
        std_post_attack_accuracy: std,
        mean_final_accuracy: mean_final,
        per_run: runs.iter().map(|(_, s)| s.clone()).collect(),
    })
}

/// Writes a [`CombinedSummary`] as pretty JSON with a trailing newline.
pub fn write_combined_json(combined: &CombinedSummary, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(combined)
        .map_err(|e| SimError::Config(format!("summary serialization failed: {e}")))?;
    body.push('\n');
    write_bytes(path, body.as_bytes())
}

/// One named accuracy-over-rounds curve.
#[derive(Debug, Clone)]
pub struct AccuracySeries {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

impl AccuracySeries {
    pub fn from_records(name: impl Into<String>, records: &[RoundRecord]) -> Self {
        AccuracySeries {
            name: name.into(),
            points: records.iter().map(|r| (r.round, r.accuracy)).collect(),
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 44.0;

/// Line chart of accuracy (0..1) against round index, one polyline and one
/// legend entry per series, with an optional vertical marker at the attack
/// activation round.
pub fn accuracy_svg(series: &[AccuracySeries], activation_round: Option<usize>) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(SimError::InvalidInput(
            "accuracy chart needs at least one non-empty series".into(),
        ));
    }
    let max_round = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1);

    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let x = |round: usize| MARGIN_L + plot_w * round as f64 / max_round as f64;
    let y = |acc: f64| MARGIN_T + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{CHART_W}\" height=\"{CHART_H}\" viewBox=\"0 0 {CHART_W} {CHART_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Axes and gridlines.
    for i in 0..=4 {
        let acc = i as f64 / 4.0;
        let yy = y(acc);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{yy:.2}\" x2=\"{:.2}\" y2=\"{yy:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
             text-anchor=\"end\">{acc:.2}</text>\n",
            MARGIN_L - 6.0,
            yy + 4.0
        ));
    }
    let x_step = (max_round / 5).max(1);
    let mut tick = 0;
    while tick <= max_round {
        let xx = x(tick);
        svg.push_str(&format!(
            "<text x=\"{xx:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
             text-anchor=\"middle\">{tick}</text>\n",
            MARGIN_T + plot_h + 16.0
        ));
        tick += x_step;
    }
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"black\" stroke-width=\"1\"/>\n",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L:.2}\" y1=\"{MARGIN_T:.2}\" x2=\"{MARGIN_L:.2}\" y2=\"{:.2}\" \
         stroke=\"black\" stroke-width=\"1\"/>\n",
        MARGIN_T + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\" \
         text-anchor=\"middle\">round</text>\n",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\" \
         text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">accuracy</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    if let Some(activation) = activation_round {
        if activation <= max_round {
            let xx = x(activation);
            svg.push_str(&format!(
                "<line x1=\"{xx:.2}\" y1=\"{MARGIN_T:.2}\" x2=\"{xx:.2}\" y2=\"{:.2}\" \
                 stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n",
                MARGIN_T + plot_h
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" font-family=\"sans-serif\" \
                 fill=\"#666666\">attack</text>\n",
                xx + 4.0,
                MARGIN_T + 10.0
            ));
        }
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(r, a)| format!("{:.2},{:.2}", x(r), y(a)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MARGIN_T + 14.0 * i as f64 + 8.0;
        let lx = MARGIN_L + plot_w - 150.0;
        svg.push_str(&format!(
            "<line x1=\"{lx:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
             class=\"legend\">{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes [`accuracy_svg`] to a file.
pub fn render_accuracy_svg(
    series: &[AccuracySeries],
    activation_round: Option<usize>,
    path: &Path,
) -> Result<()> {
    write_bytes(path, accuracy_svg(series, activation_round)?.as_bytes())
}

/// Bubble chart of a clients x classes count matrix. Circle area is
/// proportional to the count; zero cells draw nothing. Every circle carries
/// `data-client`, `data-class`, and `data-count` attributes so the rendered
/// counts can be recovered from the markup.
pub fn partition_svg(class_counts: &[Vec<usize>]) -> Result<String> {
    if class_counts.is_empty() || class_counts.iter().any(|row| row.is_empty()) {
        return Err(SimError::InvalidInput(
            "partition chart needs a non-empty count matrix".into(),
        ));
    }
    let n_clients = class_counts.len();
    let n_classes = class_counts[0].len();
    if class_counts.iter().any(|row| row.len() != n_classes) {
        return Err(SimError::InvalidInput(
            "partition count matrix rows have unequal lengths".into(),
        ));
    }
    let max_count = class_counts
        .iter()
        .flat_map(|row| row.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1);

    let cell = 34.0;
    let left = 70.0;
    let top = 30.0;
    let w = left + cell * n_classes as f64 + 20.0;
    let h = top + cell * n_clients as f64 + 40.0;
    let r_max = cell * 0.45;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for class in 0..n_classes {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
             text-anchor=\"middle\">{class}</text>\n",
            left + cell * (class as f64 + 0.5),
            top - 8.0
        ));
    }
    for (client, row) in class_counts.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" \
             text-anchor=\"end\">client {client}</text>\n",
            left - 8.0,
            top + cell * (client as f64 + 0.5) + 4.0
        ));
        for (class, &count) in row.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let r = r_max * (count as f64 / max_count as f64).sqrt();
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r:.2}\" fill=\"#1f77b4\" \
                 fill-opacity=\"0.65\" data-client=\"{client}\" data-class=\"{class}\" \
                 data-count=\"{count}\"/>\n",
                left + cell * (class as f64 + 0.5),
                top + cell * (client as f64 + 0.5)
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\" \
         text-anchor=\"middle\">class</text>\n",
        left + cell * n_classes as f64 / 2.0,
        h - 12.0
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes [`partition_svg`] to a file.
pub fn write_partition_svg(class_counts: &[Vec<usize>], path: &Path) -> Result<()> {
    write_bytes(path, partition_svg(class_counts)?.as_bytes())
}

/// Renders the class-count bubble chart for a partition of `data`.
pub fn render_partition_svg(plan: &PartitionPlan, data: &Dataset, path: &Path) -> Result<()> {
    let max_index = plan
        .assignments
        .iter()
        .flat_map(|a| a.iter())
        .copied()
        .max();
    if let Some(max_index) = max_index {
        if max_index >= data.len() {
            return Err(SimError::InvalidInput(format!(
                "partition references sample {max_index} but the dataset has {} rows",
                data.len()
            )));
        }
    }
    let counts = plan.class_counts(data);
    write_bytes(path, partition_svg(&counts)?.as_bytes())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
