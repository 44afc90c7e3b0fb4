//! Proposal recall over a tIoU grid, the AR–AN curve and its area.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{rank_order, segment_iou, ProposalRecord, ResultsMap, TemporalSegment};
use crate::error::{Error, Result};

pub type GroundTruth = BTreeMap<String, Vec<TemporalSegment>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub tiou_grid: Vec<f64>,
    pub max_an: usize,
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_tiou_grid() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tiou_grid: default_tiou_grid(),
            max_an: 100,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tiou_grid.is_empty() || self.tiou_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("tiou_grid must be non-empty with values in (0, 1]".into()));
        }
        if self.max_an == 0 {
            return Err(Error::Config("max_an must be at least 1".into()));
        }
        Ok(())
    }
}

/// Proposals of one video in rank order.
fn ranked(proposals: Option<&Vec<ProposalRecord>>) -> Vec<&ProposalRecord> {
    let mut v: Vec<&ProposalRecord> = proposals.map(|p| p.iter().collect()).unwrap_or_default();
    v.sort_by(|a, b| rank_order(a, b));
    v
}

/// Rank of the first proposal reaching `tiou` with `gt`, if any.
fn first_hit(ranked: &[&ProposalRecord], gt: &TemporalSegment, tiou: f64) -> Option<usize> {
    ranked.iter().position(|p| segment_iou(&p.segment, gt) >= tiou)
}

fn total_gts(gts: &GroundTruth) -> Result<usize> {
    let total: usize = gts.values().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Evaluation("no ground-truth instances to evaluate".into()));
    }
    Ok(total)
}

/// Fraction of ground truths recovered by some top-`an` proposal of their
/// video at `tiou` or above.
pub fn recall_at(proposals: &ResultsMap, gts: &GroundTruth, tiou: f64, an: usize) -> Result<f64> {
    if an < 1 {
        return Err(Error::contract("recall_at", "an must be at least 1"));
    }
    let total = total_gts(gts)?;
    let mut recovered = 0usize;
    for (vid, segs) in gts {
        let r = ranked(proposals.get(vid));
        let top = &r[..an.min(r.len())];
        recovered += segs.iter().filter(|g| first_hit(top, g, tiou).is_some()).count();
    }
    Ok(recovered as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub an_values: Vec<usize>,
    pub ar_values: Vec<f64>,
    pub tiou_grid: Vec<f64>,
}

impl RecallCurve {
    pub fn ar_at(&self, an: usize) -> Option<f64> {
        self.an_values.iter().position(|&a| a == an).map(|i| self.ar_values[i])
    }
}

/// For each ground truth and threshold, the rank of its first hit.
fn hit_ranks(proposals: &ResultsMap, gts: &GroundTruth, grid: &[f64]) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::new();
    for (vid, segs) in gts {
        let r = ranked(proposals.get(vid));
        for g in segs {
            out.push(grid.iter().map(|&t| first_hit(&r, g, t)).collect());
        }
    }
    out
}

/// `AR(an)` for `an = 1..=max_an`: recall averaged over the tIoU grid.
pub fn average_recall_curve(proposals: &ResultsMap, gts: &GroundTruth, settings: &EvalSettings) -> Result<RecallCurve> {
    settings.validate()?;
    let total = total_gts(gts)?;
    let ranks = hit_ranks(proposals, gts, &settings.tiou_grid);
    let an_values: Vec<usize> = (1..=settings.max_an).collect();
    let ar_values = an_values
        .iter()
        .map(|&an| {
            let mut sum = 0.0;
            for k in 0..settings.tiou_grid.len() {
                let recovered = ranks.iter().filter(|r| r[k].is_some_and(|rank| rank < an)).count();
                sum += recovered as f64 / total as f64;
            }
            sum / settings.tiou_grid.len() as f64
        })
        .collect();
    Ok(RecallCurve {
        an_values,
        ar_values,
        tiou_grid: settings.tiou_grid.clone(),
    })
}

/// Trapezoidal area under the curve over its AN span, in percent.
pub fn auc(curve: &RecallCurve) -> f64 {
    let n = curve.an_values.len();
    if n < 2 {
        return curve.ar_values.first().copied().unwrap_or(0.0) * 100.0;
    }
    let mut area = 0.0;
    for i in 0..n - 1 {
        let dx = (curve.an_values[i + 1] - curve.an_values[i]) as f64;
        area += dx * (curve.ar_values[i] + curve.ar_values[i + 1]) / 2.0;
    }
    let span = (curve.an_values[n - 1] - curve.an_values[0]) as f64;
    area / span * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecall {
    pub video_id: String,
    pub num_ground_truth: usize,
    pub num_proposals: usize,
    /// Recall at the largest AN, averaged over the tIoU grid.
    pub average_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `AR@1`, `AR@5`, `AR@10`, `AR@100` where the AN range allows.
    pub ar_at: BTreeMap<String, f64>,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub num_videos: usize,
    pub num_ground_truth: usize,
    pub curve: RecallCurve,
    pub per_video: Vec<VideoRecall>,
    pub config: serde_json::Value,
}

pub fn evaluate(proposals: &ResultsMap, gts: &GroundTruth, settings: &EvalSettings) -> Result<EvalReport> {
    let curve = average_recall_curve(proposals, gts, settings)?;
    let ar_at = [1, 5, 10, 100]
        .iter()
        .filter_map(|&an| curve.ar_at(an).map(|v| (format!("AR@{an}"), v)))
        .collect();
    let per_video = gts
        .iter()
        .filter(|(_, segs)| !segs.is_empty())
        .map(|(vid, segs)| {
            let r = ranked(proposals.get(vid));
            let top = &r[..settings.max_an.min(r.len())];
            let mut sum = 0.0;
            for &t in &settings.tiou_grid {
                let hit = segs.iter().filter(|g| first_hit(top, g, t).is_some()).count();
                sum += hit as f64 / segs.len() as f64;
            }
            VideoRecall {
                video_id: vid.clone(),
                num_ground_truth: segs.len(),
                num_proposals: r.len(),
                average_recall: sum / settings.tiou_grid.len() as f64,
            }
        })
        .collect();
    Ok(EvalReport {
        ar_at,
        auc: auc(&curve),
        num_videos: gts.len(),
        num_ground_truth: gts.values().map(Vec::len).sum(),
        curve,
        per_video,
        config: serde_json::to_value(settings).expect("settings serialize"),
    })
}

/// Comma-separated `an,ar` rows with six decimals.
pub fn curve_csv(curve: &RecallCurve) -> String {
    let mut out = String::from("an,ar\n");
    for (an, ar) in curve.an_values.iter().zip(&curve.ar_values) {
        writeln!(out, "{an},{ar:.6}").expect("write to string");
    }
    out
}

/// A plain SVG line plot of AR against AN.
pub fn curve_svg(curve: &RecallCurve) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let lo = *curve.an_values.first().unwrap_or(&1) as f64;
    let hi = *curve.an_values.last().unwrap_or(&1) as f64;
    let span = (hi - lo).max(1.0);
    let x = |an: f64| m + (an - lo) / span * pw;
    let y = |ar: f64| m + (1.0 - ar) * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r##"<g stroke="#ddd" stroke-width="1">"##).unwrap();
    for k in 0..=10 {
        let yy = y(k as f64 / 10.0);
        writeln!(s, r#"<line x1="{m:.2}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}"/>"#, m + pw).unwrap();
    }
    writeln!(s, "</g>").unwrap();
    writeln!(
        s,
        r#"<path d="M{m:.2},{:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        m,
        m + ph,
        m + pw
    )
    .unwrap();
    let points: Vec<String> = curve
        .an_values
        .iter()
        .zip(&curve.ar_values)
        .map(|(&an, &ar)| format!("{:.2},{:.2}", x(an as f64), y(ar)))
        .collect();
    writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        points.join(" ")
    )
    .unwrap();
    writeln!(s, r#"<g font-family="sans-serif" font-size="12" text-anchor="middle">"#).unwrap();
    for k in [0.0, 0.5, 1.0] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{k:.1}</text>"#, m - 6.0, y(k) + 4.0).unwrap();
    }
    for an in [lo, (lo + hi) / 2.0, hi] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x(an), m + ph + 18.0, an.round()).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}">average number of proposals</text>"#, m + pw / 2.0, h - 8.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})">average recall</text>"#,
        m + ph / 2.0,
        m + ph / 2.0
    )
    .unwrap();
    writeln!(s, "</g>\n</svg>").unwrap();
    s
}

/// Writes `metrics.json`, `ar_curve.csv` and `ar_curve.svg` into `out_dir`.
pub fn emit_report(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::contract("emit_report", e.to_string()))?;
    write("metrics.json", json + "\n")?;
    write("ar_curve.csv", curve_csv(&report.curve))?;
    write("ar_curve.svg", curve_svg(&report.curve))
}
