//! Multi-threshold grouping of actionness runs into candidate regions, and
//! snapping of proposal boundaries onto them.

use serde::{Deserialize, Serialize};

use crate::data::{segment_iou, ActionnessCurve, ProposalRecord, TemporalSegment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagConfig {
    pub thresholds: Vec<f64>,
    pub merge_gap_ratio: f64,
    pub snap_window: f64,
}

impl Default for TagConfig {
    fn default() -> Self {
        TagConfig {
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            merge_gap_ratio: 0.3,
            snap_window: 0.05,
        }
    }
}

impl TagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Config("TAG thresholds must be a non-empty list inside (0, 1)".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("TAG thresholds must be strictly ascending".into()));
        }
        if !(self.merge_gap_ratio.is_finite() && self.merge_gap_ratio >= 0.0) {
            return Err(Error::Config("merge_gap_ratio must be non-negative".into()));
        }
        if !(self.snap_window > 0.0 && self.snap_window < 1.0) {
            return Err(Error::Config("snap_window must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Maximal runs `[a, b)` of snippet indices with value at least `tau`.
fn runs_above(values: &[f64], tau: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in values.iter().enumerate() {
        match (v >= tau, start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                runs.push((a, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        runs.push((a, values.len()));
    }
    runs
}

/// Merges neighbours left to right while `gap / merged_span ≤ ratio`.
fn merge_runs(runs: &[(usize, usize)], ratio: f64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in runs {
        match out.last_mut() {
            Some(cur) if (a - cur.1) as f64 / (b - cur.0) as f64 <= ratio => cur.1 = b,
            _ => out.push((a, b)),
        }
    }
    out
}

/// Candidate regions pooled over all thresholds.
///
/// Each threshold contributes its raw runs and the runs after gap-ratio
/// merging, so merging never hides the boundaries of the instances it
/// joins. Regions are snippet-aligned, sorted and free of duplicates.
pub fn tag_regions(actionness: &ActionnessCurve, cfg: &TagConfig) -> Vec<TemporalSegment> {
    let values = actionness.values();
    let t = values.len() as f64;
    let mut pooled: Vec<(usize, usize)> = Vec::new();
    for &tau in &cfg.thresholds {
        let runs = runs_above(values, tau);
        pooled.extend(merge_runs(&runs, cfg.merge_gap_ratio));
        pooled.extend(runs);
    }
    pooled.sort_unstable();
    pooled.dedup();
    pooled
        .into_iter()
        .map(|(a, b)| TemporalSegment::new(a as f64 / t, b as f64 / t).expect("non-empty run inside the curve"))
        .collect()
}

/// Nearest boundary within `window` of `x`; equal distances go to the
/// region overlapping the proposal most.
fn nearest(x: f64, candidates: impl Iterator<Item = (f64, f64)>, window: f64) -> Option<f64> {
    let mut best: Option<(f64, f64, f64)> = None;
    for (b, iou) in candidates {
        let d = (b - x).abs();
        if d > window {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, biou, bb)) => d < bd || (d == bd && (iou > biou || (iou == biou && b < bb))),
        };
        if better {
            best = Some((d, iou, b));
        }
    }
    best.map(|(_, _, b)| b)
}

/// Moves each proposal boundary to the nearest region boundary of the same
/// kind inside the snap window. If the result would not be a valid
/// segment, the proposal keeps its original boundaries. Scores are kept.
pub fn snap_boundaries(proposals: &[ProposalRecord], regions: &[TemporalSegment], cfg: &TagConfig) -> Vec<ProposalRecord> {
    proposals
        .iter()
        .map(|p| {
            let seg = p.segment;
            let ious: Vec<f64> = regions.iter().map(|r| segment_iou(r, &seg)).collect();
            let start = nearest(seg.start(), regions.iter().map(|r| r.start()).zip(ious.iter().copied()), cfg.snap_window);
            let end = nearest(seg.end(), regions.iter().map(|r| r.end()).zip(ious.iter().copied()), cfg.snap_window);
            let snapped = TemporalSegment::new(start.unwrap_or(seg.start()), end.unwrap_or(seg.end()));
            let mut out = p.clone();
            if let Ok(s) = snapped {
                out.segment = s;
            }
            out
        })
        .collect()
}
