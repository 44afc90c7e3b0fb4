//! YOLO-style anchor parameterization: a sigmoid center offset inside the
//! cell and an exponential scale on the anchor width.

use rapnet_tensor::nn::sigmoid;

use super::LevelPredictions;
use crate::anchors::AnchorSet;
use crate::data::{ProposalRecord, TemporalSegment};
use crate::error::{Error, Result};

/// Normalized stride of level `i` for input length `t`.
pub fn stride(level: usize, t: usize) -> f64 {
    (1u64 << level) as f64 / t as f64
}

/// `(center, width)` of the box predicted at `(level, position)` for an
/// anchor of width `anchor_w`.
pub fn decode_cell(level: usize, position: usize, anchor_w: f64, t: usize, center_logit: f64, width_log: f64) -> (f64, f64) {
    let s = stride(level, t);
    ((position as f64 + sigmoid(center_logit)) * s, anchor_w * width_log.exp())
}

/// Inverse of [`decode_cell`]. `None` when the segment center does not lie
/// strictly inside the cell.
pub fn encode_cell(level: usize, position: usize, anchor_w: f64, t: usize, target: &TemporalSegment) -> Option<(f64, f64)> {
    let offset = target.center() / stride(level, t) - position as f64;
    if !(offset > 0.0 && offset < 1.0) {
        return None;
    }
    Some(((offset / (1.0 - offset)).ln(), (target.width() / anchor_w).ln()))
}

/// The static box of a cell: its decode at zero logits, clamped to `[0, 1]`.
pub fn prior_segment(level: usize, position: usize, anchor_w: f64, t: usize) -> Option<TemporalSegment> {
    let (c, w) = decode_cell(level, position, anchor_w, t, 0.0, 0.0);
    TemporalSegment::clamped(c - 0.5 * w, c + 0.5 * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnchorCell {
    pub level: usize,
    pub position: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBox {
    pub cell: AnchorCell,
    pub center: f64,
    pub width: f64,
    /// Clamped segment; `None` if clamping left nothing.
    pub segment: Option<TemporalSegment>,
    pub score: f64,
}

/// Every cell of the anchor grid, in `(level, position, anchor)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub boxes: Vec<DecodedBox>,
    pub dropped: usize,
}

impl Decoded {
    pub fn to_records(&self, video_id: &str, source: &str) -> Vec<ProposalRecord> {
        self.boxes
            .iter()
            .filter_map(|b| b.segment.map(|s| ProposalRecord::new(video_id, s, b.score, source)))
            .collect()
    }
}

pub fn decode(preds: &LevelPredictions, anchors: &AnchorSet) -> Result<Decoded> {
    if anchors.num_levels() != preds.levels.len() {
        return Err(Error::contract(
            "decode",
            format!("{} anchor levels for {} prediction levels", anchors.num_levels(), preds.levels.len()),
        ));
    }
    let t = preds.levels.first().map_or(0, |l| l.length());
    let m = anchors.per_level();
    let mut boxes = Vec::new();
    let mut dropped = 0;
    for (i, head) in preds.levels.iter().enumerate() {
        let t_i = head.length();
        if head.conf_logits.shape()[0] != m {
            return Err(Error::contract("decode", format!("level {i} has {} anchors, expected {m}", head.conf_logits.shape()[0])));
        }
        for j in 0..t_i {
            for k in 0..m {
                let at = k * t_i + j;
                let (center, width) = decode_cell(
                    i,
                    j,
                    anchors.width(i, k),
                    t,
                    head.center_logits.data()[at],
                    head.width_logs.data()[at],
                );
                let segment = TemporalSegment::clamped(center - 0.5 * width, center + 0.5 * width);
                if segment.is_none() {
                    dropped += 1;
                }
                boxes.push(DecodedBox {
                    cell: AnchorCell {
                        level: i,
                        position: j,
                        anchor: k,
                    },
                    center,
                    width,
                    segment,
                    score: sigmoid(head.conf_logits.data()[at]),
                });
            }
        }
    }
    Ok(Decoded { boxes, dropped })
}
