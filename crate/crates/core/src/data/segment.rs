use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized temporal interval with `0 ≤ start < end ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct TemporalSegment {
    start: f64,
    end: f64,
}

impl TemporalSegment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if start.is_finite() && end.is_finite() && 0.0 <= start && start < end && end <= 1.0 {
            Ok(TemporalSegment { start, end })
        } else {
            Err(Error::InvalidSegment { start, end })
        }
    }

    /// Clamps both ends into `[0, 1]`; `None` when nothing of positive
    /// length remains.
    pub fn clamped(start: f64, end: f64) -> Option<Self> {
        Self::new(start.clamp(0.0, 1.0), end.clamp(0.0, 1.0)).ok()
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

impl TryFrom<[f64; 2]> for TemporalSegment {
    type Error = Error;

    fn try_from([start, end]: [f64; 2]) -> Result<Self> {
        Self::new(start, end)
    }
}

impl From<TemporalSegment> for [f64; 2] {
    fn from(s: TemporalSegment) -> Self {
        [s.start, s.end]
    }
}

/// Temporal intersection-over-union of two segments.
pub fn segment_iou(a: &TemporalSegment, b: &TemporalSegment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.width() + b.width() - inter;
    inter / union
}
