use std::collections::BTreeMap;
use std::path::Path;

use super::TemporalSegment;
use crate::error::{Error, Result};

/// Per-snippet probability of being inside an action, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionnessCurve {
    pub video_id: String,
    values: Vec<f64>,
}

impl ActionnessCurve {
    pub fn new(video_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("actionness", "empty curve"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract("actionness", format!("value {v} outside [0, 1]")));
        }
        Ok(ActionnessCurve {
            video_id: video_id.into(),
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Linear interpolation at normalized time `x`, with snippet `i` sampled
    /// at its center `(i + 0.5) / T`. Constant beyond the outer centers.
    pub fn sample(&self, x: f64) -> f64 {
        let t = self.values.len();
        let pos = (x * t as f64 - 0.5).clamp(0.0, (t - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        self.values[lo] + (self.values[hi] - self.values[lo]) * frac
    }
}

/// Ideal actionness for a set of segments: the indicator of their union
/// convolved with a triangular kernel one snippet wide, evaluated at each
/// snippet center. Snippet-aligned boundaries stay sharp; a boundary that
/// cuts through a snippet yields a fractional value there.
pub fn oracle_actionness(segments: &[TemporalSegment], t: usize) -> Vec<f64> {
    // CDF of a unit-area triangle on [-0.5, 0.5] (snippet units).
    fn tri_cdf(u: f64) -> f64 {
        if u <= -0.5 {
            0.0
        } else if u <= 0.0 {
            2.0 * (u + 0.5) * (u + 0.5)
        } else if u < 0.5 {
            1.0 - 2.0 * (0.5 - u) * (0.5 - u)
        } else {
            1.0
        }
    }
    (0..t)
        .map(|i| {
            let c = i as f64 + 0.5;
            let v: f64 = segments
                .iter()
                .map(|s| {
                    let (a, b) = (s.start() * t as f64, s.end() * t as f64);
                    tri_cdf(b - c) - tri_cdf(a - c)
                })
                .sum();
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Writes curves as `{"<video_id>": [values...]}`.
pub fn write_actionness<'a>(path: impl AsRef<Path>, curves: impl IntoIterator<Item = &'a ActionnessCurve>) -> Result<()> {
    let path = path.as_ref();
    let map: BTreeMap<&str, &[f64]> = curves
        .into_iter()
        .map(|c| (c.video_id.as_str(), c.values()))
        .collect();
    let text = serde_json::to_string(&map).map_err(|e| Error::contract("write_actionness", e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_actionness(path: impl AsRef<Path>) -> Result<BTreeMap<String, ActionnessCurve>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        key: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    map.into_iter()
        .map(|(vid, values)| {
            let curve = ActionnessCurve::new(vid.clone(), values).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                key: vid.clone(),
                msg: e.to_string(),
            })?;
            Ok((vid, curve))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_segment_is_a_sharp_step() {
        let seg = TemporalSegment::new(0.25, 0.75).unwrap();
        let curve = oracle_actionness(&[seg], 128);
        for (i, v) in curve.iter().enumerate() {
            let inside = (32..=95).contains(&i);
            assert_eq!(*v, if inside { 1.0 } else { 0.0 }, "snippet {i}");
        }
    }

    #[test]
    fn unaligned_boundary_is_fractional() {
        // boundary at 10.25 snippets: snippet 10 (center 10.5) is a quarter
        // snippet inside.
        let seg = TemporalSegment::new(10.25 / 128.0, 0.5).unwrap();
        let curve = oracle_actionness(&[seg], 128);
        assert_eq!(curve[9], 0.0);
        assert!(curve[10] > 0.5 && curve[10] < 1.0);
        assert_eq!(curve[11], 1.0);
    }

    #[test]
    fn sample_interpolates_between_centers() {
        let c = ActionnessCurve::new("v", vec![0.0, 1.0]).unwrap();
        assert_eq!(c.sample(0.25), 0.0);
        assert_eq!(c.sample(0.5), 0.5);
        assert_eq!(c.sample(0.75), 1.0);
        assert_eq!(c.sample(-3.0), 0.0);
        assert_eq!(c.sample(2.0), 1.0);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ActionnessCurve::new("v", vec![0.5, 1.5]).is_err());
    }
}
