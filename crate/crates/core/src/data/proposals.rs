//! Proposal records and the challenge-style results file.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TemporalSegment;
use crate::error::{Error, Result};

pub const STAGE_RAW_CONF: &str = "raw_conf";
pub const STAGE_PEM: &str = "pem";
pub const STAGE_POST_NMS: &str = "post_nms";

/// Proposals per video id.
pub type ResultsMap = BTreeMap<String, Vec<ProposalRecord>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub video_id: String,
    pub segment: TemporalSegment,
    /// Always the value of the most recently populated stage.
    pub score: f64,
    pub stage_scores: BTreeMap<String, f64>,
    pub source: String,
}

impl ProposalRecord {
    pub fn new(video_id: impl Into<String>, segment: TemporalSegment, raw_conf: f64, source: impl Into<String>) -> Self {
        let mut stage_scores = BTreeMap::new();
        stage_scores.insert(STAGE_RAW_CONF.to_string(), raw_conf);
        ProposalRecord {
            video_id: video_id.into(),
            segment,
            score: raw_conf,
            stage_scores,
            source: source.into(),
        }
    }

    /// Records a stage score and makes it the current score.
    pub fn set_stage(&mut self, stage: &str, value: f64) {
        self.stage_scores.insert(stage.to_string(), value);
        self.score = value;
    }

    pub fn raw_conf(&self) -> f64 {
        self.stage_scores.get(STAGE_RAW_CONF).copied().unwrap_or(self.score)
    }
}

/// Descending score, then ascending `(start, end)`.
pub fn rank_order(a: &ProposalRecord, b: &ProposalRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start().total_cmp(&b.segment.start()))
        .then(a.segment.end().total_cmp(&b.segment.end()))
}

pub fn sort_by_rank(records: &mut [ProposalRecord]) {
    records.sort_by(rank_order);
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[derive(Debug, Serialize, Deserialize)]
struct RawResults {
    version: String,
    results: BTreeMap<String, Vec<RawProposal>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawProposal {
    segment: [f64; 2],
    score: f64,
}

/// Writes proposals in descending score order, values rounded to 6 decimals.
pub fn write_proposals(path: impl AsRef<Path>, results: &ResultsMap) -> Result<()> {
    let path = path.as_ref();
    let results = results
        .iter()
        .map(|(vid, records)| {
            let mut sorted = records.clone();
            sort_by_rank(&mut sorted);
            let raw = sorted
                .iter()
                .map(|r| RawProposal {
                    segment: [quantize(r.segment.start()), quantize(r.segment.end())],
                    score: quantize(r.score),
                })
                .collect();
            (vid.clone(), raw)
        })
        .collect();
    let raw = RawResults {
        version: "1.0".into(),
        results,
    };
    let text = serde_json::to_string(&raw).map_err(|e| Error::contract("write_proposals", e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a results file; records get `source` set to the file stem.
pub fn read_proposals(path: impl AsRef<Path>) -> Result<ResultsMap> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawResults = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        key: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = ResultsMap::new();
    for (vid, proposals) in raw.results {
        let mut records = Vec::with_capacity(proposals.len());
        for (i, p) in proposals.into_iter().enumerate() {
            let segment = TemporalSegment::new(p.segment[0], p.segment[1]).map_err(|e| Error::Ingest {
                path: path.to_path_buf(),
                key: format!("results.{vid}[{i}].segment"),
                msg: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    key: format!("results.{vid}[{i}].score"),
                    msg: format!("score {} outside [0, 1]", p.score),
                });
            }
            records.push(ProposalRecord::new(vid.clone(), segment, p.score, source.clone()));
        }
        out.insert(vid, records);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: f64, e: f64, score: f64) -> ProposalRecord {
        ProposalRecord::new("v", TemporalSegment::new(s, e).unwrap(), score, "test")
    }

    #[test]
    fn empty_results_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_proposals(&path, &ResultsMap::new()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, r#"{"version":"1.0","results":{}}"#);
        assert!(read_proposals(&path).unwrap().is_empty());
    }

    #[test]
    fn equal_scores_are_ordered_by_start_then_end() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut results = ResultsMap::new();
        results.insert("v".into(), vec![rec(0.5, 0.9, 0.7), rec(0.1, 0.4, 0.7), rec(0.1, 0.3, 0.7), rec(0.2, 0.3, 0.9)]);
        write_proposals(&path, &results).unwrap();
        let back = read_proposals(&path).unwrap();
        let order: Vec<[f64; 2]> = back["v"].iter().map(|r| r.segment.into()).collect();
        assert_eq!(order, vec![[0.2, 0.3], [0.1, 0.3], [0.1, 0.4], [0.5, 0.9]]);
    }

    #[test]
    fn stage_updates_keep_score_current() {
        let mut r = rec(0.1, 0.2, 0.8);
        r.set_stage(STAGE_PEM, 0.4);
        assert_eq!(r.score, 0.4);
        assert_eq!(r.raw_conf(), 0.8);
    }
}
