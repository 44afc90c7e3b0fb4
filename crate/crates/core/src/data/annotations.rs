//! ActivityNet-style annotation files.
//!
//! Segments are stored in seconds on disk and normalized by the video
//! duration at ingest; everything downstream works in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::TemporalSegment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Training,
    Validation,
    Testing,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Training => "training",
            Subset::Validation => "validation",
            Subset::Testing => "testing",
        })
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(Subset::Training),
            "validation" => Ok(Subset::Validation),
            "testing" => Ok(Subset::Testing),
            other => Err(Error::Config(format!("unknown subset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_seconds: f64,
    pub subset: Subset,
    pub segments: Vec<TemporalSegment>,
}

/// Loaded annotations keyed by video id, plus the number of segments that
/// had to be clamped or dropped at ingest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub videos: BTreeMap<String, VideoAnnotation>,
    pub clamped: usize,
}

impl AnnotationSet {
    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &VideoAnnotation> {
        self.videos.values().filter(move |v| v.subset == subset)
    }

    /// Ground-truth segments per video, restricted to one subset.
    pub fn ground_truth(&self, subset: Option<Subset>) -> BTreeMap<String, Vec<TemporalSegment>> {
        self.videos
            .values()
            .filter(|v| subset.is_none_or(|s| v.subset == s))
            .map(|v| (v.video_id.clone(), v.segments.clone()))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawFile {
    database: BTreeMap<String, RawVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawVideo {
    duration: f64,
    subset: Subset,
    #[serde(default)]
    annotations: Vec<RawInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    segment: [f64; 2],
    #[serde(default)]
    label: String,
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawFile = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        key: format!("line {} column {}", e.line(), e.column()),
        msg: e.to_string(),
    })?;

    let mut set = AnnotationSet::default();
    for (video_id, video) in raw.database {
        let ingest_err = |key: String, msg: String| Error::Ingest {
            path: path.to_path_buf(),
            key,
            msg,
        };
        if !(video.duration.is_finite() && video.duration > 0.0) {
            return Err(ingest_err(
                format!("database.{video_id}.duration"),
                format!("duration must be positive, got {}", video.duration),
            ));
        }
        let mut segments = Vec::with_capacity(video.annotations.len());
        for (i, inst) in video.annotations.iter().enumerate() {
            let [s, e] = inst.segment;
            if !(s.is_finite() && e.is_finite()) || s >= e {
                return Err(ingest_err(
                    format!("database.{video_id}.annotations[{i}].segment"),
                    format!("segment [{s}, {e}] is empty or reversed"),
                ));
            }
            let (ns, ne) = (s / video.duration, e / video.duration);
            if (0.0..=1.0).contains(&ns) && (0.0..=1.0).contains(&ne) {
                segments.push(TemporalSegment::new(ns, ne)?);
                continue;
            }
            set.clamped += 1;
            match TemporalSegment::clamped(ns, ne) {
                Some(seg) => {
                    warn!("{video_id}: segment [{s}s, {e}s] clamped to the video extent");
                    segments.push(seg);
                }
                None => warn!("{video_id}: segment [{s}s, {e}s] lies outside the video; dropped"),
            }
        }
        set.videos.insert(
            video_id.clone(),
            VideoAnnotation {
                video_id,
                duration_seconds: video.duration,
                subset: video.subset,
                segments,
            },
        );
    }
    Ok(set)
}

/// Writes annotations back in seconds.
pub fn write_annotations<'a>(
    path: impl AsRef<Path>,
    videos: impl IntoIterator<Item = &'a VideoAnnotation>,
) -> Result<()> {
    let path = path.as_ref();
    let database = videos
        .into_iter()
        .map(|v| {
            let annotations = v
                .segments
                .iter()
                .map(|s| RawInstance {
                    segment: [s.start() * v.duration_seconds, s.end() * v.duration_seconds],
                    label: "action".into(),
                })
                .collect();
            let raw = RawVideo {
                duration: v.duration_seconds,
                subset: v.subset,
                annotations,
            };
            (v.video_id.clone(), raw)
        })
        .collect();
    let text = serde_json::to_string_pretty(&RawFile { database })
        .map_err(|e| Error::contract("write_annotations", e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
