//! Boundary adjustment after the network: PEM re-ranking, soft-NMS, TAG
//! region snapping, and fusion of several proposal sets.

mod nms;
mod pem;
mod tag;

use std::collections::BTreeSet;

use crate::data::{ProposalRecord, ResultsMap};

pub use nms::{soft_nms, NmsConfig};
pub use pem::{best_iou, pem_features, pem_rerank, PemConfig, PemModel};
pub use tag::{snap_boundaries, tag_regions, TagConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub results: ResultsMap,
    /// Videos found in only one input, passed through unchanged.
    pub single_source_videos: usize,
}

/// Min-max normalizes each source per video, pools the sources and runs
/// soft-NMS. A source whose scores are all equal keeps its raw scores.
pub fn ensemble_fuse(lists: &[ResultsMap], cfg: &NmsConfig) -> Fused {
    let videos: BTreeSet<&String> = lists.iter().flat_map(|l| l.keys()).collect();
    let mut results = ResultsMap::new();
    let mut single_source_videos = 0;
    for vid in videos {
        let present: Vec<&Vec<ProposalRecord>> = lists.iter().filter_map(|l| l.get(vid)).collect();
        if present.len() == 1 {
            single_source_videos += 1;
            results.insert(vid.clone(), present[0].clone());
            continue;
        }
        let mut pooled = Vec::new();
        for records in present {
            let lo = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
            let hi = records.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
            for r in records {
                let mut r = r.clone();
                if hi > lo {
                    r.score = (r.score - lo) / (hi - lo);
                }
                pooled.push(r);
            }
        }
        results.insert(vid.clone(), soft_nms(pooled, cfg));
    }
    if single_source_videos > 0 {
        log::warn!("{single_source_videos} videos appear in only one proposal list");
    }
    Fused {
        results,
        single_source_videos,
    }
}
