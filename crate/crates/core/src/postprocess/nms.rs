use serde::{Deserialize, Serialize};

use crate::data::{rank_order, segment_iou, sort_by_rank, ProposalRecord, STAGE_POST_NMS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub sigma: f64,
    pub score_floor: f64,
    pub max_kept: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            sigma: 0.5,
            score_floor: 1e-3,
            max_kept: 100,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("nms sigma {} must be positive", self.sigma)));
        }
        if self.max_kept == 0 {
            return Err(Error::Config("max_kept must be at least 1".into()));
        }
        if !self.score_floor.is_finite() {
            return Err(Error::Config("score_floor must be finite".into()));
        }
        Ok(())
    }
}

/// Gaussian soft-NMS.
///
/// Repeatedly keeps the best remaining proposal (score, then start, then
/// end) and multiplies every other remaining score by `exp(−iou²/σ)`.
/// Proposals whose score falls below the floor are dropped. The kept
/// proposals get a `post_nms` stage score.
pub fn soft_nms(proposals: Vec<ProposalRecord>, cfg: &NmsConfig) -> Vec<ProposalRecord> {
    let mut remaining: Vec<ProposalRecord> = proposals.into_iter().filter(|p| p.score >= cfg.score_floor).collect();
    let mut kept = Vec::with_capacity(cfg.max_kept.min(remaining.len()));
    while !remaining.is_empty() && kept.len() < cfg.max_kept {
        let best = (1..remaining.len()).fold(0, |b, i| {
            if rank_order(&remaining[i], &remaining[b]).is_lt() {
                i
            } else {
                b
            }
        });
        let mut chosen = remaining.swap_remove(best);
        let score = chosen.score;
        chosen.set_stage(STAGE_POST_NMS, score);
        for p in &mut remaining {
            let iou = segment_iou(&chosen.segment, &p.segment);
            p.score *= (-(iou * iou) / cfg.sigma).exp();
        }
        remaining.retain(|p| p.score >= cfg.score_floor);
        kept.push(chosen);
    }
    sort_by_rank(&mut kept);
    kept
}
