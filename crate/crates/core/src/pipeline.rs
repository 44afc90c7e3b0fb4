//! End-to-end glue: training examples from files, the bundled checkpoint,
//! inference, and per-video post-processing.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_anchors_to_levels, kmeans_anchors, AnchorSet};
use crate::data::{
    rescale_features, sort_by_rank, ActionnessCurve, FeatureMap, ProposalRecord, ResultsMap, TemporalSegment,
    VideoAnnotation,
};
use crate::error::{Error, Result};
use crate::model::{decode, decode_checkpoint, encode_checkpoint, ModelConfig, RapNet};
use crate::postprocess::{best_iou, pem_features, pem_rerank, snap_boundaries, soft_nms, tag_regions, NmsConfig, PemConfig, PemModel, TagConfig};
use crate::train::{train, EpochLog, TrainConfig, TrainOutcome, TrainingExample};

/// Trained network, its anchors and the optional PEM, stored together.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: RapNet,
    pub anchors: AnchorSet,
    pub pem: Option<PemModel>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    model: ModelConfig,
    anchors: AnchorSet,
    pem: Option<PemConfig>,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BundleHeader {
            model: self.model.config().clone(),
            anchors: self.anchors.clone(),
            pem: self.pem.as_ref().map(|p| p.config.clone()),
        };
        let header = serde_json::to_value(&header).map_err(|e| Error::contract("checkpoint", e.to_string()))?;
        let mut params = self.model.named_params();
        if let Some(pem) = &self.pem {
            params.extend(pem.named_params());
        }
        encode_checkpoint(&header, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, params) = decode_checkpoint(&bytes, path)?;
        let header: BundleHeader = serde_json::from_value(header).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 12,
            msg: format!("configuration blob: {e}"),
        })?;
        let (pem_params, model_params): (Vec<_>, Vec<_>) = params.into_iter().partition(|(n, _)| n.starts_with("pem/"));
        let model = RapNet::from_params(header.model, model_params)?;
        let pem = header.pem.map(|cfg| PemModel::from_params(cfg, pem_params)).transpose()?;
        Ok(ModelBundle {
            model,
            anchors: header.anchors,
            pem,
        })
    }
}

/// K-means anchors over the segment widths of `videos`, split over `levels`.
pub fn anchors_from_annotations<'a>(
    videos: impl IntoIterator<Item = &'a VideoAnnotation>,
    k: usize,
    levels: usize,
    seed: u64,
) -> Result<AnchorSet> {
    let widths: Vec<f64> = videos.into_iter().flat_map(|v| v.segments.iter().map(TemporalSegment::width)).collect();
    let result = kmeans_anchors(&widths, k, seed, 100)?;
    assign_anchors_to_levels(&result.centroids, levels)
}

/// Pairs annotations with their feature maps, rescaled to `input_t`.
pub fn build_examples<'a>(
    videos: impl IntoIterator<Item = &'a VideoAnnotation>,
    features: &BTreeMap<String, FeatureMap>,
    input_t: usize,
) -> Result<Vec<TrainingExample>> {
    videos
        .into_iter()
        .map(|v| {
            let f = features
                .get(&v.video_id)
                .ok_or_else(|| Error::contract("build_examples", format!("no features for {}", v.video_id)))?;
            Ok(TrainingExample {
                video_id: v.video_id.clone(),
                features: rescale_features(f, input_t)?.to_channels_first(),
                gts: v.segments.clone(),
            })
        })
        .collect()
}

/// Raw decoded proposals (rank order) and predicted actionness of one video.
pub fn infer_video(model: &RapNet, anchors: &AnchorSet, features: &FeatureMap, source: &str) -> Result<(Vec<ProposalRecord>, ActionnessCurve)> {
    let input = rescale_features(features, model.config().input_t)?.to_channels_first();
    let preds = model.predict(&input)?;
    let decoded = decode(&preds, anchors)?;
    if decoded.dropped > 0 {
        log::debug!("{}: {} decoded boxes clamped away", features.video_id, decoded.dropped);
    }
    let mut records = decoded.to_records(&features.video_id, source);
    sort_by_rank(&mut records);
    let curve = ActionnessCurve::new(features.video_id.clone(), preds.actionness())?;
    Ok((records, curve))
}

pub type ActionnessMap = BTreeMap<String, ActionnessCurve>;

pub fn infer_all(model: &RapNet, anchors: &AnchorSet, features: &[FeatureMap], source: &str) -> Result<(ResultsMap, ActionnessMap)> {
    let out = features
        .par_iter()
        .map(|f| infer_video(model, anchors, f, source))
        .collect::<Result<Vec<_>>>()?;
    let mut results = ResultsMap::new();
    let mut curves = ActionnessMap::new();
    for (records, curve) in out {
        results.insert(curve.video_id.clone(), records);
        curves.insert(curve.video_id.clone(), curve);
    }
    Ok((results, curves))
}

/// PEM training pairs: features of each video's top raw proposals against
/// their best IoU with ground truth.
pub fn pem_samples(model: &RapNet, anchors: &AnchorSet, examples: &[TrainingExample], cfg: &PemConfig) -> Result<Vec<(Vec<f64>, f64)>> {
    let per_video = examples
        .par_iter()
        .map(|ex| {
            let preds = model.predict(&ex.features)?;
            let mut records = decode(&preds, anchors)?.to_records(&ex.video_id, "train");
            sort_by_rank(&mut records);
            records.truncate(cfg.proposals_per_video);
            let curve = ActionnessCurve::new(ex.video_id.clone(), preds.actionness())?;
            Ok(records
                .iter()
                .map(|r| (pem_features(&curve, &r.segment, cfg), best_iou(&r.segment, &ex.gts)))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.concat())
}

/// Trains the network and, if configured, a PEM on its outputs.
pub fn train_bundle(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    pem_cfg: Option<&PemConfig>,
    anchors: &AnchorSet,
    examples: &[TrainingExample],
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelBundle, TrainOutcome)> {
    let model = RapNet::build(model_cfg.clone())?;
    let outcome = train(model, anchors, train_cfg, examples, on_epoch)?;
    let pem = match pem_cfg {
        Some(cfg) => {
            let samples = pem_samples(&outcome.model, anchors, examples, cfg)?;
            let mut pem = PemModel::new(cfg.clone())?;
            let history = pem.fit(&samples)?;
            log::info!(
                "PEM fitted on {} samples, loss {:.5} -> {:.5}",
                samples.len(),
                history.first().copied().unwrap_or(0.0),
                history.last().copied().unwrap_or(0.0)
            );
            Some(pem)
        }
        None => None,
    };
    let bundle = ModelBundle {
        model: outcome.model.clone(),
        anchors: anchors.clone(),
        pem,
    };
    Ok((bundle, outcome))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOptions {
    pub nms: NmsConfig,
    pub tag: Option<TagConfig>,
}

/// PEM re-rank (if a scorer is given), soft-NMS, then TAG snapping (if
/// configured) for one video.
pub fn postprocess_video(
    mut records: Vec<ProposalRecord>,
    actionness: Option<&ActionnessCurve>,
    pem: Option<&PemModel>,
    gts: &[TemporalSegment],
    opts: &PostprocessOptions,
) -> Result<Vec<ProposalRecord>> {
    if let Some(pem) = pem {
        pem_rerank(pem, &mut records, actionness, gts)?;
    }
    let kept = soft_nms(records, &opts.nms);
    match &opts.tag {
        Some(tag) => {
            let video = kept.first().map(|r| r.video_id.clone()).unwrap_or_default();
            let curve = actionness.ok_or(Error::MissingActionness(video))?;
            let regions = tag_regions(curve, tag);
            let mut snapped = snap_boundaries(&kept, &regions, tag);
            sort_by_rank(&mut snapped);
            Ok(snapped)
        }
        None => Ok(kept),
    }
}

/// Runs [`postprocess_video`] over every video. Videos that fail are left
/// out of the results and reported with their error.
pub fn postprocess_all(
    raw: &ResultsMap,
    actionness: &ActionnessMap,
    pem: Option<&PemModel>,
    gts: &BTreeMap<String, Vec<TemporalSegment>>,
    opts: &PostprocessOptions,
) -> (ResultsMap, Vec<(String, Error)>) {
    let outcomes: Vec<(String, Result<Vec<ProposalRecord>>)> = raw
        .par_iter()
        .map(|(vid, records)| {
            let gt = gts.get(vid).map(Vec::as_slice).unwrap_or(&[]);
            let r = postprocess_video(records.clone(), actionness.get(vid), pem, gt, opts);
            (vid.clone(), r)
        })
        .collect();
    let mut results = ResultsMap::new();
    let mut failures = Vec::new();
    for (vid, r) in outcomes {
        match r {
            Ok(v) => {
                results.insert(vid, v);
            }
            Err(e) => failures.push((vid, e)),
        }
    }
    (results, failures)
}
