//! One function per pipeline stage. Each reads its inputs, writes its
//! outputs plus a copy of the effective configuration, and returns the
//! summary object printed on stdout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rapnet_core::anchors::AnchorSet;
use rapnet_core::data::{
    generate_synthetic_corpus, load_annotations, read_actionness, read_feature_file, read_proposals, write_actionness,
    write_annotations, write_feature_file, write_proposals, FeatureMap, ResultsMap, Subset,
};
use rapnet_core::eval::{emit_report, evaluate};
use rapnet_core::pipeline::{
    anchors_from_annotations, build_examples, infer_all, postprocess_all, train_bundle, ActionnessMap, ModelBundle,
    PostprocessOptions,
};
use rapnet_core::postprocess::{ensemble_fuse, PemModel};
use rapnet_core::train::write_log_line;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::UsageError;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `<stage>.config.json` next to the stage's outputs.
fn echo_config(dir: &Path, stage: &str, cfg: &PipelineConfig, io: Value) -> Result<()> {
    write_json(&dir.join(format!("{stage}.config.json")), &json!({ "stage": stage, "config": cfg, "io": io }))
}

/// Every `*.rapf` file in `dir`, sorted by video id.
pub fn read_feature_dir(dir: &Path) -> Result<Vec<FeatureMap>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading feature directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "rapf"));
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("no .rapf feature files in {}", dir.display());
    }
    Ok(paths.par_iter().map(read_feature_file).collect::<rapnet_core::Result<_>>()?)
}

pub fn read_anchor_file(path: &Path) -> Result<AnchorSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing anchors {}", path.display()))
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let corpus = generate_synthetic_corpus(&cfg.data)?;
    let features_dir = out.join("features");
    create_dir(&features_dir)?;
    let annotations = out.join("annotations.json");
    write_annotations(&annotations, &corpus.annotations)?;
    corpus
        .features
        .par_iter()
        .try_for_each(|f| write_feature_file(features_dir.join(format!("{}.rapf", f.video_id)), f))?;
    let actionness = out.join("oracle_actionness.json");
    write_actionness(&actionness, &corpus.actionness)?;
    echo_config(out, "gen-data", cfg, json!({ "out": out }))?;
    let instances: usize = corpus.annotations.iter().map(|a| a.segments.len()).sum();
    Ok(json!({
        "videos": corpus.len(),
        "validation": cfg.data.num_validation,
        "instances": instances,
        "annotations": annotations,
        "features": features_dir,
        "oracle_actionness": actionness,
    }))
}

fn cluster(cfg: &PipelineConfig, annotations: &Path) -> Result<AnchorSet> {
    let set = load_annotations(annotations)?;
    if set.subset(Subset::Training).next().is_none() {
        anyhow::bail!("{} has no training videos to cluster", annotations.display());
    }
    Ok(anchors_from_annotations(
        set.subset(Subset::Training),
        cfg.anchors.k,
        cfg.model.levels,
        cfg.anchors.seed,
    )?)
}

pub fn cluster_anchors(cfg: &PipelineConfig, annotations: &Path, out: &Path) -> Result<Value> {
    if cfg.model.levels == 0 || cfg.anchors.k % cfg.model.levels != 0 {
        return Err(UsageError(format!("k = {} does not split evenly over {} levels", cfg.anchors.k, cfg.model.levels)).into());
    }
    let anchors = cluster(cfg, annotations)?;
    let dir = parent_dir(out);
    create_dir(&dir)?;
    write_json(out, &anchors)?;
    echo_config(&dir, "cluster-anchors", cfg, json!({ "annotations": annotations, "out": out }))?;
    Ok(json!({
        "k": anchors.total(),
        "levels": anchors.levels(),
        "per_level": anchors.per_level(),
        "out": out,
    }))
}

pub fn train(cfg: &PipelineConfig, annotations: &Path, features: &Path, anchors: Option<&Path>, out: &Path) -> Result<Value> {
    cfg.validate_training()?;
    let set = load_annotations(annotations)?;
    let anchor_set = match anchors {
        Some(p) => read_anchor_file(p)?,
        None => {
            log::info!("no anchor file given; clustering {} anchors from the training annotations", cfg.anchors.k);
            cluster(cfg, annotations)?
        }
    };
    let feats: BTreeMap<String, FeatureMap> =
        read_feature_dir(features)?.into_iter().map(|f| (f.video_id.clone(), f)).collect();
    let examples = build_examples(set.subset(Subset::Training), &feats, cfg.model.input_t)?;
    if examples.is_empty() {
        anyhow::bail!("{} has no training videos", annotations.display());
    }
    create_dir(out)?;
    echo_config(
        out,
        "train",
        cfg,
        json!({ "annotations": annotations, "features": features, "anchors": anchors, "out": out }),
    )?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let pem = cfg.postprocess.pem.then_some(&cfg.pem);
    let (bundle, outcome) = train_bundle(&cfg.model, &cfg.train, pem, &anchor_set, &examples, |entry| {
        if log_err.is_none() {
            log_err = write_log_line(&mut log_file, entry).and_then(|_| log_file.flush()).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    let checkpoint = out.join("model.rapc");
    bundle.save(&checkpoint)?;
    let (first, last) = (outcome.initial_loss, outcome.final_loss);
    Ok(json!({
        "train_videos": examples.len(),
        "epochs": outcome.log.len(),
        "initial_loss": first.total,
        "final_loss": last.total,
        "loss_ratio": last.total / first.total,
        "initial_objective": first.objective,
        "final_objective": last.objective,
        "pem": bundle.pem.is_some(),
        "checkpoint": checkpoint,
        "log": log_path,
    }))
}

pub fn infer(cfg: &PipelineConfig, checkpoint: &Path, features: &Path, out: &Path) -> Result<Value> {
    let bundle = ModelBundle::load(checkpoint)?;
    let feats = read_feature_dir(features)?;
    let (results, curves) = infer_all(&bundle.model, &bundle.anchors, &feats, "rapnet")?;
    create_dir(out)?;
    let proposals = out.join("raw_proposals.json");
    let actionness = out.join("actionness.json");
    write_proposals(&proposals, &results)?;
    write_actionness(&actionness, curves.values())?;
    echo_config(out, "infer", cfg, json!({ "checkpoint": checkpoint, "features": features, "out": out }))?;
    Ok(json!({
        "videos": results.len(),
        "proposals": results.values().map(Vec::len).sum::<usize>(),
        "raw_proposals": proposals,
        "actionness": actionness,
    }))
}

/// Inputs of the post-processing stage beyond the configuration.
pub struct PostprocessInputs<'a> {
    pub proposals: &'a Path,
    pub actionness: &'a Path,
    pub checkpoint: &'a Path,
    /// Ground truth for an oracle PEM that scores by true IoU.
    pub oracle_gt: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn postprocess(cfg: &PipelineConfig, inputs: &PostprocessInputs) -> Result<Value> {
    let raw = read_proposals(inputs.proposals)?;
    let switches = &cfg.postprocess;
    let curves: ActionnessMap = if switches.pem || switches.tag || inputs.actionness.exists() {
        read_actionness(inputs.actionness)?
    } else {
        ActionnessMap::new()
    };
    let mut gts = BTreeMap::new();
    let pem = match (switches.pem, inputs.oracle_gt) {
        (false, _) => None,
        (true, Some(gt)) => {
            gts = load_annotations(gt)?.ground_truth(None);
            Some(PemModel::oracle(cfg.pem.clone())?)
        }
        (true, None) => {
            let bundle = ModelBundle::load(inputs.checkpoint)?;
            let pem = bundle.pem.ok_or_else(|| {
                UsageError(format!(
                    "{} holds no PEM; train with postprocess.pem enabled or pass --no-pem",
                    inputs.checkpoint.display()
                ))
            })?;
            Some(pem)
        }
    };
    let opts = PostprocessOptions {
        nms: cfg.nms.clone(),
        tag: switches.tag.then(|| cfg.tag.clone()),
    };
    let (results, failures) = postprocess_all(&raw, &curves, pem.as_ref(), &gts, &opts);
    for (vid, e) in &failures {
        log::warn!("{vid}: {e}");
    }
    let dir = parent_dir(inputs.out);
    create_dir(&dir)?;
    write_proposals(inputs.out, &results)?;
    echo_config(
        &dir,
        "postprocess",
        cfg,
        json!({
            "proposals": inputs.proposals,
            "actionness": inputs.actionness,
            "checkpoint": pem.as_ref().filter(|p| !p.oracle_mode).map(|_| inputs.checkpoint),
            "oracle_gt": inputs.oracle_gt,
            "out": inputs.out,
        }),
    )?;
    Ok(json!({
        "videos": results.len(),
        "failed_videos": failures.len(),
        "proposals": results.values().map(Vec::len).sum::<usize>(),
        "pem": pem.as_ref().map(|p| if p.oracle_mode { "oracle" } else { "learned" }),
        "tag": switches.tag,
        "nms_sigma": cfg.nms.sigma,
        "out": inputs.out,
    }))
}

pub fn ensemble(cfg: &PipelineConfig, inputs: &[PathBuf], out: &Path) -> Result<Value> {
    let lists: Vec<ResultsMap> = inputs.iter().map(read_proposals).collect::<rapnet_core::Result<_>>()?;
    let fused = ensemble_fuse(&lists, &cfg.nms);
    let dir = parent_dir(out);
    create_dir(&dir)?;
    write_proposals(out, &fused.results)?;
    echo_config(&dir, "ensemble", cfg, json!({ "inputs": inputs, "out": out }))?;
    Ok(json!({
        "inputs": inputs.len(),
        "videos": fused.results.len(),
        "single_source_videos": fused.single_source_videos,
        "out": out,
    }))
}

pub fn eval(cfg: &PipelineConfig, gt: &Path, proposals: &Path, out: &Path) -> Result<Value> {
    let gts = load_annotations(gt)?.ground_truth(cfg.eval_subset);
    let props = read_proposals(proposals)?;
    let report = evaluate(&props, &gts, &cfg.eval)?;
    create_dir(out)?;
    emit_report(&report, out)?;
    echo_config(out, "eval", cfg, json!({ "gt": gt, "proposals": proposals, "out": out }))?;
    Ok(json!({
        "subset": cfg.eval_subset,
        "videos": report.num_videos,
        "ground_truth": report.num_ground_truth,
        "ar_at": report.ar_at,
        "AUC": report.auc,
        "out": out,
    }))
}

/// Every stage in order over the default layout.
pub fn pipeline(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate_training()?;
    let l = cfg.layout();
    let data = gen_data(cfg, &l.data_dir())?;
    let anchors = cluster_anchors(cfg, &l.annotations(), &l.anchors())?;
    let trained = train(cfg, &l.annotations(), &l.features(), Some(&l.anchors()), &l.model_dir())?;
    let inferred = infer(cfg, &l.checkpoint(), &l.features(), &l.infer_dir())?;
    let post = postprocess(
        cfg,
        &PostprocessInputs {
            proposals: &l.raw_proposals(),
            actionness: &l.actionness(),
            checkpoint: &l.checkpoint(),
            oracle_gt: None,
            out: &l.proposals(),
        },
    )?;
    let metrics = eval(cfg, &l.annotations(), &l.proposals(), &l.eval_dir())?;
    Ok(json!({
        "gen_data": data,
        "cluster_anchors": anchors,
        "train": trained,
        "infer": inferred,
        "postprocess": post,
        "eval": metrics,
    }))
}
