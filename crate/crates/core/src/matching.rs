//! Label assignment over the anchor grid and the proposal loss.

use std::cmp::Ordering;

use rapnet_tensor::{Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::{oracle_actionness, segment_iou, TemporalSegment};
use crate::error::{Error, Result};
use crate::model::{prior_segment, AnchorCell, Decoded, ForwardVars, ModelConfig};

/// Static geometry of every anchor cell in `(level, position, anchor)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: AnchorSet,
    pub input_t: usize,
    pub per_level: usize,
    pub cells: Vec<AnchorCell>,
    pub widths: Vec<f64>,
    /// Decoded box at zero logits; `None` only if clamping empties it.
    pub priors: Vec<Option<TemporalSegment>>,
}

impl AnchorGrid {
    pub fn new(anchors: &AnchorSet, input_t: usize) -> Result<Self> {
        let n = anchors.num_levels();
        if n == 0 || input_t % (1 << (n - 1)) != 0 {
            return Err(Error::contract(
                "AnchorGrid",
                format!("input length {input_t} does not support {n} levels"),
            ));
        }
        let m = anchors.per_level();
        let mut grid = AnchorGrid {
            anchors: anchors.clone(),
            input_t,
            per_level: m,
            cells: Vec::new(),
            widths: Vec::new(),
            priors: Vec::new(),
        };
        for level in 0..n {
            for position in 0..(input_t >> level) {
                for anchor in 0..m {
                    let w = anchors.width(level, anchor);
                    grid.cells.push(AnchorCell { level, position, anchor });
                    grid.widths.push(w);
                    grid.priors.push(prior_segment(level, position, w, input_t));
                }
            }
        }
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.cells.last().map_or(0, |c| c.level + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive { gt: usize },
    Negative,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    /// Index into the grid.
    pub index: usize,
    pub cell: AnchorCell,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// In matching order.
    pub positives: Vec<Positive>,
    /// One label per grid cell.
    pub labels: Vec<Label>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl AssignmentResult {
    pub fn negatives(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Label::Negative).collect()
    }

    pub fn ignored(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Label::Ignored).collect()
    }

    pub fn n_ignored(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Ignored).count()
    }
}

/// Greedy one-to-one matching of ground truths to anchor priors, then
/// screening of unmatched anchors by their decoded predictions.
///
/// Pairs are taken in descending prior IoU; ties go to the lower grid
/// index, then the lower ground-truth index. Zero-IoU pairs take part, so
/// every ground truth is matched while free anchors remain.
pub fn assign_labels(grid: &AnchorGrid, decoded: &Decoded, gts: &[TemporalSegment], theta_iou: f64) -> Result<AssignmentResult> {
    if grid.is_empty() {
        return Err(Error::contract("assign_labels", "empty anchor grid"));
    }
    if decoded.boxes.len() != grid.len() {
        return Err(Error::contract(
            "assign_labels",
            format!("{} decoded boxes for {} cells", decoded.boxes.len(), grid.len()),
        ));
    }

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(grid.len() * gts.len());
    for (c, prior) in grid.priors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = prior.as_ref().map_or(0.0, |p| segment_iou(p, gt));
            pairs.push((iou, c, g));
        }
    }
    pairs.sort_by(pair_order);

    let mut labels = vec![Label::Negative; grid.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut positives = Vec::new();
    let target = gts.len().min(grid.len());
    for &(_, c, g) in &pairs {
        if positives.len() == target {
            break;
        }
        if gt_used[g] || labels[c] != Label::Negative {
            continue;
        }
        gt_used[g] = true;
        labels[c] = Label::Positive { gt: g };
        positives.push(Positive {
            index: c,
            cell: grid.cells[c],
            gt: g,
        });
    }

    for (label, b) in labels.iter_mut().zip(&decoded.boxes) {
        if *label != Label::Negative {
            continue;
        }
        if let Some(seg) = &b.segment {
            if gts.iter().any(|gt| segment_iou(seg, gt) > theta_iou) {
                *label = Label::Ignored;
            }
        }
    }

    let n_neg = labels.iter().filter(|l| **l == Label::Negative).count();
    Ok(AssignmentResult {
        n_pos: positives.len(),
        positives,
        labels,
        n_neg,
    })
}

/// Terms of the proposal loss. `total` is the weighted proposal loss;
/// `objective` adds the weighted auxiliary actionness term and is what
/// training minimizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub center: f64,
    pub width: f64,
    pub iou: f64,
    pub total: f64,
    pub actionness: f64,
    pub objective: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.conf_pos,
            self.conf_neg,
            self.center,
            self.width,
            self.iou,
            self.total,
            self.actionness,
            self.objective,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Element-wise sum, used for epoch averages.
    pub fn accumulate(&mut self, o: &LossBreakdown) {
        self.conf_pos += o.conf_pos;
        self.conf_neg += o.conf_neg;
        self.center += o.center;
        self.width += o.width;
        self.iou += o.iou;
        self.total += o.total;
        self.actionness += o.actionness;
        self.objective += o.objective;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            conf_pos: self.conf_pos * f,
            conf_neg: self.conf_neg * f,
            center: self.center * f,
            width: self.width * f,
            iou: self.iou * f,
            total: self.total * f,
            actionness: self.actionness * f,
            objective: self.objective * f,
        }
    }
}

/// Loss weights, taken from the model configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub conf: f64,
    pub center: f64,
    pub width: f64,
    pub iou: f64,
    pub actionness: f64,
}

impl From<&ModelConfig> for LossWeights {
    fn from(c: &ModelConfig) -> Self {
        LossWeights {
            conf: c.lambda_conf,
            center: c.lambda_center,
            width: c.lambda_width,
            iou: c.lambda_iou,
            actionness: c.lambda_actionness,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// Scalar to differentiate.
    pub objective: Var,
}

fn numeric(term: &'static str) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::NonFinite { .. } => Error::Numeric { term },
        other => Error::Tensor(other),
    }
}

fn sum_all(tape: &mut Tape, parts: &[Var]) -> std::result::Result<Var, TensorError> {
    let Some((&first, rest)) = parts.split_first() else {
        return tape.input(Tensor::scalar(0.0));
    };
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

#[derive(Default)]
struct LevelBatch {
    conf_idx: Vec<usize>,
    center_idx: Vec<usize>,
    width_idx: Vec<usize>,
    positions: Vec<f64>,
    anchor_w: Vec<f64>,
    center_t: Vec<f64>,
    width_t: Vec<f64>,
    gt_start: Vec<f64>,
    gt_end: Vec<f64>,
    gt_width: Vec<f64>,
    neg_idx: Vec<usize>,
}

/// Center offset target of a ground truth at cell `(level, position)`.
pub fn center_target(gt: &TemporalSegment, level: usize, position: usize, input_t: usize) -> f64 {
    (gt.center() / crate::model::stride(level, input_t) - position as f64).clamp(0.0, 1.0)
}

/// Records the proposal loss and the auxiliary actionness loss on `tape`.
pub fn compute_loss(
    tape: &mut Tape,
    vars: &ForwardVars,
    grid: &AnchorGrid,
    assignment: &AssignmentResult,
    gts: &[TemporalSegment],
    weights: LossWeights,
) -> Result<LossOutput> {
    let n_levels = vars.heads.len();
    if grid.num_levels() != n_levels || assignment.labels.len() != grid.len() {
        return Err(Error::contract("compute_loss", "assignment does not match the prediction grid"));
    }
    let m = grid.per_level;
    let t = grid.input_t;

    let mut batches: Vec<LevelBatch> = (0..n_levels).map(|_| LevelBatch::default()).collect();
    for p in &assignment.positives {
        let AnchorCell { level, position, anchor } = p.cell;
        let t_i = t >> level;
        let gt = &gts[p.gt];
        let w = grid.widths[p.index];
        let b = &mut batches[level];
        b.conf_idx.push(anchor * t_i + position);
        b.center_idx.push((m + anchor) * t_i + position);
        b.width_idx.push((2 * m + anchor) * t_i + position);
        b.positions.push(position as f64);
        b.anchor_w.push(w);
        b.center_t.push(center_target(gt, level, position, t));
        b.width_t.push((gt.width() / w).ln());
        b.gt_start.push(gt.start());
        b.gt_end.push(gt.end());
        b.gt_width.push(gt.width());
    }
    for (c, label) in assignment.labels.iter().enumerate() {
        if *label == Label::Negative {
            let AnchorCell { level, position, anchor } = grid.cells[c];
            batches[level].neg_idx.push(anchor * (t >> level) + position);
        }
    }

    let (mut cp, mut cn, mut cc, mut cw, mut ci) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (level, b) in batches.iter().enumerate() {
        let head = vars.heads[level];
        if !b.neg_idx.is_empty() {
            let z = tape.gather(head, &b.neg_idx)?;
            let l = tape.bce_with_logits(z, &vec![0.0; b.neg_idx.len()]).map_err(numeric("conf_neg"))?;
            cn.push(tape.sum(l).map_err(numeric("conf_neg"))?);
        }
        if b.conf_idx.is_empty() {
            continue;
        }
        let n = b.conf_idx.len();
        let z = tape.gather(head, &b.conf_idx)?;
        let l = tape.bce_with_logits(z, &vec![1.0; n]).map_err(numeric("conf_pos"))?;
        cp.push(tape.sum(l).map_err(numeric("conf_pos"))?);

        let zc = tape.gather(head, &b.center_idx)?;
        let l = tape.bce_with_logits(zc, &b.center_t).map_err(numeric("center"))?;
        cc.push(tape.sum(l).map_err(numeric("center"))?);

        let zw = tape.gather(head, &b.width_idx)?;
        let l = tape.smooth_l1(zw, &b.width_t).map_err(numeric("width"))?;
        cw.push(tape.sum(l).map_err(numeric("width"))?);

        ci.push(iou_term(tape, zc, zw, b, level, t).map_err(numeric("iou"))?);
    }

    let n_pos = assignment.n_pos;
    let n_neg = assignment.n_neg;
    let normalize = |tape: &mut Tape, parts: &[Var], count: usize, term: &'static str| -> Result<Var> {
        let s = sum_all(tape, parts).map_err(numeric(term))?;
        if count == 0 {
            return Ok(s);
        }
        tape.scale(s, 1.0 / count as f64).map_err(numeric(term))
    };
    let conf_pos = normalize(tape, &cp, n_pos, "conf_pos")?;
    let conf_neg = normalize(tape, &cn, n_neg, "conf_neg")?;
    let center = normalize(tape, &cc, n_pos, "center")?;
    let width = normalize(tape, &cw, n_pos, "width")?;
    let iou = normalize(tape, &ci, n_pos, "iou")?;

    let total = (|| {
        let conf = tape.add(conf_pos, conf_neg)?;
        let a = tape.scale(conf, weights.conf)?;
        let b = tape.scale(center, weights.center)?;
        let acc = tape.add(a, b)?;
        let c = tape.scale(width, weights.width)?;
        let acc = tape.add(acc, c)?;
        let d = tape.scale(iou, weights.iou)?;
        tape.add(acc, d)
    })()
    .map_err(numeric("total"))?;

    let act_target = oracle_actionness(gts, t);
    let actionness = (|| {
        let l = tape.bce_with_logits(vars.actionness, &act_target)?;
        let s = tape.sum(l)?;
        tape.scale(s, 1.0 / t as f64)
    })()
    .map_err(numeric("actionness"))?;

    let objective = (|| {
        let a = tape.scale(actionness, weights.actionness)?;
        tape.add(total, a)
    })()
    .map_err(numeric("objective"))?;

    let v = |x: Var| tape.value(x).data()[0];
    let breakdown = LossBreakdown {
        conf_pos: v(conf_pos),
        conf_neg: v(conf_neg),
        center: v(center),
        width: v(width),
        iou: v(iou),
        total: v(total),
        actionness: v(actionness),
        objective: v(objective),
    };
    Ok(LossOutput { breakdown, objective })
}

/// `Σ (1 − IoU(decoded, gt))` over the positives of one level.
fn iou_term(
    tape: &mut Tape,
    center_logits: Var,
    width_logs: Var,
    b: &LevelBatch,
    level: usize,
    t: usize,
) -> std::result::Result<Var, TensorError> {
    let n = b.positions.len();
    let s = crate::model::stride(level, t);
    let offset = tape.sigmoid(center_logits)?;
    let cell = tape.add_const(offset, &Tensor::vector(b.positions.clone())?)?;
    let center = tape.scale(cell, s)?;
    // Widths beyond e^10 anchors are clamped to the video either way; the
    // cap keeps exp finite for any finite prediction.
    let capped = tape.clamp(width_logs, f64::MIN, 10.0)?;
    let scale = tape.exp(capped)?;
    let width = tape.mul_const(scale, &Tensor::vector(b.anchor_w.clone())?)?;
    let half = tape.scale(width, 0.5)?;
    let start = tape.sub(center, half)?;
    let start = tape.clamp(start, 0.0, 1.0)?;
    let end = tape.add(center, half)?;
    let end = tape.clamp(end, 0.0, 1.0)?;

    let gs = tape.input(Tensor::vector(b.gt_start.clone())?)?;
    let ge = tape.input(Tensor::vector(b.gt_end.clone())?)?;
    let lo = tape.maximum(start, gs)?;
    let hi = tape.minimum(end, ge)?;
    let overlap = tape.sub(hi, lo)?;
    let inter = tape.clamp(overlap, 0.0, 1.0)?;
    let pred_w = tape.sub(end, start)?;
    let both = tape.add_const(pred_w, &Tensor::vector(b.gt_width.clone())?)?;
    let union = tape.sub(both, inter)?;
    let iou = tape.div(inter, union)?;
    let total = tape.sum(iou)?;
    let neg = tape.scale(total, -1.0)?;
    tape.add_const(neg, &Tensor::scalar(n as f64))
}

/// Orders candidate `(iou, cell, gt)` pairs the way [`assign_labels`] does.
pub fn pair_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}
