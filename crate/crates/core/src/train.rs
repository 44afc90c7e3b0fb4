//! Deterministic mini-batch training and the finite-difference gradient check.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rapnet_tensor::{ParamStore, Tape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::TemporalSegment;
use crate::error::{Error, Result};
use crate::matching::{assign_labels, compute_loss, AnchorGrid, AssignmentResult, LossBreakdown, LossWeights};
use crate::model::{decode, decode_checkpoint, encode_checkpoint, ModelConfig, RapNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub gradient_clip_norm: Option<f64>,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-3,
            optimizer: OptimizerConfig::default(),
            gradient_clip_norm: Some(10.0),
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be non-negative", self.learning_rate)));
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient_clip_norm {c} must be positive")));
            }
        }
        match self.optimizer {
            OptimizerConfig::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerConfig::Adam { beta1, beta2, epsilon }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) =>
            {
                Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One training video: channels-first features `[D×T]` and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub video_id: String,
    pub features: Tensor,
    pub gts: Vec<TemporalSegment>,
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Optimizer {
            config,
            step: 0,
            first: zeros(),
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads` (parameter order).
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        match self.config {
            OptimizerConfig::SgdMomentum { momentum } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &g), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let it = p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((w, &g), m), v) in it {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }

    /// State tensors named after the parameters they belong to, plus the
    /// step counter.
    pub fn state(&self, params: &ParamStore) -> (u64, Vec<(String, Tensor)>) {
        let mut out = Vec::new();
        for (p, t) in params.iter().zip(&self.first) {
            out.push((format!("optim/first/{}", p.name), t.clone()));
        }
        for (p, t) in params.iter().zip(&self.second) {
            out.push((format!("optim/second/{}", p.name), t.clone()));
        }
        (self.step, out)
    }

    pub fn restore(config: OptimizerConfig, params: &ParamStore, step: u64, state: &[(String, Tensor)]) -> Result<Self> {
        let mut opt = Optimizer::new(config, params);
        opt.step = step;
        let lookup = |prefix: &str, name: &str| {
            state
                .iter()
                .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Config(format!("missing optimizer state {prefix}{name}")))
        };
        for (i, p) in params.iter().enumerate() {
            opt.first[i] = lookup("optim/first/", &p.name)?;
            if !opt.second.is_empty() {
                opt.second[i] = lookup("optim/second/", &p.name)?;
            }
        }
        Ok(opt)
    }
}

/// Loss and parameter gradients of one video. With `fixed` set, that
/// assignment is used instead of re-deriving it from the predictions.
pub fn video_loss_and_grads(
    model: &RapNet,
    grid: &AnchorGrid,
    example: &TrainingExample,
    fixed: Option<&AssignmentResult>,
    with_grads: bool,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.forward_on(&mut tape, &example.features)?;
    let computed;
    let assignment = match fixed {
        Some(a) => a,
        None => {
            computed = assignment_for(model, grid, &tape, &vars, &example.gts)?;
            &computed
        }
    };
    let out = compute_loss(&mut tape, &vars, grid, assignment, &example.gts, LossWeights::from(model.config()))?;
    if !with_grads {
        return Ok((out.breakdown, Vec::new()));
    }
    let grads = tape.backward(out.objective)?;
    let params = model.params();
    let per_param = params
        .ids()
        .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(params.value(id).shape())))
        .collect();
    Ok((out.breakdown, per_param))
}

fn assignment_for(
    model: &RapNet,
    grid: &AnchorGrid,
    tape: &Tape,
    vars: &crate::model::ForwardVars,
    gts: &[TemporalSegment],
) -> Result<AssignmentResult> {
    let preds = model.read_predictions(tape, vars)?;
    let decoded = decode(&preds, &grid.anchors)?;
    assign_labels(grid, &decoded, gts, model.config().theta_iou)
}

/// Label assignment the current model produces for one video.
pub fn current_assignment(model: &RapNet, grid: &AnchorGrid, example: &TrainingExample) -> Result<AssignmentResult> {
    let mut tape = Tape::new();
    let vars = model.forward_on(&mut tape, &example.features)?;
    assignment_for(model, grid, &tape, &vars, &example.gts)
}

/// Mean loss over `examples` without updating anything.
pub fn evaluate_loss(model: &RapNet, grid: &AnchorGrid, examples: &[TrainingExample]) -> Result<LossBreakdown> {
    if examples.is_empty() {
        return Err(Error::contract("evaluate_loss", "no examples"));
    }
    let parts = examples
        .par_iter()
        .map(|ex| video_loss_and_grads(model, grid, ex, None, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = LossBreakdown::default();
    for p in &parts {
        sum.accumulate(p);
    }
    Ok(sum.scaled(1.0 / parts.len() as f64))
}

/// `sqrt(Σ g²)` over all gradient tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over the epoch's training steps.
    pub loss: LossBreakdown,
    pub wall_time_s: f64,
}

/// Training loop state: model, optimizer and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: RapNet,
    pub grid: AnchorGrid,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub step: usize,
    last: LossBreakdown,
}

impl Trainer {
    pub fn new(model: RapNet, anchors: &AnchorSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if anchors.num_levels() != model.config().levels || anchors.per_level() != model.config().anchors_per_level {
            return Err(Error::Config(format!(
                "anchor set has {}×{} anchors, model expects {}×{}",
                anchors.num_levels(),
                anchors.per_level(),
                model.config().levels,
                model.config().anchors_per_level
            )));
        }
        let grid = AnchorGrid::new(anchors, model.config().input_t)?;
        let optimizer = Optimizer::new(config.optimizer.clone(), model.params());
        Ok(Trainer {
            model,
            grid,
            config,
            optimizer,
            epoch: 0,
            step: 0,
            last: LossBreakdown::default(),
        })
    }

    /// Forward and backward over `batch` in parallel, gradients averaged in
    /// batch order, optional clipping, then one optimizer update.
    pub fn step(&mut self, batch: &[&TrainingExample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::contract("train step", "empty batch"));
        }
        let step = self.step;
        let last = self.last;
        let results = batch
            .par_iter()
            .map(|ex| video_loss_and_grads(&self.model, &self.grid, ex, None, true))
            .collect::<Vec<_>>();
        let mut grads: Vec<Tensor> = self.model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut loss = LossBreakdown::default();
        for r in results {
            let (b, g) = r.map_err(|e| match e {
                Error::Numeric { term } => {
                    log::error!("non-finite {term} at step {step}");
                    Error::Divergence { step, breakdown: last }
                }
                other => other,
            })?;
            loss.accumulate(&b);
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.add_assign(gi)?;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let loss = loss.scaled(inv);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, breakdown: loss });
        }
        for g in &mut grads {
            g.scale_in_place(inv);
        }
        if let Some(max_norm) = self.config.gradient_clip_norm {
            let norm = global_norm(&grads);
            if norm > max_norm {
                let f = max_norm / norm;
                for g in &mut grads {
                    g.scale_in_place(f);
                }
            }
        }
        self.optimizer.apply(self.model.params_mut(), &grads, self.config.learning_rate);
        self.step += 1;
        self.last = loss;
        Ok(loss)
    }

    /// Visiting order of epoch `epoch`, fixed by the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self, examples: &[TrainingExample]) -> Result<EpochLog> {
        let started = Instant::now();
        let order = self.epoch_order(self.epoch, examples.len());
        let mut sum = LossBreakdown::default();
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            sum.accumulate(&self.step(&batch)?);
            steps += 1;
        }
        let log = EpochLog {
            epoch: self.epoch,
            steps,
            loss: sum.scaled(1.0 / steps as f64),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(log)
    }

    /// Checkpoint bytes holding the model, the anchors, the optimizer state
    /// and the epoch/step counters.
    pub fn state_bytes(&self) -> Result<Vec<u8>> {
        let (opt_step, opt_state) = self.optimizer.state(self.model.params());
        let header = TrainerHeader {
            model: self.model.config().clone(),
            anchors: self.grid.anchors.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            optimizer_step: opt_step,
        };
        let header = serde_json::to_value(&header).map_err(|e| Error::contract("trainer state", e.to_string()))?;
        let mut tensors: Vec<(String, Tensor)> = self.model.named_params().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.extend(opt_state);
        encode_checkpoint(&header, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn from_state_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, tensors) = decode_checkpoint(bytes, path)?;
        let header: TrainerHeader = serde_json::from_value(header).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 12,
            msg: format!("trainer header: {e}"),
        })?;
        let (opt, params): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with("optim/"));
        let model = RapNet::from_params(header.model, params)?;
        let mut trainer = Trainer::new(model, &header.anchors, header.train)?;
        trainer.optimizer = Optimizer::restore(trainer.config.optimizer.clone(), trainer.model.params(), header.optimizer_step, &opt)?;
        trainer.epoch = header.epoch;
        trainer.step = header.step;
        Ok(trainer)
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.state_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_state_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerHeader {
    model: ModelConfig,
    anchors: AnchorSet,
    train: TrainConfig,
    epoch: usize,
    step: usize,
    optimizer_step: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RapNet,
    pub log: Vec<EpochLog>,
    /// Mean training-set loss before the first update.
    pub initial_loss: LossBreakdown,
    /// Mean training-set loss after the last update.
    pub final_loss: LossBreakdown,
}

/// Trains for `config.epochs` epochs. Each epoch's log line is passed to
/// `on_epoch` as it completes.
pub fn train(
    model: RapNet,
    anchors: &AnchorSet,
    config: &TrainConfig,
    examples: &[TrainingExample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::contract("train", "no training videos"));
    }
    let mut trainer = Trainer::new(model, anchors, config.clone())?;
    let initial_loss = evaluate_loss(&trainer.model, &trainer.grid, examples)?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let entry = trainer.run_epoch(examples)?;
        log::info!(
            "epoch {} objective {:.5} total {:.5} ({:.1}s)",
            entry.epoch,
            entry.loss.objective,
            entry.loss.total,
            entry.wall_time_s
        );
        on_epoch(&entry);
        log.push(entry);
        if let Some(path) = &config.checkpoint_path {
            trainer.save_state(path)?;
        }
    }
    let final_loss = evaluate_loss(&trainer.model, &trainer.grid, examples)?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        initial_loss,
        final_loss,
    })
}

/// Writes one JSON object per line.
pub fn write_log_line(out: &mut impl Write, entry: &EpochLog) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Central finite differences over every parameter value against the
/// analytic gradient of the mean objective over `batch`. Label assignment
/// is computed once at the unperturbed parameters and held fixed.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(model: &RapNet, anchors: &AnchorSet, batch: &[TrainingExample], eps: f64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::contract("grad_check", "empty batch"));
    }
    let grid = AnchorGrid::new(anchors, model.config().input_t)?;
    let assignments = batch
        .iter()
        .map(|ex| current_assignment(model, &grid, ex))
        .collect::<Result<Vec<_>>>()?;

    let mean_objective = |m: &RapNet| -> Result<f64> {
        let mut s = 0.0;
        for (ex, a) in batch.iter().zip(&assignments) {
            s += video_loss_and_grads(m, &grid, ex, Some(a), false)?.0.objective;
        }
        Ok(s / batch.len() as f64)
    };

    let mut analytic: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (ex, a) in batch.iter().zip(&assignments) {
        let (_, g) = video_loss_and_grads(model, &grid, ex, Some(a), true)?;
        for (acc, gi) in analytic.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    for g in &mut analytic {
        g.scale_in_place(1.0 / batch.len() as f64);
    }

    let ids: Vec<_> = model.params().ids().collect();
    let per_param = ids
        .par_iter()
        .enumerate()
        .map(|(pi, &id)| {
            let mut probe = model.clone();
            let n = probe.params().value(id).numel();
            let mut worst = (0.0f64, 0.0f64);
            for e in 0..n {
                let orig = probe.params().value(id).data()[e];
                probe.params_mut().get_mut(id).value.data_mut()[e] = orig + eps;
                let plus = mean_objective(&probe)?;
                probe.params_mut().get_mut(id).value.data_mut()[e] = orig - eps;
                let minus = mean_objective(&probe)?;
                probe.params_mut().get_mut(id).value.data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[pi].data()[e];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
                worst = (worst.0.max(rel), worst.1.max(abs));
            }
            Ok((worst, n))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GradCheckReport {
        max_rel_error: per_param.iter().map(|p| p.0 .0).fold(0.0, f64::max),
        max_abs_error: per_param.iter().map(|p| p.0 .1).fold(0.0, f64::max),
        checked: per_param.iter().map(|p| p.1).sum(),
    })
}

/// The configuration the gradient check is specified for: `T = 16`, two
/// levels, eight trunk channels.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        input_t: 16,
        input_d: 4,
        levels: 2,
        anchors_per_level: 2,
        trunk_channels: 8,
        ..ModelConfig::default()
    }
}
