//! Proposal evaluation: actionness sampled in and around a proposal, scored
//! by a two-layer perceptron that regresses the proposal's best IoU.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapnet_tensor::nn::sigmoid;
use rapnet_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{segment_iou, sort_by_rank, ActionnessCurve, ProposalRecord, TemporalSegment, STAGE_PEM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PemConfig {
    pub n_inner: usize,
    pub n_boundary: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Highest-confidence raw proposals per training video used as samples.
    pub proposals_per_video: usize,
    pub seed: u64,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig {
            n_inner: 16,
            n_boundary: 8,
            hidden: 64,
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            proposals_per_video: 100,
            seed: 0,
        }
    }
}

impl PemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inner < 2 || self.n_boundary < 2 {
            return Err(Error::Config("PEM needs at least two samples per region".into()));
        }
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || self.proposals_per_video == 0 {
            return Err(Error::Config("PEM sizes and counts must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("PEM learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.n_inner + 2 * self.n_boundary
    }
}

fn sample_range(curve: &ActionnessCurve, lo: f64, hi: f64, n: usize, out: &mut Vec<f64>) {
    let step = (hi - lo) / n as f64;
    for k in 0..n {
        let x = (lo + (k as f64 + 0.5) * step).clamp(0.0, 1.0);
        out.push(curve.sample(x));
    }
}

/// Actionness at `n_inner` bin centers across `[s, e]`, then `n_boundary`
/// around each of `s` and `e` over a window of ±(e−s)/5.
pub fn pem_features(curve: &ActionnessCurve, p: &TemporalSegment, cfg: &PemConfig) -> Vec<f64> {
    let (s, e) = (p.start(), p.end());
    let r = (e - s) / 5.0;
    let mut out = Vec::with_capacity(cfg.feature_len());
    sample_range(curve, s, e, cfg.n_inner, &mut out);
    sample_range(curve, s - r, s + r, cfg.n_boundary, &mut out);
    sample_range(curve, e - r, e + r, cfg.n_boundary, &mut out);
    out
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Scorer used for re-ranking: a trained perceptron, or in oracle mode the
/// true best IoU against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PemModel {
    pub config: PemConfig,
    pub oracle_mode: bool,
    store: ParamStore,
}

impl PemModel {
    /// Randomly initialized perceptron.
    pub fn new(config: PemConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (f, h) = (config.feature_len(), config.hidden);
        let mut uniform = |name: &str, shape: [usize; 2], fan_in: usize| -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
            store.add(format!("pem/{name}"), Tensor::new(shape.to_vec(), data)?)?;
            Ok(())
        };
        uniform("w1", [f, h], f)?;
        uniform("b1", [1, h], f)?;
        uniform("w2", [h, 1], h)?;
        uniform("b2", [1, 1], h)?;
        Ok(PemModel {
            config,
            oracle_mode: false,
            store,
        })
    }

    /// Scores proposals by their true IoU; for tests and diagnostics.
    pub fn oracle(config: PemConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.oracle_mode = true;
        Ok(m)
    }

    pub fn from_params(config: PemConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.store.len() {
            return Err(Error::Config(format!("expected {} PEM parameters, found {}", model.store.len(), params.len())));
        }
        for (name, value) in params {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unexpected PEM parameter {name}")))?;
            if model.store.value(id).shape() != value.shape() {
                return Err(Error::Config(format!("PEM parameter {name} has the wrong shape")));
            }
            model.store.get_mut(id).value = value;
        }
        Ok(model)
    }

    pub fn named_params(&self) -> Vec<(&str, &Tensor)> {
        self.store.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    fn ids(&self) -> Mlp {
        let id = |n: &str| self.store.find(&format!("pem/{n}")).expect("PEM parameter present");
        Mlp {
            w1: id("w1"),
            b1: id("b1"),
            w2: id("w2"),
            b2: id("b2"),
        }
    }

    /// Logits `[B×1]` for a batch of feature rows.
    fn forward(&self, tape: &mut Tape, rows: &[&[f64]]) -> Result<Var> {
        let ids = self.ids();
        let b = rows.len();
        let x = tape.input(Tensor::new(vec![b, self.config.feature_len()], rows.concat())?)?;
        let ones = tape.input(Tensor::ones(&[b, 1]))?;
        let w1 = tape.param(&self.store, ids.w1)?;
        let b1 = tape.param(&self.store, ids.b1)?;
        let w2 = tape.param(&self.store, ids.w2)?;
        let b2 = tape.param(&self.store, ids.b2)?;
        let h = tape.matmul(x, w1)?;
        let hb = tape.matmul(ones, b1)?;
        let h = tape.add(h, hb)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, w2)?;
        let ob = tape.matmul(ones, b2)?;
        Ok(tape.add(o, ob)?)
    }

    /// Predicted IoU in `(0, 1)` for one feature vector.
    pub fn score_features(&self, features: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &[features])?;
        Ok(sigmoid(tape.value(out).data()[0]))
    }

    /// Fits the perceptron with Adam on smooth-L1 between the sigmoid output
    /// and the IoU targets. Returns the mean loss of each epoch.
    pub fn fit(&mut self, samples: &[(Vec<f64>, f64)]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::contract("PemModel::fit", "no training samples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5045_4d00);
        let mut opt = crate::train::Optimizer::new(crate::train::OptimizerConfig::default(), &self.store);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].0.as_slice()).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| samples[i].1).collect();
                let mut tape = Tape::new();
                let logits = self.forward(&mut tape, &rows)?;
                let p = tape.sigmoid(logits)?;
                let l = tape.smooth_l1(p, &targets)?;
                let s = tape.sum(l)?;
                let loss = tape.scale(s, 1.0 / chunk.len() as f64)?;
                total += tape.value(s).data()[0];
                let grads = tape.backward(loss)?;
                let per: Vec<Tensor> = self
                    .store
                    .ids()
                    .map(|id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape())))
                    .collect();
                opt.apply(&mut self.store, &per, self.config.learning_rate);
            }
            history.push(total / samples.len() as f64);
        }
        Ok(history)
    }
}

/// Best IoU of `p` against any ground truth; 0 with none.
pub fn best_iou(p: &TemporalSegment, gts: &[TemporalSegment]) -> f64 {
    gts.iter().map(|g| segment_iou(p, g)).fold(0.0, f64::max)
}

/// Multiplies each proposal's raw confidence by the PEM output, records the
/// `pem` stage and re-sorts. Oracle mode reads `gts`; otherwise the
/// actionness curve is required.
pub fn pem_rerank(
    pem: &PemModel,
    proposals: &mut Vec<ProposalRecord>,
    actionness: Option<&ActionnessCurve>,
    gts: &[TemporalSegment],
) -> Result<()> {
    for p in proposals.iter_mut() {
        let out = if pem.oracle_mode {
            best_iou(&p.segment, gts)
        } else {
            let curve = actionness.ok_or_else(|| Error::MissingActionness(p.video_id.clone()))?;
            pem.score_features(&pem_features(curve, &p.segment, &pem.config))?
        };
        let score = p.raw_conf() * out;
        p.set_stage(STAGE_PEM, score);
    }
    sort_by_rank(proposals);
    Ok(())
}
