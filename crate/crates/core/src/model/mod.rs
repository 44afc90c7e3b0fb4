//! The relation-aware pyramid network.
//!
//! A convolutional trunk halves the temporal length at every level, each
//! selected level is enhanced by one self-attention block, and an FPN-style
//! top-down path fuses coarse levels into finer ones before per-level
//! 1-tap heads predict anchor confidence, center offset and log-width.

mod checkpoint;
mod decode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rapnet_tensor::nn::{self_attention, AttentionWeights};
use rapnet_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{decode, decode_cell, encode_cell, prior_segment, stride, AnchorCell, DecodedBox, Decoded};

/// Initial bias of the confidence rows of every head.
pub const CONF_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_t: usize,
    pub input_d: usize,
    pub levels: usize,
    pub anchors_per_level: usize,
    pub trunk_channels: usize,
    /// Levels that get a self-attention block; `None` means all of them.
    pub attention_levels: Option<Vec<usize>>,
    pub lambda_conf: f64,
    pub lambda_center: f64,
    pub lambda_width: f64,
    pub lambda_iou: f64,
    /// Weight of the auxiliary actionness loss added to the proposal loss.
    pub lambda_actionness: f64,
    pub theta_iou: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_t: 128,
            input_d: 256,
            levels: 6,
            anchors_per_level: 2,
            trunk_channels: 64,
            attention_levels: None,
            lambda_conf: 0.2,
            lambda_center: 1.0,
            lambda_width: 1.0,
            lambda_iou: 1.0,
            lambda_actionness: 1.0,
            theta_iou: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.input_t == 0 || self.input_t % (1 << (self.levels - 1)) != 0 {
            return bad(format!(
                "input_t {} is not divisible by 2^{}",
                self.input_t,
                self.levels - 1
            ));
        }
        if self.anchors_per_level == 0 || self.trunk_channels == 0 || self.input_d == 0 {
            return bad("anchors_per_level, trunk_channels and input_d must be positive".into());
        }
        if let Some(levels) = &self.attention_levels {
            if let Some(l) = levels.iter().find(|&&l| l >= self.levels) {
                return bad(format!("attention level {l} does not exist"));
            }
        }
        let weights = [
            self.lambda_conf,
            self.lambda_center,
            self.lambda_width,
            self.lambda_iou,
            self.lambda_actionness,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.theta_iou) {
            return bad(format!("theta_iou {} outside [0, 1]", self.theta_iou));
        }
        Ok(())
    }

    /// Temporal length of pyramid level `i`.
    pub fn level_length(&self, i: usize) -> usize {
        self.input_t >> i
    }

    pub fn level_lengths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.level_length(i)).collect()
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.as_ref().is_none_or(|l| l.contains(&level))
    }

    pub fn total_cells(&self) -> usize {
        self.level_lengths().iter().sum::<usize>() * self.anchors_per_level
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

/// Head outputs of one pyramid level, each `[M×T_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelHead {
    pub conf_logits: Tensor,
    pub center_logits: Tensor,
    pub width_logs: Tensor,
}

impl LevelHead {
    /// Splits a raw head output `[3M×T_i]` into its three row blocks.
    pub fn from_raw(raw: &Tensor, m: usize) -> Result<Self> {
        let (rows, t) = raw.dims2("LevelHead")?;
        if rows != 3 * m {
            return Err(Error::contract("LevelHead", format!("expected {} rows, got {rows}", 3 * m)));
        }
        let block = |b: usize| Tensor::new(vec![m, t], raw.data()[b * m * t..(b + 1) * m * t].to_vec());
        Ok(LevelHead {
            conf_logits: block(0)?,
            center_logits: block(1)?,
            width_logs: block(2)?,
        })
    }

    pub fn length(&self) -> usize {
        self.conf_logits.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPredictions {
    pub levels: Vec<LevelHead>,
    /// Actionness logits of the finest level, length `T`.
    pub actionness_logits: Vec<f64>,
}

impl LevelPredictions {
    pub fn actionness(&self) -> Vec<f64> {
        self.actionness_logits.iter().map(|&z| rapnet_tensor::nn::sigmoid(z)).collect()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Raw head output per level, `[3M×T_i]`: confidence rows first, then
    /// center rows, then width rows.
    pub heads: Vec<Var>,
    /// `[1×T]` actionness logits.
    pub actionness: Var,
}

/// Model parameters plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct RapNet {
    config: ModelConfig,
    store: ParamStore,
    stem: Conv,
    down: Vec<Conv>,
    attention: Vec<Option<Attention>>,
    lateral: Vec<Option<Conv>>,
    heads: Vec<Conv>,
    actionness: Conv,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Ok(self.store.add(name, Tensor::new(shape.to_vec(), data)?)?)
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<Conv> {
        let fan_in = c_in * k;
        Ok(Conv {
            weight: self.uniform(format!("{name}/weight"), &[c_out, c_in, k], fan_in)?,
            bias: self.uniform(format!("{name}/bias"), &[c_out], fan_in)?,
        })
    }

    fn attention(&mut self, name: &str, c: usize) -> Result<Attention> {
        Ok(Attention {
            query: self.uniform(format!("{name}/query"), &[c, c], c)?,
            key: self.uniform(format!("{name}/key"), &[c, c], c)?,
            value: self.uniform(format!("{name}/value"), &[c, c], c)?,
            output: self.uniform(format!("{name}/output"), &[c, c], c)?,
        })
    }
}

impl RapNet {
    /// Builds a freshly initialized model from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c, m, n) = (config.trunk_channels, config.anchors_per_level, config.levels);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: ParamStore::new(),
        };
        let stem = init.conv("stem", c, config.input_d, 3)?;
        let down = (1..n)
            .map(|i| init.conv(&format!("down{i}"), c, c, 3))
            .collect::<Result<Vec<_>>>()?;
        let attention = (0..n)
            .map(|i| {
                config
                    .has_attention(i)
                    .then(|| init.attention(&format!("attention{i}"), c))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let lateral = (0..n)
            .map(|i| (i + 1 < n).then(|| init.conv(&format!("lateral{i}"), c, c, 1)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..n)
            .map(|i| init.conv(&format!("head{i}"), 3 * m, c, 1))
            .collect::<Result<Vec<_>>>()?;
        let actionness = init.conv("actionness", 1, c, 1)?;

        let mut store = init.store;
        for head in &heads {
            let bias = &mut store.get_mut(head.bias).value;
            bias.data_mut()[..m].fill(CONF_BIAS_INIT);
        }
        Ok(RapNet {
            config,
            store,
            stem,
            down,
            attention,
            lateral,
            heads,
            actionness,
        })
    }

    /// Rebuilds a model from saved parameters; names and shapes must match
    /// the configuration exactly.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::build(config)?;
        if params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            let slot = &mut model.store.get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters as `(name, value)` pairs in creation order.
    pub fn named_params(&self) -> Vec<(&str, &Tensor)> {
        self.store.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    fn conv(&self, tape: &mut Tape, x: Var, conv: Conv, stride: usize, padding: usize) -> Result<Var> {
        let w = tape.param(&self.store, conv.weight)?;
        let b = tape.param(&self.store, conv.bias)?;
        Ok(tape.conv1d(x, w, b, stride, padding)?)
    }

    /// Records a forward pass over channels-first features `[D×T]`.
    pub fn forward_on(&self, tape: &mut Tape, features: &Tensor) -> Result<ForwardVars> {
        let expected = [self.config.input_d, self.config.input_t];
        if features.shape() != expected {
            return Err(Error::contract(
                "forward",
                format!("features have shape {:?}, expected {:?}", features.shape(), expected),
            ));
        }
        let x = tape.input(features.clone())?;

        let mut trunk = Vec::with_capacity(self.config.levels);
        let stem = self.conv(tape, x, self.stem, 1, 1)?;
        trunk.push(tape.relu(stem)?);
        for &down in &self.down {
            let prev = *trunk.last().expect("stem pushed");
            let y = self.conv(tape, prev, down, 2, 1)?;
            trunk.push(tape.relu(y)?);
        }

        for (level, attn) in trunk.iter_mut().zip(&self.attention) {
            let Some(a) = attn else { continue };
            let weights = AttentionWeights {
                query: tape.param(&self.store, a.query)?,
                key: tape.param(&self.store, a.key)?,
                value: tape.param(&self.store, a.value)?,
                output: tape.param(&self.store, a.output)?,
            };
            let rows = tape.transpose(*level)?;
            let out = self_attention(tape, rows, weights)?;
            *level = tape.transpose(out.output)?;
        }

        let n = self.config.levels;
        let mut merged = vec![trunk[n - 1]; n];
        for i in (0..n - 1).rev() {
            let lateral = self.conv(tape, trunk[i], self.lateral[i].expect("lateral below top"), 1, 0)?;
            let up = tape.upsample2(merged[i + 1])?;
            merged[i] = tape.add(lateral, up)?;
        }

        let heads = merged
            .iter()
            .zip(&self.heads)
            .map(|(&f, &h)| self.conv(tape, f, h, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let actionness = self.conv(tape, merged[0], self.actionness, 1, 0)?;
        Ok(ForwardVars { heads, actionness })
    }

    /// Reads head outputs of a recorded forward pass.
    pub fn read_predictions(&self, tape: &Tape, vars: &ForwardVars) -> Result<LevelPredictions> {
        let levels = vars
            .heads
            .iter()
            .map(|&h| LevelHead::from_raw(tape.value(h), self.config.anchors_per_level))
            .collect::<Result<Vec<_>>>()?;
        Ok(LevelPredictions {
            levels,
            actionness_logits: tape.value(vars.actionness).data().to_vec(),
        })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, features: &Tensor) -> Result<LevelPredictions> {
        let mut tape = Tape::new();
        let vars = self.forward_on(&mut tape, features)?;
        self.read_predictions(&tape, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            input_t: 16,
            input_d: 4,
            levels: 3,
            trunk_channels: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_t = ModelConfig {
            input_t: 100,
            ..ModelConfig::default()
        };
        assert!(matches!(bad_t.validate(), Err(Error::Config(_))));
        let bad_attn = ModelConfig {
            attention_levels: Some(vec![7]),
            ..ModelConfig::default()
        };
        assert!(bad_attn.validate().is_err());
    }

    #[test]
    fn default_pyramid_lengths() {
        assert_eq!(ModelConfig::default().level_lengths(), vec![128, 64, 32, 16, 8, 4]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = RapNet::build(small()).unwrap();
        let b = RapNet::build(small()).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn zero_input_zero_heads_gives_bias() {
        let mut model = RapNet::build(small()).unwrap();
        let ids: Vec<ParamId> = model.heads.iter().map(|h| h.weight).collect();
        for id in ids {
            model.params_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let preds = model.predict(&Tensor::zeros(&[4, 16])).unwrap();
        for level in &preds.levels {
            assert!(level.conf_logits.data().iter().all(|&v| v == CONF_BIAS_INIT));
        }
    }

    #[test]
    fn single_level_model() {
        let cfg = ModelConfig {
            levels: 1,
            ..small()
        };
        let preds = RapNet::build(cfg).unwrap().predict(&Tensor::ones(&[4, 16])).unwrap();
        assert_eq!(preds.levels.len(), 1);
        assert_eq!(preds.levels[0].conf_logits.shape(), &[2, 16]);
        assert_eq!(preds.actionness_logits.len(), 16);
    }

    #[test]
    fn rejects_wrong_feature_shape() {
        let model = RapNet::build(small()).unwrap();
        assert!(model.predict(&Tensor::zeros(&[4, 8])).is_err());
    }
}
