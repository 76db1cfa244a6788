//! Multi-exit residual backbone.
//!
//! Layer 0 is the linear input projection, layers `1..=depth` are pre-norm
//! residual MLP blocks, and a classification head sits at every exit layer
//! for every task. Heads consume the statistics-pooled activations of their
//! exit layer.

mod codec;
mod forward;
mod gradcheck;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_fill, Prng, Tensor};

pub use codec::{decode_params, encode_params, encoded_len, header_len};
pub use gradcheck::{gradcheck_config, gradient_suite, TensorCheck};
pub use forward::{
    block_accesses, blocks_touched, reset_block_accesses,
    forward_all_exits, forward_batch, forward_to_depth, loss_and_grads_to_depth, sgd_step, Gradients, ParamKey,
    Tape,
};

/// Exit layers, strictly increasing and 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ExitSet(Vec<usize>);

impl ExitSet {
    pub fn new(exits: Vec<usize>) -> Result<Self> {
        if exits.is_empty() {
            return Err(Error::Config("exit set must not be empty".into()));
        }
        if exits[0] == 0 {
            return Err(Error::Config("exit layers are 1-based".into()));
        }
        if exits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "exit set {exits:?} must be strictly increasing"
            )));
        }
        Ok(Self(exits))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    pub fn min(&self) -> usize {
        self.0[0]
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl Default for ExitSet {
    fn default() -> Self {
        Self(vec![3, 6, 9, 12])
    }
}

impl TryFrom<Vec<usize>> for ExitSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ExitSet> for Vec<usize> {
    fn from(e: ExitSet) -> Self {
        e.0
    }
}

/// Backbone shape. The block activation is SiLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub hidden: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub exits: ExitSet,
    /// Class count per task id.
    pub task_classes: Vec<usize>,
}

fn default_depth() -> usize {
    12
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::Config("input_dim, width and hidden must be >= 1".into()));
        }
        if self.depth < self.exits.max() {
            return Err(Error::Config(format!(
                "depth {} is shallower than exit {}",
                self.depth,
                self.exits.max()
            )));
        }
        if self.task_classes.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if let Some(c) = self.task_classes.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!("task class count {c} < 2")));
        }
        Ok(())
    }

    pub fn check_exit(&self, exit: usize) -> Result<()> {
        if self.exits.contains(exit) {
            Ok(())
        } else {
            Err(Error::InvalidExit {
                exit,
                exits: self.exits.as_slice().to_vec(),
            })
        }
    }

    /// Values stored for one residual block.
    pub fn block_len(&self) -> usize {
        let (d, h) = (self.width, self.hidden);
        2 * d + d * h + h + h * d + d
    }

    pub fn head_len(&self, task: usize) -> usize {
        let c = self.task_classes[task];
        2 * self.width * c + c
    }

    /// Values stored for backbone layer `layer` (0 is the input projection).
    pub fn layer_len(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim * self.width
        } else {
            self.block_len()
        }
    }

    pub fn parameter_count(&self) -> usize {
        let backbone: usize = (0..=self.depth).map(|l| self.layer_len(l)).sum();
        let heads: usize = (0..self.task_classes.len()).map(|t| self.head_len(t)).sum();
        backbone + heads * self.exits.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl BlockParams {
    pub fn zeros(width: usize, hidden: usize) -> Self {
        Self {
            norm_gain: Tensor::zeros(&[width]),
            norm_bias: Tensor::zeros(&[width]),
            w1: Tensor::zeros(&[width, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, width]),
            b2: Tensor::zeros(&[width]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.norm_gain,
            &self.norm_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 6] = ["norm_gain", "norm_bias", "w1", "b1", "w2", "b2"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadKey {
    pub exit: usize,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub exit: usize,
    pub task: usize,
    pub w: Tensor,
    pub b: Tensor,
}

impl HeadParams {
    pub fn key(&self) -> HeadKey {
        HeadKey {
            exit: self.exit,
            task: self.task,
        }
    }
}

/// Complete model state: the unit exchanged and averaged in federation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub heads: BTreeMap<HeadKey, HeadParams>,
}

/// Weights ~ N(0, 1/fan_in), biases zero, norm gains one.
pub fn init_model(config: &ModelConfig, prng: &mut Prng) -> Result<ParameterSet> {
    config.validate()?;
    let (f, d, h) = (config.input_dim, config.width, config.hidden);
    let scaled = |prng: &mut Prng, shape: &[usize], fan_in: usize| {
        let mut t = gaussian_fill(prng, shape);
        t.scale(1.0 / (fan_in as f64).sqrt());
        t
    };
    let embed = scaled(prng, &[f, d], f);
    let blocks = (0..config.depth)
        .map(|_| BlockParams {
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            w1: scaled(prng, &[d, h], d),
            b1: Tensor::zeros(&[h]),
            w2: scaled(prng, &[h, d], h),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    let mut heads = BTreeMap::new();
    for exit in config.exits.iter() {
        for (task, &classes) in config.task_classes.iter().enumerate() {
            let head = HeadParams {
                exit,
                task,
                w: scaled(prng, &[2 * d, classes], 2 * d),
                b: Tensor::zeros(&[classes]),
            };
            heads.insert(head.key(), head);
        }
    }
    Ok(ParameterSet {
        config: config.clone(),
        embed,
        blocks,
        heads,
    })
}

impl ParameterSet {
    /// All-zero parameters with the given layout.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.width, config.hidden);
        let mut heads = BTreeMap::new();
        for exit in config.exits.iter() {
            for (task, &classes) in config.task_classes.iter().enumerate() {
                heads.insert(
                    HeadKey { exit, task },
                    HeadParams {
                        exit,
                        task,
                        w: Tensor::zeros(&[2 * d, classes]),
                        b: Tensor::zeros(&[classes]),
                    },
                );
            }
        }
        Ok(Self {
            config: config.clone(),
            embed: Tensor::zeros(&[config.input_dim, d]),
            blocks: (0..config.depth).map(|_| BlockParams::zeros(d, h)).collect(),
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head(&self, exit: usize, task: usize) -> Result<&HeadParams> {
        self.heads
            .get(&HeadKey { exit, task })
            .ok_or(Error::MissingHead { exit, task })
    }

    /// Tensors of backbone layer `layer` in canonical order.
    pub fn layer_tensors(&self, layer: usize) -> Vec<&Tensor> {
        if layer == 0 {
            vec![&self.embed]
        } else {
            self.blocks[layer - 1].tensors().to_vec()
        }
    }

    fn layer_tensors_mut(&mut self, layer: usize) -> Vec<&mut Tensor> {
        if layer == 0 {
            vec![&mut self.embed]
        } else {
            self.blocks[layer - 1].tensors_mut().into_iter().collect()
        }
    }

    /// Flattened values of backbone layer `layer`.
    pub fn layer_values(&self, layer: usize) -> Vec<f64> {
        self.layer_tensors(layer)
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_layer_values(&mut self, layer: usize, values: &[f64]) -> Result<()> {
        if layer > self.depth() {
            return Err(Error::LayerShape {
                layer: layer.to_string(),
                detail: format!("model has layers 0..={}", self.depth()),
            });
        }
        let expected = self.config.layer_len(layer);
        if values.len() != expected {
            return Err(Error::LayerShape {
                layer: layer.to_string(),
                detail: format!("expected {expected} values, got {}", values.len()),
            });
        }
        fill_tensors(self.layer_tensors_mut(layer), values);
        Ok(())
    }

    pub fn head_values(&self, key: HeadKey) -> Result<Vec<f64>> {
        let head = self.head(key.exit, key.task)?;
        Ok(head.w.data().iter().chain(head.b.data()).copied().collect())
    }

    pub fn set_head_values(&mut self, key: HeadKey, values: &[f64]) -> Result<()> {
        let head = self.heads.get_mut(&key).ok_or(Error::MissingHead {
            exit: key.exit,
            task: key.task,
        })?;
        let expected = head.w.len() + head.b.len();
        if values.len() != expected {
            return Err(Error::LayerShape {
                layer: format!("head({}, {})", key.exit, key.task),
                detail: format!("expected {expected} values, got {}", values.len()),
            });
        }
        fill_tensors(vec![&mut head.w, &mut head.b], values);
        Ok(())
    }

    /// Every tensor in canonical order: embed, blocks ascending, heads by (exit, task).
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for block in &self.blocks {
            out.extend(block.tensors());
        }
        for head in self.heads.values() {
            out.push(&head.w);
            out.push(&head.b);
        }
        out
    }

    pub(crate) fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        for head in self.heads.values_mut() {
            out.push(&mut head.w);
            out.push(&mut head.b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.all_tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.config == other.config
            && self.heads.keys().eq(other.heads.keys())
            && self
                .all_tensors()
                .iter()
                .zip(other.all_tensors())
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

fn fill_tensors(tensors: Vec<&mut Tensor>, values: &[f64]) {
    let mut offset = 0;
    for t in tensors {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
}
