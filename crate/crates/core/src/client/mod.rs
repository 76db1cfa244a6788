//! One federated client: depth selection, truncated local training and
//! update packaging.

mod memory;
mod update;

use serde::{Deserialize, Serialize};

use crate::datagen::{Shard, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads_to_depth, sgd_step, HeadKey, ModelConfig, ParameterSet};
use crate::numerics::{Prng, Tensor};

pub use memory::{MemoryModel, MEMORY_TABLE, MEMORY_TABLE_DEPTHS};
pub use update::{decode_update, encode_update, read_update, write_update, LayerUpdate, HEAD_RECORD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: u32,
    /// Local data size nᵢ.
    pub samples: usize,
    pub memory_budget_mb: f64,
    /// Multiply-accumulates per simulated second.
    pub device_speed: f64,
    #[serde(default)]
    pub task: usize,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config(format!("client {}: samples must be >= 1", self.id)));
        }
        if !(self.memory_budget_mb > 0.0) || !(self.device_speed > 0.0) {
            return Err(Error::Config(format!(
                "client {}: memory_budget_mb and device_speed must be > 0",
                self.id
            )));
        }
        Ok(())
    }
}

/// Deepest exit that fits the memory budget and does not pass the task's
/// preferred exit.
pub fn select_depth(
    profile: &ClientProfile,
    task: &TaskSpec,
    exits: &crate::model::ExitSet,
    memory: &MemoryModel,
) -> Result<usize> {
    exits
        .iter()
        .filter(|&e| e <= task.preferred_exit && memory.estimate(e) <= profile.memory_budget_mb)
        .max()
        .ok_or(Error::Infeasible {
            client: profile.id,
            budget_mb: profile.memory_budget_mb,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.05,
            batch_size: 8,
        }
    }
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.epochs) {
            return Err(Error::Config(format!(
                "local epochs must be within 1..=3, got {}",
                self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Trains layers `0..=depth` and head `(depth, task)` on `shard`, returning
/// their new values. Deeper layers are neither read for training nor sent.
///
/// Each epoch reshuffles the shard with `prng` and runs `⌈n / batch⌉` SGD
/// steps; the last batch may be short.
pub fn local_train(
    global: &ParameterSet,
    shard: &Shard,
    task: usize,
    depth: usize,
    round: u32,
    opts: &LocalTraining,
    prng: &mut Prng,
) -> Result<LayerUpdate> {
    opts.validate()?;
    global.config().check_exit(depth)?;
    if shard.is_empty() {
        return Err(Error::Config(format!("client {} has an empty shard", shard.client_id)));
    }
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut processed = 0u64;
    let mut final_loss = 0.0;
    for _ in 0..opts.epochs {
        prng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &shard.samples[i].frames).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| shard.samples[i].label).collect();
            let (loss, grads) = loss_and_grads_to_depth(&params, &xs, &ys, depth, task)?;
            params = sgd_step(&params, &grads, opts.lr)?;
            epoch_loss += loss * chunk.len() as f64;
            processed += chunk.len() as u64;
        }
        final_loss = epoch_loss / shard.len() as f64;
    }
    let head = HeadKey { exit: depth, task };
    Ok(LayerUpdate {
        client: shard.client_id,
        round,
        samples: shard.len(),
        depth,
        layers: (0..=depth).map(|l| params.layer_values(l)).collect(),
        head,
        head_values: params.head_values(head)?,
        samples_processed: processed,
        final_loss,
    })
}

/// Analytic multiply-accumulate counts of the backbone kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub seq_len: usize,
    pub input_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl CostModel {
    pub fn new(config: &ModelConfig, task: usize, seq_len: usize) -> Self {
        Self {
            seq_len,
            input_dim: config.input_dim,
            width: config.width,
            hidden: config.hidden,
            classes: config.task_classes[task],
        }
    }

    /// `T·F·D + d·2·T·D·H + 2D·C` for one sequence.
    pub fn forward_macs(&self, depth: usize) -> u64 {
        let (t, f, d, h, c) = self.dims();
        t * f * d + depth as u64 * 2 * t * d * h + 2 * d * c
    }

    /// Forward plus backward for one sequence: `2·T·F·D + d·6·T·D·H + 6D·C`.
    pub fn train_macs(&self, depth: usize) -> u64 {
        let (t, f, d, h, c) = self.dims();
        2 * t * f * d + depth as u64 * 6 * t * d * h + 6 * d * c
    }

    fn dims(&self) -> (u64, u64, u64, u64, u64) {
        (
            self.seq_len as u64,
            self.input_dim as u64,
            self.width as u64,
            self.hidden as u64,
            self.classes as u64,
        )
    }
}

/// Simulated seconds for `epochs` passes over the client's data at `depth`.
pub fn simulate_local_time(
    profile: &ClientProfile,
    cost: &CostModel,
    depth: usize,
    epochs: usize,
) -> f64 {
    cost.train_macs(depth) as f64 * profile.samples as f64 * epochs as f64 / profile.device_speed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{task_preset, Sample};
    use crate::model::{forward_to_depth, init_model, ExitSet};
    use crate::numerics::{gaussian_fill, mac_count, reset_mac_count};

    fn profile(budget: f64) -> ClientProfile {
        ClientProfile {
            id: 4,
            samples: 50,
            memory_budget_mb: budget,
            device_speed: 1e6,
            task: 0,
        }
    }

    fn config(depth: usize, exits: Vec<usize>) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            width: 4,
            hidden: 8,
            depth,
            exits: ExitSet::new(exits).unwrap(),
            task_classes: vec![3],
        }
    }

    fn shard(n: usize, seed: u64) -> Shard {
        let mut prng = Prng::new(seed);
        let samples = (0..n)
            .map(|i| Sample {
                frames: gaussian_fill(&mut prng, &[5, 3]),
                label: i % 3,
                speaker: 0,
            })
            .collect();
        Shard {
            client_id: 2,
            samples,
            speakers: vec![0],
        }
    }

    #[test]
    fn task_cap_binds() {
        let kws = MemoryModel::preset("kws").unwrap();
        let mut task = task_preset("asr-like").unwrap();
        task.preferred_exit = 9;
        let d = select_depth(&profile(kws.estimate(12)), &task, &ExitSet::default(), &kws);
        assert_eq!(d.unwrap(), 9);
    }

    #[test]
    fn resource_cap_binds() {
        let kws = MemoryModel::preset("kws").unwrap();
        let mut task = task_preset("asr-like").unwrap();
        task.preferred_exit = 12;
        let budget = kws.estimate(3) + 1e-6;
        let d = select_depth(&profile(budget), &task, &ExitSet::default(), &kws);
        assert_eq!(d.unwrap(), 3);
    }

    #[test]
    fn below_smallest_exit_is_infeasible() {
        let kws = MemoryModel::preset("kws").unwrap();
        let task = task_preset("kws-like").unwrap();
        let err = select_depth(&profile(kws.estimate(3) - 0.5), &task, &ExitSet::default(), &kws)
            .unwrap_err();
        assert!(matches!(err, Error::Infeasible { client: 4, .. }));
    }

    #[test]
    fn zero_lr_sends_global_values() {
        let cfg = config(4, vec![2, 4]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        let opts = LocalTraining {
            epochs: 2,
            lr: 0.0,
            batch_size: 3,
        };
        let u = local_train(&global, &shard(10, 2), 0, 2, 0, &opts, &mut Prng::new(3)).unwrap();
        for l in 0..=2 {
            let bits: Vec<u64> = u.layers[l].iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = global.layer_values(l).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
        assert_eq!(u.samples_processed, 20);
    }

    #[test]
    fn update_carries_exactly_trained_layers() {
        let cfg = config(4, vec![2, 4]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        let u = local_train(
            &global,
            &shard(10, 2),
            0,
            2,
            5,
            &LocalTraining::default(),
            &mut Prng::new(3),
        )
        .unwrap();
        assert_eq!(u.layers.len(), 3);
        assert_eq!(u.head, HeadKey { exit: 2, task: 0 });
        assert_eq!(u.round, 5);
        assert_eq!(u.samples, 10);
    }

    #[test]
    fn single_step_matches_hand_sgd() {
        // F = D = H = 1, depth 1, one sample, two classes.
        let cfg = ModelConfig {
            input_dim: 1,
            width: 1,
            hidden: 1,
            depth: 1,
            exits: ExitSet::new(vec![1]).unwrap(),
            task_classes: vec![2],
        };
        let global = init_model(&cfg, &mut Prng::new(9)).unwrap();
        let frames = Tensor::new(vec![2, 1], vec![0.3, -0.8]).unwrap();
        let s = Shard {
            client_id: 0,
            samples: vec![Sample {
                frames: frames.clone(),
                label: 1,
                speaker: 0,
            }],
            speakers: vec![0],
        };
        let opts = LocalTraining {
            epochs: 1,
            lr: 0.1,
            batch_size: 8,
        };
        let u = local_train(&global, &s, 0, 1, 0, &opts, &mut Prng::new(0)).unwrap();
        let (_, grads) = loss_and_grads_to_depth(&global, &[&frames], &[1], 1, 0).unwrap();
        let want = global.embed.data()[0] - 0.1 * grads.embed.data()[0];
        assert_eq!(u.layers[0], vec![want]);
        let head = global.head_values(u.head).unwrap();
        let g_head: Vec<f64> = grads.head.w.data().iter().chain(grads.head.b.data()).copied().collect();
        for ((got, p), g) in u.head_values.iter().zip(head).zip(g_head) {
            assert_eq!(*got, p - 0.1 * g);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = config(4, vec![2, 4]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        let run = || {
            local_train(
                &global,
                &shard(13, 2),
                0,
                4,
                1,
                &LocalTraining::default(),
                &mut Prng::keyed(11, 2, 1),
            )
            .unwrap()
        };
        assert_eq!(encode_update(&run()).unwrap(), encode_update(&run()).unwrap());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let cfg = config(4, vec![2, 4]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        for opts in [
            LocalTraining { epochs: 0, ..Default::default() },
            LocalTraining { epochs: 4, ..Default::default() },
            LocalTraining { batch_size: 0, ..Default::default() },
        ] {
            let err = local_train(&global, &shard(4, 1), 0, 2, 0, &opts, &mut Prng::new(0));
            assert!(matches!(err, Err(Error::Config(_))));
        }
    }

    #[test]
    fn forward_macs_match_counter() {
        let cfg = ModelConfig {
            input_dim: 5,
            width: 4,
            hidden: 8,
            depth: 3,
            exits: ExitSet::new(vec![3]).unwrap(),
            task_classes: vec![2],
        };
        let p = init_model(&cfg, &mut Prng::new(4)).unwrap();
        let x = gaussian_fill(&mut Prng::new(5), &[10, 5]);
        let cost = CostModel::new(&cfg, 0, 10);
        reset_mac_count();
        forward_to_depth(&p, &x, 3, 0).unwrap();
        // 10·5·4 + 3·2·10·4·8 + 2·4·2
        assert_eq!(mac_count(), 200 + 1920 + 16);
        assert_eq!(cost.forward_macs(3), mac_count());
        reset_mac_count();
        loss_and_grads_to_depth(&p, &[&x, &x], &[0, 1], 3, 0).unwrap();
        assert_eq!(mac_count(), 2 * cost.train_macs(3));
    }

    #[test]
    fn time_scales_with_speed_and_depth() {
        let cfg = config(12, vec![3, 6, 9, 12]);
        let cost = CostModel::new(&cfg, 0, 8);
        let slow = profile(1000.0);
        let fast = ClientProfile {
            device_speed: 2.0 * slow.device_speed,
            ..slow.clone()
        };
        let t = simulate_local_time(&slow, &cost, 6, 2);
        assert_eq!(simulate_local_time(&fast, &cost, 6, 2), t / 2.0);
        assert!(simulate_local_time(&slow, &cost, 3, 2) < simulate_local_time(&slow, &cost, 12, 2));
    }
}
