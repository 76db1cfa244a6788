//! Server side of a round: client sampling and aggregation.
//!
//! Each backbone layer `l` is averaged over the clients that trained it,
//! `𝒮_l = {i : Lᵢ ≥ l}`. The layer-wise strategy weights client `i` by
//! `nᵢ·Lᵢ`, FedAvg by `nᵢ`. A layer nobody trained keeps its global value.
//! Heads are averaged by `nᵢ` over clients that trained that exit and task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ClientProfile, LayerUpdate};
use crate::error::{Error, Result};
use crate::model::{HeadKey, HeadParams, ParameterSet};
use crate::numerics::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[serde(alias = "layerwise")]
    LayerwiseDepthWeighted,
    #[serde(alias = "fedavg")]
    FedavgFull,
}

impl AggregationStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::LayerwiseDepthWeighted => "layerwise_depth_weighted",
            Self::FedavgFull => "fedavg_full",
        }
    }

    fn weight(self, u: &LayerUpdate) -> f64 {
        match self {
            Self::LayerwiseDepthWeighted => u.samples as f64 * u.depth as f64,
            Self::FedavgFull => u.samples as f64,
        }
    }
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layerwise" | "layerwise_depth_weighted" => Ok(Self::LayerwiseDepthWeighted),
            "fedavg" | "fedavg_full" => Ok(Self::FedavgFull),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected layerwise or fedavg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contributor {
    pub client: u32,
    pub samples: usize,
    pub depth: usize,
}

/// Contributors per backbone layer, in ascending client id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContributorSet {
    layers: Vec<Vec<Contributor>>,
}

impl ContributorSet {
    /// `updates` must be sorted by client id.
    fn from_sorted(updates: &[&LayerUpdate], depth: usize) -> Self {
        let layers = (0..=depth)
            .map(|l| {
                updates
                    .iter()
                    .filter(|u| u.covers(l))
                    .map(|u| Contributor {
                        client: u.client,
                        samples: u.samples,
                        depth: u.depth,
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    pub fn new(updates: &[LayerUpdate], depth: usize) -> Result<Self> {
        Ok(Self::from_sorted(&canonical(updates)?, depth))
    }

    pub fn layer(&self, l: usize) -> &[Contributor] {
        self.layers.get(l).map_or(&[], Vec::as_slice)
    }

    /// `|𝒮_l|` for layers `0..=depth`.
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn is_pyramid(&self) -> bool {
        self.counts().windows(2).all(|w| w[0] >= w[1])
    }
}

/// `⌈fraction·K⌉` distinct clients, uniformly without replacement, sorted by id.
pub fn sample_clients(
    all: &[ClientProfile],
    fraction: f64,
    prng: &mut Prng,
) -> Result<Vec<ClientProfile>> {
    if all.is_empty() {
        return Err(Error::Config("cannot sample from an empty client pool".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) || fraction * (all.len() as f64) < 1.0 {
        return Err(Error::Config(format!(
            "sampling fraction {fraction} of {} clients selects nobody",
            all.len()
        )));
    }
    let k = ((fraction * all.len() as f64).ceil() as usize).min(all.len());
    let mut idx: Vec<usize> = (0..all.len()).collect();
    for i in 0..k {
        let j = i + prng.below(idx.len() - i);
        idx.swap(i, j);
    }
    let mut picked: Vec<ClientProfile> = idx[..k].iter().map(|&i| all[i].clone()).collect();
    picked.sort_by_key(|c| c.id);
    Ok(picked)
}

/// Updates sorted by client id; duplicates are a protocol error.
fn canonical(updates: &[LayerUpdate]) -> Result<Vec<&LayerUpdate>> {
    let mut sorted: Vec<&LayerUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client);
    if let Some(w) = sorted.windows(2).find(|w| w[0].client == w[1].client) {
        return Err(Error::Protocol(format!(
            "duplicate update from client {}",
            w[0].client
        )));
    }
    Ok(sorted)
}

fn check_shapes(global: &ParameterSet, updates: &[&LayerUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Protocol("no updates to aggregate".into()));
    }
    let config = global.config();
    for u in updates {
        if !config.exits.contains(u.depth) {
            return Err(Error::Protocol(format!(
                "client {}: trained depth {} is not an exit of {:?}",
                u.client,
                u.depth,
                config.exits.as_slice()
            )));
        }
        if u.layers.len() != u.depth + 1 {
            return Err(Error::Protocol(format!(
                "client {}: depth {} with {} layer payloads",
                u.client,
                u.depth,
                u.layers.len()
            )));
        }
        for (l, values) in u.layers.iter().enumerate() {
            let expected = config.layer_len(l);
            if values.len() != expected {
                return Err(Error::Aggregation {
                    layer: l,
                    client: u.client,
                    detail: format!("expected {expected} values, got {}", values.len()),
                });
            }
        }
        let head = global.head(u.head.exit, u.head.task).map_err(|_| Error::Protocol(format!(
            "client {}: no head ({}, {}) in the global model",
            u.client, u.head.exit, u.head.task
        )))?;
        let expected = head.w.len() + head.b.len();
        if u.head.exit != u.depth || u.head_values.len() != expected {
            return Err(Error::Aggregation {
                layer: u.head.exit,
                client: u.client,
                detail: format!(
                    "head ({}, {}) expected {expected} values, got {}",
                    u.head.exit,
                    u.head.task,
                    u.head_values.len()
                ),
            });
        }
    }
    Ok(())
}

/// `Σ wᵢ·xᵢ / Σ wᵢ` per entry, in the given order. Entries on which every
/// contributor agrees bitwise are copied; others are clamped to the
/// contributors' range to absorb rounding.
fn weighted_mean(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let len = parts[0].1.len();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let first = parts[0].1[k];
        if parts.iter().all(|p| p.1[k].to_bits() == first.to_bits()) {
            out.push(first);
            continue;
        }
        let mut acc = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(w, x) in parts {
            acc += w * x[k];
            lo = lo.min(x[k]);
            hi = hi.max(x[k]);
        }
        out.push((acc / total).clamp(lo, hi));
    }
    out
}

fn aggregate_backbone(
    strategy: AggregationStrategy,
    global: &ParameterSet,
    updates: &[LayerUpdate],
) -> Result<ParameterSet> {
    let sorted = canonical(updates)?;
    check_shapes(global, &sorted)?;
    let mut out = global.clone();
    for l in 0..=global.depth() {
        let parts: Vec<(f64, &[f64])> = sorted
            .iter()
            .filter(|u| u.covers(l))
            .map(|u| (strategy.weight(u), u.layers[l].as_slice()))
            .collect();
        if parts.is_empty() {
            continue;
        }
        out.set_layer_values(l, &weighted_mean(&parts))?;
    }
    Ok(out)
}

/// Depth-weighted partial aggregation of layers; heads are left untouched.
pub fn aggregate_layerwise(global: &ParameterSet, updates: &[LayerUpdate]) -> Result<ParameterSet> {
    aggregate_backbone(AggregationStrategy::LayerwiseDepthWeighted, global, updates)
}

/// Sample-weighted averaging of layers over their contributors; heads are left untouched.
pub fn aggregate_fedavg(global: &ParameterSet, updates: &[LayerUpdate]) -> Result<ParameterSet> {
    aggregate_backbone(AggregationStrategy::FedavgFull, global, updates)
}

/// New value of every head: `nᵢ`-weighted mean over the clients that
/// trained it, or the global head if nobody did.
pub fn aggregate_heads(
    global: &ParameterSet,
    updates: &[LayerUpdate],
) -> Result<BTreeMap<HeadKey, HeadParams>> {
    let sorted = canonical(updates)?;
    check_shapes(global, &sorted)?;
    let mut scratch = global.clone();
    for &key in global.heads.keys() {
        let parts: Vec<(f64, &[f64])> = sorted
            .iter()
            .filter(|u| u.head == key)
            .map(|u| (u.samples as f64, u.head_values.as_slice()))
            .collect();
        if !parts.is_empty() {
            scratch.set_head_values(key, &weighted_mean(&parts))?;
        }
    }
    Ok(scratch.heads)
}

/// Backbone by `strategy`, heads by the sample-weighted policy.
pub fn aggregate(
    strategy: AggregationStrategy,
    global: &ParameterSet,
    updates: &[LayerUpdate],
) -> Result<(ParameterSet, ContributorSet)> {
    let mut next = aggregate_backbone(strategy, global, updates)?;
    next.heads = aggregate_heads(global, updates)?;
    let contributors = ContributorSet::from_sorted(&canonical(updates)?, global.depth());
    Ok((next, contributors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ExitSet, ModelConfig};

    fn scalar_config(depth: usize, exits: Vec<usize>) -> ModelConfig {
        // input_dim·width = 1 makes layer 0 a single scalar.
        ModelConfig {
            input_dim: 1,
            width: 1,
            hidden: 1,
            depth,
            exits: ExitSet::new(exits).unwrap(),
            task_classes: vec![2],
        }
    }

    fn update_from(p: &ParameterSet, client: u32, samples: usize, depth: usize) -> LayerUpdate {
        let head = HeadKey { exit: depth, task: 0 };
        LayerUpdate {
            client,
            round: 0,
            samples,
            depth,
            layers: (0..=depth).map(|l| p.layer_values(l)).collect(),
            head,
            head_values: p.head_values(head).unwrap(),
            samples_processed: samples as u64,
            final_loss: 0.0,
        }
    }

    fn filled(config: &ModelConfig, v: f64) -> ParameterSet {
        let mut p = ParameterSet::zeros(config).unwrap();
        for l in 0..=config.depth {
            p.set_layer_values(l, &vec![v; config.layer_len(l)]).unwrap();
        }
        for key in p.heads.keys().copied().collect::<Vec<_>>() {
            let n = p.head_values(key).unwrap().len();
            p.set_head_values(key, &vec![v; n]).unwrap();
        }
        p
    }

    fn two_clients() -> (ParameterSet, Vec<LayerUpdate>) {
        let cfg = scalar_config(12, vec![3, 6, 9, 12]);
        let global = filled(&cfg, -5.0);
        let a = update_from(&filled(&cfg, 1.0), 0, 100, 3);
        let b = update_from(&filled(&cfg, 2.0), 1, 300, 12);
        (global, vec![a, b])
    }

    #[test]
    fn worked_two_client_case() {
        let (global, updates) = two_clients();
        let out = aggregate_layerwise(&global, &updates).unwrap();
        let w1 = out.layer_values(1)[0];
        assert!((w1 - 7500.0 / 3900.0).abs() < 1e-12);
        assert!((w1 - 1.923077).abs() < 1e-6);
        assert_eq!(out.layer_values(9), vec![2.0; 6]);
    }

    #[test]
    fn fedavg_hand_case() {
        let cfg = scalar_config(3, vec![3]);
        let global = filled(&cfg, 9.0);
        let updates = vec![
            update_from(&filled(&cfg, 0.0), 0, 1, 3),
            update_from(&filled(&cfg, 4.0), 1, 3, 3),
        ];
        let out = aggregate_fedavg(&global, &updates).unwrap();
        assert_eq!(out.layer_values(0), vec![3.0]);
    }

    #[test]
    fn singleton_copies_and_leaves_the_rest() {
        let cfg = scalar_config(12, vec![3, 6, 9, 12]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        let local = init_model(&cfg, &mut Prng::new(2)).unwrap();
        let out = aggregate_layerwise(&global, &[update_from(&local, 3, 17, 6)]).unwrap();
        for l in 0..=12 {
            let src = if l <= 6 { &local } else { &global };
            let got: Vec<u64> = out.layer_values(l).iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = src.layer_values(l).iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want, "layer {l}");
        }
    }

    #[test]
    fn identical_payloads_are_idempotent() {
        let cfg = scalar_config(6, vec![3, 6]);
        let global = init_model(&cfg, &mut Prng::new(1)).unwrap();
        let local = init_model(&cfg, &mut Prng::new(2)).unwrap();
        let updates: Vec<LayerUpdate> = (0..3).map(|c| update_from(&local, c, 10 + c as usize, 6)).collect();
        let out = aggregate_fedavg(&global, &updates).unwrap();
        assert!(out.blocks == local.blocks && out.embed.bitwise_eq(&local.embed));
    }

    #[test]
    fn heads_follow_exit_policy() {
        let (global, updates) = two_clients();
        let heads = aggregate_heads(&global, &updates).unwrap();
        let h3 = &heads[&HeadKey { exit: 3, task: 0 }];
        assert!(h3.w.data().iter().all(|&v| v == 1.0));
        let h6 = &heads[&HeadKey { exit: 6, task: 0 }];
        assert!(h6.w.bitwise_eq(&global.heads[&HeadKey { exit: 6, task: 0 }].w));
        assert!(heads[&HeadKey { exit: 12, task: 0 }].b.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn equal_weight_heads_average() {
        let cfg = scalar_config(3, vec![3]);
        let global = filled(&cfg, 0.0);
        let updates = vec![
            update_from(&filled(&cfg, 1.0), 0, 1, 3),
            update_from(&filled(&cfg, 2.0), 1, 1, 3),
        ];
        let heads = aggregate_heads(&global, &updates).unwrap();
        assert!(heads[&HeadKey { exit: 3, task: 0 }].w.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn duplicate_client_is_protocol_error() {
        let (global, mut updates) = two_clients();
        updates[1].client = 0;
        let err = aggregate_layerwise(&global, &updates).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn shape_error_names_layer_and_client() {
        let (global, mut updates) = two_clients();
        updates[1].layers[4].push(0.0);
        let msg = aggregate_fedavg(&global, &updates).unwrap_err().to_string();
        assert!(msg.contains("layer 4") && msg.contains("client 1"), "{msg}");
    }

    #[test]
    fn contributor_pyramid() {
        let (_, updates) = two_clients();
        let set = ContributorSet::new(&updates, 12).unwrap();
        let counts = set.counts();
        assert_eq!(&counts[..4], &[2, 2, 2, 2]);
        assert_eq!(&counts[4..], &[1; 9]);
        assert!(set.is_pyramid());
    }

    #[test]
    fn sampling_contracts() {
        let pool: Vec<ClientProfile> = (0..4)
            .map(|id| ClientProfile {
                id,
                samples: 10,
                memory_budget_mb: 1.0,
                device_speed: 1.0,
                task: 0,
            })
            .collect();
        let all = sample_clients(&pool, 1.0, &mut Prng::new(0)).unwrap();
        assert_eq!(all.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let half = sample_clients(&pool, 0.5, &mut Prng::new(5)).unwrap();
        assert_eq!(half.len(), 2);
        assert!(half[0].id < half[1].id);
        assert_eq!(half, sample_clients(&pool, 0.5, &mut Prng::new(5)).unwrap());
        assert!(sample_clients(&[], 1.0, &mut Prng::new(0)).is_err());
        assert!(sample_clients(&pool, 0.2, &mut Prng::new(0)).is_err());
    }
}
