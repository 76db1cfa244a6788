//! wasm-bindgen bindings behind `www/index.html`.
//!
//! Every export takes plain numbers or a JSON string and returns JSON, so the
//! page needs no glue beyond `JSON.parse`.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use fedexit::client::{select_depth, ClientProfile, LayerUpdate, MemoryModel};
use fedexit::datagen::task_preset;
use fedexit::model::{ExitSet, HeadKey, ModelConfig, ParameterSet};
use fedexit::server::{aggregate, AggregationStrategy};
use fedexit::sim::{parse_scenario, preset, run_scenario};

fn to_js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct MemoryCurve {
    depths: Vec<usize>,
    megabytes: Vec<f64>,
    exits: Vec<usize>,
    selected_exit: Option<usize>,
    reduction_pct: f64,
}

fn memory_curve_impl(task: &str, budget_mb: f64) -> fedexit::Result<MemoryCurve> {
    let memory = MemoryModel::preset(task)
        .ok_or_else(|| fedexit::Error::Config(format!("unknown memory preset `{task}`")))?;
    let spec = task_preset(&format!("{task}-like"))
        .ok_or_else(|| fedexit::Error::Config(format!("unknown task `{task}`")))?;
    let exits = ExitSet::default();
    let profile = ClientProfile {
        id: 0,
        samples: 1,
        memory_budget_mb: budget_mb,
        device_speed: 1.0,
        task: 0,
    };
    let depths: Vec<usize> = (1..=12).collect();
    Ok(MemoryCurve {
        megabytes: depths.iter().map(|&d| memory.estimate(d)).collect(),
        depths,
        exits: exits.as_slice().to_vec(),
        selected_exit: select_depth(&profile, &spec, &exits, &memory).ok(),
        reduction_pct: memory.reduction(12, 3) * 100.0,
    })
}

/// Memory estimate for depths 1..=12 and the exit a client with `budget_mb`
/// would train to. `task` is one of `kws`, `er`, `asr`, `sid`.
#[wasm_bindgen]
pub fn memory_curve(task: &str, budget_mb: f64) -> Result<String, JsError> {
    let curve = memory_curve_impl(task, budget_mb).map_err(to_js)?;
    serde_json::to_string(&curve).map_err(to_js)
}

#[derive(Deserialize)]
struct CalcClient {
    samples: usize,
    depth: usize,
    value: f64,
}

#[derive(Serialize, Debug, PartialEq)]
struct CalcLayer {
    layer: usize,
    contributors: usize,
    layerwise: f64,
    fedavg: f64,
}

/// Every parameter of a client's model is set to `value`, so each layer's
/// aggregate is a single weighted mean that can be read back directly.
fn aggregation_table_impl(clients: &[CalcClient], old: f64) -> fedexit::Result<Vec<CalcLayer>> {
    let config = ModelConfig {
        input_dim: 1,
        width: 1,
        hidden: 1,
        depth: 12,
        exits: ExitSet::default(),
        task_classes: vec![2],
    };
    let mut global = ParameterSet::zeros(&config)?;
    for l in 0..=config.depth {
        let n = global.layer_values(l).len();
        global.set_layer_values(l, &vec![old; n])?;
    }
    let updates: Vec<LayerUpdate> = clients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            config.check_exit(c.depth)?;
            let head = HeadKey { exit: c.depth, task: 0 };
            let head_len = global.head_values(head)?.len();
            Ok(LayerUpdate {
                client: i as u32,
                round: 0,
                samples: c.samples,
                depth: c.depth,
                layers: (0..=c.depth)
                    .map(|l| vec![c.value; global.layer_values(l).len()])
                    .collect(),
                head,
                head_values: vec![c.value; head_len],
                samples_processed: c.samples as u64,
                final_loss: 0.0,
            })
        })
        .collect::<fedexit::Result<_>>()?;
    let (lw, contributors) = aggregate(AggregationStrategy::LayerwiseDepthWeighted, &global, &updates)?;
    let (fa, _) = aggregate(AggregationStrategy::FedavgFull, &global, &updates)?;
    let counts = contributors.counts();
    Ok((0..=config.depth)
        .map(|l| CalcLayer {
            layer: l,
            contributors: counts[l],
            layerwise: lw.layer_values(l)[0],
            fedavg: fa.layer_values(l)[0],
        })
        .collect())
}

/// Per-layer aggregate of scalar client models under both strategies.
///
/// `clients_json` is `[{"samples": 100, "depth": 3, "value": 1.0}, ...]`;
/// depths must be exits. Layers nobody trains keep `old`.
#[wasm_bindgen]
pub fn aggregation_table(clients_json: &str, old: f64) -> Result<String, JsError> {
    let clients: Vec<CalcClient> = serde_json::from_str(clients_json).map_err(to_js)?;
    let table = aggregation_table_impl(&clients, old).map_err(to_js)?;
    serde_json::to_string(&table).map_err(to_js)
}

#[derive(Serialize)]
struct RunSummary {
    rounds: Vec<usize>,
    /// accuracy[k][r]: exit `exits[k]` after round `r`.
    accuracy: Vec<Vec<f64>>,
    exits: Vec<usize>,
    wall_time_s: Vec<f64>,
    full_depth_wall_time_s: Vec<f64>,
    bytes: Vec<usize>,
}

fn run_preset_impl(name: &str, rounds: usize, seed: u64) -> fedexit::Result<RunSummary> {
    let text = preset(name).ok_or_else(|| fedexit::Error::Config(format!("unknown preset `{name}`")))?;
    let mut scenario = parse_scenario(text)?;
    scenario.rounds = rounds;
    scenario.seeds.training = seed;
    scenario.seeds.sampling = seed + 1;
    for g in &mut scenario.clients {
        g.samples = g.samples.min(200);
    }
    scenario.eval_samples = 300;
    scenario.epochs = 1;
    let out = run_scenario(&scenario)?;
    let exits = scenario.model.exits.as_slice().to_vec();
    Ok(RunSummary {
        rounds: out.reports.iter().map(|r| r.round).collect(),
        accuracy: exits
            .iter()
            .map(|&e| out.reports.iter().map(|r| r.exit(e).map_or(0.0, |m| m.accuracy)).collect())
            .collect(),
        exits,
        wall_time_s: out.reports.iter().map(|r| r.wall_time_s).collect(),
        full_depth_wall_time_s: out.reports.iter().map(|r| r.full_depth_wall_time_s).collect(),
        bytes: out.reports.iter().map(|r| r.bytes).collect(),
    })
}

/// Runs a shrunken copy of a built-in preset (at most 200 samples per client,
/// one local epoch).
#[wasm_bindgen]
pub fn run_preset(name: &str, rounds: usize, seed: u32) -> Result<String, JsError> {
    let summary = run_preset_impl(name, rounds, u64::from(seed)).map_err(to_js)?;
    serde_json::to_string(&summary).map_err(to_js)
}
