//! Scenario runner: federation generation, the round loop, cost accounting
//! and metrics output.

mod metrics;
mod presets;
mod scenario;

use serde::{Deserialize, Serialize};

use crate::client::{local_train, simulate_local_time, ClientProfile, CostModel, LayerUpdate};
use crate::datagen::{held_out, make_speakers, make_teacher_task, partition, Sample, Shard};
use crate::error::{Error, Result};
use crate::model::{forward_all_exits, init_model, loss_and_grads_to_depth, sgd_step, ParameterSet};
use crate::numerics::{softmax_xent, Prng, Tensor};
use crate::server::{aggregate, sample_clients};

pub use metrics::{emit_metrics, render_csv, render_jsonl, MetricsFormat};
pub use presets::{preset, PRESETS};
pub use scenario::{
    parse_config, parse_scenario, ClientGroup, FederationScenario, MemoryRef, ModelSection, Mode,
    Seeds, TaskRef,
};

/// Sequences per evaluation batch.
const EVAL_CHUNK: usize = 250;
/// Client id reserved for streams that belong to no client.
const SERVER_STREAM: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitMetrics {
    pub exit: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: u32,
    /// `None` when no exit fit the client's budget.
    pub depth: Option<usize>,
    pub local_time_s: f64,
    pub bytes: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub exits: Vec<ExitMetrics>,
    /// Slowest participating client.
    pub wall_time_s: f64,
    /// Slowest sampled client if every one trained the full backbone.
    pub full_depth_wall_time_s: f64,
    pub round_bytes: usize,
    /// Uploaded bytes up to and including this round.
    pub bytes: usize,
    /// `|𝒮_l|` for layers `1..=depth`.
    pub contributors: Vec<usize>,
    pub clients: Vec<ClientRound>,
    pub skipped: bool,
}

impl RoundReport {
    pub fn exit(&self, exit: usize) -> Option<&ExitMetrics> {
        self.exits.iter().find(|m| m.exit == exit)
    }
}

/// Upload sizes of a round's updates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Communication {
    pub total: usize,
    pub per_client: Vec<(u32, usize)>,
}

pub fn account_communication(updates: &[LayerUpdate]) -> Communication {
    let per_client: Vec<(u32, usize)> = updates.iter().map(|u| (u.client, u.encoded_len())).collect();
    Communication {
        total: per_client.iter().map(|c| c.1).sum(),
        per_client,
    }
}

/// Generated data of one scenario.
#[derive(Debug, Clone)]
pub struct Federation {
    pub shards: Vec<Shard>,
    pub held_out: Vec<Sample>,
}

pub fn build_federation(s: &FederationScenario) -> Result<Federation> {
    let spec = s.task_spec();
    let mut prng = Prng::new(s.seeds.data);
    let teacher = make_teacher_task(spec, &mut prng)?;
    let speakers = make_speakers(s.speaker_count(), spec.input_dim, s.speaker_bias, &mut prng);
    let sizes: Vec<usize> = s.profiles().iter().map(|p| p.samples).collect();
    let shards = partition(&teacher, &speakers, s.partition, &sizes, &mut prng)?;
    let held_out = held_out(&teacher, &speakers, s.eval_samples, &mut prng)?;
    Ok(Federation { shards, held_out })
}

/// Mean loss and accuracy of `params` at every exit on `data`.
pub fn evaluate(params: &ParameterSet, data: &[Sample], task: usize) -> Result<Vec<ExitMetrics>> {
    let chunks: Vec<&[Sample]> = data.chunks(EVAL_CHUNK).collect();
    let per_chunk = map_ordered(&chunks, |chunk| {
        let xs: Vec<&Tensor> = chunk.iter().map(|s| &s.frames).collect();
        let ys: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        forward_all_exits(params, &xs, task)?
            .into_iter()
            .map(|(exit, logits)| {
                let (loss, _) = softmax_xent(&logits, &ys)?;
                let correct = (0..logits.rows())
                    .filter(|&i| crate::datagen::argmax(logits.row(i)) == ys[i])
                    .count();
                Ok((exit, loss * ys.len() as f64, correct))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = data.len() as f64;
    let exits = params.config().exits.len();
    Ok((0..exits)
        .map(|k| {
            let exit = per_chunk[0][k].0;
            let loss: f64 = per_chunk.iter().map(|c| c[k].1).sum();
            let correct: usize = per_chunk.iter().map(|c| c[k].2).sum();
            ExitMetrics {
                exit,
                loss: loss / n,
                accuracy: correct as f64 / n,
            }
        })
        .collect())
}

/// Applies `f` to every item, in parallel when enabled, keeping input order.
fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Mutable state carried between rounds.
#[derive(Debug, Clone)]
pub struct SimState {
    pub global: ParameterSet,
    pub bytes: usize,
    sampling: Prng,
    pooled_order: Vec<usize>,
    pooled_cursor: usize,
    pooled_prng: Prng,
}

/// A scenario with its generated data, ready to run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scenario: FederationScenario,
    pub federation: Federation,
    profiles: Vec<ClientProfile>,
    cost: CostModel,
    pooled: Vec<Sample>,
}

impl Simulation {
    pub fn new(scenario: FederationScenario) -> Result<Self> {
        scenario.validate()?;
        let federation = build_federation(&scenario)?;
        let profiles = scenario.profiles();
        let cost = CostModel::new(&scenario.model_config(), 0, scenario.task_spec().seq_len);
        let pooled = if scenario.mode == Mode::Centralized {
            federation.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            scenario,
            federation,
            profiles,
            cost,
            pooled,
        })
    }

    pub fn initial_state(&self) -> Result<SimState> {
        let s = &self.scenario;
        let global = init_model(&s.model_config(), &mut Prng::keyed(s.seeds.training, SERVER_STREAM, 0))?;
        Ok(SimState {
            global,
            bytes: 0,
            sampling: Prng::new(s.seeds.sampling),
            pooled_order: (0..self.pooled.len()).collect(),
            pooled_cursor: self.pooled.len(),
            pooled_prng: Prng::keyed(s.seeds.training, SERVER_STREAM, 1),
        })
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn run_round(&self, state: &mut SimState, round: usize) -> Result<RoundReport> {
        if round >= self.scenario.rounds {
            return Err(Error::Config(format!(
                "round {round} is outside the budget of {} rounds",
                self.scenario.rounds
            )));
        }
        match self.scenario.mode {
            Mode::Centralized => self.centralized_round(state, round),
            Mode::HomoFl | Mode::HeteroFl => self.federated_round(state, round),
        }
    }

    fn federated_round(&self, state: &mut SimState, round: usize) -> Result<RoundReport> {
        let s = &self.scenario;
        let sampled = sample_clients(&self.profiles, s.fraction, &mut state.sampling)?;
        let spec = s.task_spec();
        let memory = s.memory();
        let opts = s.local_training();
        let global = &state.global;
        let results = map_ordered(&sampled, |p| -> Result<(ClientRound, Option<LayerUpdate>)> {
            let depth = match crate::client::select_depth(p, spec, &s.model.exits, &memory) {
                Ok(d) => d,
                Err(Error::Infeasible { .. }) => {
                    return Ok((
                        ClientRound {
                            client: p.id,
                            depth: None,
                            local_time_s: 0.0,
                            bytes: 0,
                            final_loss: None,
                        },
                        None,
                    ))
                }
                Err(e) => return Err(e),
            };
            let mut prng = Prng::keyed(s.seeds.training, p.id, round as u32);
            let shard = &self.federation.shards[p.id as usize];
            let update = local_train(global, shard, p.task, depth, round as u32, &opts, &mut prng)?;
            Ok((
                ClientRound {
                    client: p.id,
                    depth: Some(depth),
                    local_time_s: simulate_local_time(p, &self.cost, depth, s.epochs),
                    bytes: update.encoded_len(),
                    final_loss: Some(update.final_loss),
                },
                Some(update),
            ))
        })?;
        let full_depth = s.model.exits.max();
        let full_depth_wall_time_s = sampled
            .iter()
            .map(|p| simulate_local_time(p, &self.cost, full_depth, s.epochs))
            .fold(0.0, f64::max);
        let (clients, updates): (Vec<ClientRound>, Vec<Option<LayerUpdate>>) = results.into_iter().unzip();
        let updates: Vec<LayerUpdate> = updates.into_iter().flatten().collect();
        let depth = s.model.depth;
        if updates.is_empty() {
            return Ok(RoundReport {
                round,
                exits: evaluate(&state.global, &self.federation.held_out, 0)?,
                wall_time_s: 0.0,
                full_depth_wall_time_s,
                round_bytes: 0,
                bytes: state.bytes,
                contributors: vec![0; depth],
                clients,
                skipped: true,
            });
        }
        let comm = account_communication(&updates);
        let (next, contributors) = aggregate(s.strategy, &state.global, &updates)?;
        state.global = next;
        state.bytes += comm.total;
        Ok(RoundReport {
            round,
            exits: evaluate(&state.global, &self.federation.held_out, 0)?,
            wall_time_s: clients.iter().map(|c| c.local_time_s).fold(0.0, f64::max),
            full_depth_wall_time_s,
            round_bytes: comm.total,
            bytes: state.bytes,
            contributors: contributors.counts()[1..].to_vec(),
            clients,
            skipped: false,
        })
    }

    /// Samples one federated round would process, `⌈f·K⌉` average shards.
    fn pooled_batch_budget(&self) -> usize {
        let k = self.profiles.len();
        let sampled = ((self.scenario.fraction * k as f64).ceil() as usize).min(k);
        (sampled * self.pooled.len()).div_ceil(k)
    }

    /// Plain SGD on the pooled shards at the task's preferred exit, with the
    /// sample budget of one federated round per epoch.
    fn centralized_round(&self, state: &mut SimState, round: usize) -> Result<RoundReport> {
        let s = &self.scenario;
        let depth = s.task_spec().preferred_exit;
        let budget = self.pooled_batch_budget();
        for _ in 0..s.epochs {
            let mut picked = Vec::with_capacity(budget);
            while picked.len() < budget {
                if state.pooled_cursor == state.pooled_order.len() {
                    state.pooled_prng.shuffle(&mut state.pooled_order);
                    state.pooled_cursor = 0;
                }
                picked.push(state.pooled_order[state.pooled_cursor]);
                state.pooled_cursor += 1;
            }
            for chunk in picked.chunks(s.batch_size) {
                let xs: Vec<&Tensor> = chunk.iter().map(|&i| &self.pooled[i].frames).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| self.pooled[i].label).collect();
                let (_, grads) = loss_and_grads_to_depth(&state.global, &xs, &ys, depth, 0)?;
                state.global = sgd_step(&state.global, &grads, s.lr)?;
            }
        }
        let fastest = self
            .profiles
            .iter()
            .max_by(|a, b| a.device_speed.total_cmp(&b.device_speed))
            .expect("validated scenario has clients");
        let pooled_profile = ClientProfile {
            samples: budget,
            ..fastest.clone()
        };
        Ok(RoundReport {
            round,
            exits: evaluate(&state.global, &self.federation.held_out, 0)?,
            wall_time_s: simulate_local_time(&pooled_profile, &self.cost, depth, s.epochs),
            full_depth_wall_time_s: simulate_local_time(
                &pooled_profile,
                &self.cost,
                s.model.exits.max(),
                s.epochs,
            ),
            round_bytes: 0,
            bytes: 0,
            contributors: vec![0; s.model.depth],
            clients: Vec::new(),
            skipped: false,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<RoundReport>,
    pub final_model: ParameterSet,
    pub warnings: Vec<String>,
}

impl RunOutput {
    /// Accuracy at `exit` after the last round.
    pub fn final_accuracy(&self, exit: usize) -> Option<f64> {
        self.reports.last()?.exit(exit).map(|m| m.accuracy)
    }
}

pub fn run_scenario(scenario: &FederationScenario) -> Result<RunOutput> {
    let sim = Simulation::new(scenario.clone())?;
    let mut state = sim.initial_state()?;
    let mut reports = Vec::with_capacity(scenario.rounds);
    let mut warnings = Vec::new();
    for t in 0..scenario.rounds {
        let report = sim.run_round(&mut state, t)?;
        if report.skipped {
            warnings.push(format!("round {t}: every sampled client was infeasible, round skipped"));
        }
        reports.push(report);
    }
    Ok(RunOutput {
        reports,
        final_model: state.global,
        warnings,
    })
}
