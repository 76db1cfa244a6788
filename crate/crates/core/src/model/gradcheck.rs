//! Finite-difference audit of every trainable tensor at every exit.

use crate::error::Result;
use crate::numerics::{finite_diff_grad_extrapolated, gaussian_fill, max_relative_error, Prng, Tensor};

use super::{init_model, loss_and_grads_to_depth, BlockParams, Gradients, ModelConfig, ParameterSet};

/// One checked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub seed: u64,
    pub exit: usize,
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Embed,
    Block(usize, usize),
    HeadW,
    HeadB,
}

impl Slot {
    fn name(self, exit: usize) -> String {
        match self {
            Slot::Embed => "embed".into(),
            Slot::Block(i, j) => format!("block{}.{}", i + 1, BlockParams::TENSOR_NAMES[j]),
            Slot::HeadW => format!("head{exit}.w"),
            Slot::HeadB => format!("head{exit}.b"),
        }
    }

    fn in_params(self, p: &mut ParameterSet, exit: usize, task: usize) -> &mut Tensor {
        match self {
            Slot::Embed => &mut p.embed,
            Slot::Block(i, j) => p.blocks[i].tensors_mut().into_iter().nth(j).unwrap(),
            Slot::HeadW => &mut p.heads.get_mut(&super::HeadKey { exit, task }).unwrap().w,
            Slot::HeadB => &mut p.heads.get_mut(&super::HeadKey { exit, task }).unwrap().b,
        }
    }

    fn in_grads(self, g: &Gradients) -> &Tensor {
        match self {
            Slot::Embed => &g.embed,
            Slot::Block(i, j) => g.blocks[i].tensors()[j],
            Slot::HeadW => &g.head.w,
            Slot::HeadB => &g.head.b,
        }
    }
}

/// Default problem for the suite: small enough to check every entry.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        width: 4,
        hidden: 6,
        depth: 12,
        exits: Default::default(),
        task_classes: vec![3],
    }
}

/// Compares analytic gradients to extrapolated central differences for every tensor
/// reachable from every exit, for each seed.
pub fn gradient_suite(config: &ModelConfig, seeds: &[u64], eps: f64) -> Result<Vec<TensorCheck>> {
    let mut out = Vec::new();
    let classes = config.task_classes[0];
    for &seed in seeds {
        let params = init_model(config, &mut Prng::keyed(seed, 0, 0))?;
        let mut prng = Prng::keyed(seed, 1, 0);
        let xs: Vec<Tensor> = [5, 3, 4]
            .iter()
            .map(|&t| gaussian_fill(&mut prng, &[t, config.input_dim]))
            .collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let labels: Vec<usize> = (0..xs.len()).map(|i| i % classes).collect();
        for exit in config.exits.iter() {
            let (_, grads) = loss_and_grads_to_depth(&params, &refs, &labels, exit, 0)?;
            let slots = std::iter::once(Slot::Embed)
                .chain((0..exit).flat_map(|i| (0..6).map(move |j| Slot::Block(i, j))))
                .chain([Slot::HeadW, Slot::HeadB]);
            for slot in slots {
                let mut probe = params.clone();
                let base = slot.in_params(&mut probe, exit, 0).clone();
                let numeric = finite_diff_grad_extrapolated(
                    |t| {
                        let mut p = probe.clone();
                        *slot.in_params(&mut p, exit, 0) = t.clone();
                        loss_and_grads_to_depth(&p, &refs, &labels, exit, 0)
                            .map(|r| r.0)
                            .unwrap_or(f64::NAN)
                    },
                    &base,
                    eps,
                );
                out.push(TensorCheck {
                    seed,
                    exit,
                    name: slot.name(exit),
                    max_rel_error: max_relative_error(slot.in_grads(&grads), &numeric),
                });
            }
        }
    }
    Ok(out)
}
