use std::cell::RefCell;

use super::{BlockParams, HeadKey, HeadParams, ParameterSet};
use crate::error::{Error, Result};
use crate::numerics::{
    layer_norm, matmul, matmul_nt, matmul_tn, silu, silu_grad, softmax_xent, stats_pool,
    LayerNorm, StatsPool, Tensor,
};

thread_local! {
    static BLOCK_ACCESSES: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

fn touch_block(layer: usize) {
    BLOCK_ACCESSES.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() <= layer {
            c.resize(layer + 1, 0);
        }
        c[layer] += 1;
    });
}

/// Per-layer count of block forward and backward passes on this thread;
/// index `l` is block `l` (index 0 stays zero).
pub fn block_accesses() -> Vec<u64> {
    BLOCK_ACCESSES.with(|c| c.borrow().clone())
}

pub fn reset_block_accesses() {
    BLOCK_ACCESSES.with(|c| c.borrow_mut().clear());
}

/// Number of distinct blocks touched since the last reset.
pub fn blocks_touched() -> usize {
    block_accesses().iter().filter(|&&n| n > 0).count()
}

#[derive(Debug, Clone)]
struct BlockTape {
    ln: LayerNorm,
    pre_act: Tensor,
    act: Tensor,
}

/// Activations retained by a truncated forward pass over a batch.
///
/// Frames of all sequences are stacked row-wise, so every per-frame kernel
/// runs once per batch; pooling works on each sequence's row segment.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Tensor,
    segments: Vec<(usize, usize)>,
    blocks: Vec<BlockTape>,
    pools: Vec<StatsPool>,
    pooled: Tensor,
    exit: usize,
    task: usize,
    visited: Vec<usize>,
}

impl Tape {
    /// Block indices evaluated, in order.
    pub fn visited_blocks(&self) -> &[usize] {
        &self.visited
    }

    /// Pooled features, one row per sequence.
    pub fn pooled(&self) -> &Tensor {
        &self.pooled
    }

    pub fn exit(&self) -> usize {
        self.exit
    }

    pub fn task(&self) -> usize {
        self.task
    }
}

fn block_forward(p: &BlockParams, h: &Tensor) -> Result<(Tensor, BlockTape)> {
    let ln = layer_norm(h, &p.norm_gain, &p.norm_bias)?;
    let mut pre_act = matmul(&ln.output, &p.w1)?;
    pre_act.add_row_vector(&p.b1)?;
    let act = pre_act.map(silu);
    let mut out = matmul(&act, &p.w2)?;
    out.add_row_vector(&p.b2)?;
    out.add_assign(h)?;
    Ok((out, BlockTape { ln, pre_act, act }))
}

/// Accumulates block gradients into `grads`, returns the gradient w.r.t. the block input.
fn block_backward(
    p: &BlockParams,
    tape: &BlockTape,
    grad_out: &Tensor,
    grads: &mut BlockParams,
) -> Result<Tensor> {
    grads.w2.add_assign(&matmul_tn(&tape.act, grad_out)?)?;
    grads.b2.add_assign(&grad_out.sum_rows())?;
    let mut dz = matmul_nt(grad_out, &p.w2)?;
    for (g, &z) in dz.data_mut().iter_mut().zip(tape.pre_act.data()) {
        *g *= silu_grad(z);
    }
    grads.w1.add_assign(&matmul_tn(&tape.ln.output, &dz)?)?;
    grads.b1.add_assign(&dz.sum_rows())?;
    let du = matmul_nt(&dz, &p.w1)?;
    let (mut g_in, g_gain, g_bias) = tape.ln.backward(&du, &p.norm_gain);
    grads.norm_gain.add_assign(&g_gain)?;
    grads.norm_bias.add_assign(&g_bias)?;
    g_in.add_assign(grad_out)?;
    Ok(g_in)
}

/// Stacks sequences into one frame matrix and records each sequence's rows.
fn stack(params: &ParameterSet, sequences: &[&Tensor]) -> Result<(Tensor, Vec<(usize, usize)>)> {
    let f = params.config().input_dim;
    let mut data = Vec::with_capacity(sequences.iter().map(|s| s.len()).sum());
    let mut segments = Vec::with_capacity(sequences.len());
    let mut rows = 0;
    for x in sequences {
        if x.shape().len() != 2 || x.cols() != f {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![f],
            });
        }
        if x.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        segments.push((rows, x.rows()));
        rows += x.rows();
        data.extend_from_slice(x.data());
    }
    Ok((Tensor::new(vec![rows, f], data)?, segments))
}

fn segment(h: &Tensor, (start, len): (usize, usize)) -> Tensor {
    let c = h.cols();
    Tensor::new(vec![len, c], h.data()[start * c..(start + len) * c].to_vec())
        .expect("segment within bounds")
}

fn pool_segments(h: &Tensor, segments: &[(usize, usize)]) -> Result<(Vec<StatsPool>, Tensor)> {
    let width = 2 * h.cols();
    let mut pools = Vec::with_capacity(segments.len());
    let mut pooled = Vec::with_capacity(segments.len() * width);
    for &seg in segments {
        let pool = stats_pool(&segment(h, seg))?;
        pooled.extend_from_slice(pool.pooled.data());
        pools.push(pool);
    }
    Ok((pools, Tensor::new(vec![segments.len(), width], pooled)?))
}

fn head_logits(head: &HeadParams, pooled: &Tensor) -> Result<Tensor> {
    let mut logits = matmul(pooled, &head.w)?;
    logits.add_row_vector(&head.b)?;
    Ok(logits)
}

/// Batched truncated forward: logits `B×C` at exit `exit`.
///
/// Blocks deeper than `exit` are never read.
pub fn forward_batch(
    params: &ParameterSet,
    sequences: &[&Tensor],
    exit: usize,
    task: usize,
) -> Result<(Tensor, Tape)> {
    params.config().check_exit(exit)?;
    let head = params.head(exit, task)?;
    if sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (input, segments) = stack(params, sequences)?;
    let mut h = matmul(&input, &params.embed)?;
    let mut blocks = Vec::with_capacity(exit);
    let mut visited = Vec::with_capacity(exit);
    for (i, block) in params.blocks[..exit].iter().enumerate() {
        let (next, tape) = block_forward(block, &h)?;
        touch_block(i + 1);
        visited.push(i + 1);
        blocks.push(tape);
        h = next;
    }
    let (pools, pooled) = pool_segments(&h, &segments)?;
    let logits = head_logits(head, &pooled)?;
    Ok((
        logits,
        Tape {
            input,
            segments,
            blocks,
            pools,
            pooled,
            exit,
            task,
            visited,
        },
    ))
}

/// Embed one sequence, run blocks `1..=exit`, pool, and apply head `(exit, task)`.
pub fn forward_to_depth(
    params: &ParameterSet,
    x: &Tensor,
    exit: usize,
    task: usize,
) -> Result<(Tensor, Tape)> {
    let (logits, tape) = forward_batch(params, &[x], exit, task)?;
    Ok((Tensor::vector(logits.into_data()), tape))
}

/// Logits (`B×C`) at every exit from one pass through the deepest exit.
pub fn forward_all_exits(
    params: &ParameterSet,
    sequences: &[&Tensor],
    task: usize,
) -> Result<Vec<(usize, Tensor)>> {
    if sequences.is_empty() {
        return Err(Error::EmptySequence);
    }
    let (input, segments) = stack(params, sequences)?;
    let exits = params.config().exits.clone();
    let mut h = matmul(&input, &params.embed)?;
    let mut out = Vec::with_capacity(exits.len());
    let mut depth = 0;
    for exit in exits.iter() {
        while depth < exit {
            h = block_forward(&params.blocks[depth], &h)?.0;
            depth += 1;
            touch_block(depth);
        }
        let (_, pooled) = pool_segments(&h, &segments)?;
        out.push((exit, head_logits(params.head(exit, task)?, &pooled)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Layer(usize),
    Head(HeadKey),
}

/// Gradients for layers `0..=depth` and the single head at `depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

impl Gradients {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        (0..=self.depth())
            .map(ParamKey::Layer)
            .chain(std::iter::once(ParamKey::Head(self.head.key())))
            .collect()
    }

    pub fn layer_tensors(&self, layer: usize) -> Vec<&Tensor> {
        if layer == 0 {
            vec![&self.embed]
        } else {
            self.blocks[layer - 1].tensors().to_vec()
        }
    }

    fn zeros_like(params: &ParameterSet, exit: usize, task: usize) -> Result<Self> {
        let cfg = params.config();
        let head = params.head(exit, task)?;
        Ok(Self {
            embed: Tensor::zeros(params.embed.shape()),
            blocks: (0..exit)
                .map(|_| BlockParams::zeros(cfg.width, cfg.hidden))
                .collect(),
            head: HeadParams {
                exit,
                task,
                w: Tensor::zeros(head.w.shape()),
                b: Tensor::zeros(head.b.shape()),
            },
        })
    }
}

fn backward(params: &ParameterSet, tape: &Tape, grad_logits: &Tensor) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params, tape.exit, tape.task)?;
    let head = params.head(tape.exit, tape.task)?;
    grads.head.w = matmul_tn(&tape.pooled, grad_logits)?;
    grads.head.b = grad_logits.sum_rows();
    let grad_pooled = matmul_nt(grad_logits, &head.w)?;
    let width = params.config().width;
    let mut g = Tensor::zeros(&[tape.input.rows(), width]);
    for (b, (pool, &(start, len))) in tape.pools.iter().zip(&tape.segments).enumerate() {
        let gs = pool.backward(grad_pooled.row(b));
        g.data_mut()[start * width..(start + len) * width].copy_from_slice(gs.data());
    }
    for (idx, block_tape) in tape.blocks.iter().enumerate().rev() {
        g = block_backward(&params.blocks[idx], block_tape, &g, &mut grads.blocks[idx])?;
        touch_block(idx + 1);
    }
    grads.embed = matmul_tn(&tape.input, &g)?;
    Ok(grads)
}

/// Mean cross-entropy at exit `exit` and its gradients.
///
/// The returned [`Gradients`] covers exactly layers `0..=exit` and head
/// `(exit, task)`; nothing deeper is represented.
pub fn loss_and_grads_to_depth(
    params: &ParameterSet,
    sequences: &[&Tensor],
    labels: &[usize],
    exit: usize,
    task: usize,
) -> Result<(f64, Gradients)> {
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_and_grads_to_depth",
            left: vec![sequences.len()],
            right: vec![labels.len()],
        });
    }
    let (logits, tape) = forward_batch(params, sequences, exit, task)?;
    let (loss, grad_logits) = softmax_xent(&logits, labels)?;
    let grads = backward(params, &tape, &grad_logits)?;
    Ok((loss, grads))
}

/// `p ← p − lr·g` for every entry present in `grads`; everything else is copied unchanged.
pub fn sgd_step(params: &ParameterSet, grads: &Gradients, lr: f64) -> Result<ParameterSet> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    if grads.depth() > params.depth() {
        return Err(Error::LayerShape {
            layer: grads.depth().to_string(),
            detail: format!("gradient deeper than model depth {}", params.depth()),
        });
    }
    let mut next = params.clone();
    apply(&mut next.embed, &grads.embed, lr, "0")?;
    for (i, g) in grads.blocks.iter().enumerate() {
        let layer = (i + 1).to_string();
        for (p, g) in next.blocks[i].tensors_mut().into_iter().zip(g.tensors()) {
            apply(p, g, lr, &layer)?;
        }
    }
    let key = grads.head.key();
    let head = next.heads.get_mut(&key).ok_or(Error::MissingHead {
        exit: key.exit,
        task: key.task,
    })?;
    let name = format!("head({}, {})", key.exit, key.task);
    apply(&mut head.w, &grads.head.w, lr, &name)?;
    apply(&mut head.b, &grads.head.b, lr, &name)?;
    Ok(next)
}

fn apply(p: &mut Tensor, g: &Tensor, lr: f64, layer: &str) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::LayerShape {
            layer: layer.to_string(),
            detail: format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
        });
    }
    if lr == 0.0 {
        return Ok(());
    }
    p.axpy(-lr, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ExitSet, ModelConfig};
    use crate::numerics::{
        finite_diff_grad, gaussian_fill, mac_count, max_relative_error, reset_mac_count, Prng,
    };

    fn config(width: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            width,
            hidden,
            depth: 12,
            exits: ExitSet::default(),
            task_classes: vec![3],
        }
    }

    fn seq(prng: &mut Prng, t: usize, f: usize) -> Tensor {
        gaussian_fill(prng, &[t, f])
    }

    #[test]
    fn training_step_touches_each_block_twice() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        reset_block_accesses();
        loss_and_grads_to_depth(&params, &[&x], &[1], 6, 0).unwrap();
        assert_eq!(block_accesses(), vec![0, 2, 2, 2, 2, 2, 2]);
        assert_eq!(blocks_touched(), 6);
    }

    #[test]
    fn truncated_forward_visits_only_prefix() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        for exit in [3, 6, 9, 12] {
            let (_, tape) = forward_to_depth(&params, &x, exit, 0).unwrap();
            assert_eq!(tape.visited_blocks(), (1..=exit).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn forward_rejects_non_exit_depth() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        assert!(matches!(
            forward_to_depth(&params, &x, 4, 0),
            Err(Error::InvalidExit { exit: 4, .. })
        ));
        assert!(matches!(
            forward_to_depth(&params, &x, 3, 1),
            Err(Error::MissingHead { exit: 3, task: 1 })
        ));
    }

    #[test]
    fn forward_is_pure_and_exits_differ() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (a, _) = forward_to_depth(&params, &x, 6, 0).unwrap();
        let (b, _) = forward_to_depth(&params, &x, 6, 0).unwrap();
        assert!(a.bitwise_eq(&b));
        let (c, _) = forward_to_depth(&params, &x, 12, 0).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-6);
    }

    #[test]
    fn all_exits_matches_individual_passes() {
        let params = init_model(&config(4, 8), &mut Prng::new(4)).unwrap();
        let x = seq(&mut Prng::new(5), 7, 3);
        let y = seq(&mut Prng::new(6), 4, 3);
        for (exit, logits) in forward_all_exits(&params, &[&x, &y], 0).unwrap() {
            let (single, _) = forward_to_depth(&params, &x, exit, 0).unwrap();
            assert_eq!(logits.shape(), &[2, 3]);
            assert!(single.max_abs_diff(&Tensor::vector(logits.row(0).to_vec())) < 1e-12);
        }
    }

    #[test]
    fn mutating_one_head_leaves_other_exits() {
        let mut params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (before, _) = forward_to_depth(&params, &x, 9, 0).unwrap();
        let head = params.heads.get_mut(&HeadKey { exit: 3, task: 0 }).unwrap();
        head.w.scale(-3.0);
        head.b.data_mut()[0] = 10.0;
        let (after, _) = forward_to_depth(&params, &x, 9, 0).unwrap();
        assert!(before.bitwise_eq(&after));
    }

    #[test]
    fn gradient_keys_stop_at_exit() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (_, g) = loss_and_grads_to_depth(&params, &[&x], &[1], 3, 0).unwrap();
        assert_eq!(
            g.keys(),
            vec![
                ParamKey::Layer(0),
                ParamKey::Layer(1),
                ParamKey::Layer(2),
                ParamKey::Layer(3),
                ParamKey::Head(HeadKey { exit: 3, task: 0 }),
            ]
        );
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_grads() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let mut prng = Prng::new(2);
        let a = seq(&mut prng, 5, 3);
        let b = seq(&mut prng, 5, 3);
        let (l1, g1) = loss_and_grads_to_depth(&params, &[&a, &b], &[0, 2], 6, 0).unwrap();
        let (l2, g2) =
            loss_and_grads_to_depth(&params, &[&a, &a, &b, &b], &[0, 0, 2, 2], 6, 0).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        assert!(g1.embed.max_abs_diff(&g2.embed) < 1e-14);
        for (x, y) in g1.blocks.iter().zip(&g2.blocks) {
            for (p, q) in x.tensors().iter().zip(y.tensors()) {
                assert!(p.max_abs_diff(q) < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = config(4, 8);
        for seed in 0..3 {
            let params = init_model(&cfg, &mut Prng::new(seed)).unwrap();
            let mut prng = Prng::new(1000 + seed);
            let xs = [seq(&mut prng, 4, 3), seq(&mut prng, 4, 3)];
            let refs: Vec<&Tensor> = xs.iter().collect();
            let labels = [0, 2];
            let exit = 3;
            let (_, grads) = loss_and_grads_to_depth(&params, &refs, &labels, exit, 0).unwrap();
            let loss_of = |p: &ParameterSet| {
                loss_and_grads_to_depth(p, &refs, &labels, exit, 0).unwrap().0
            };
            let fd = finite_diff_grad(
                |e| {
                    let mut p = params.clone();
                    p.embed = e.clone();
                    loss_of(&p)
                },
                &params.embed,
                1e-5,
            );
            assert!(max_relative_error(&grads.embed, &fd) < 1e-4);
            let fd_w1 = finite_diff_grad(
                |w| {
                    let mut p = params.clone();
                    p.blocks[1].w1 = w.clone();
                    loss_of(&p)
                },
                &params.blocks[1].w1,
                1e-5,
            );
            assert!(max_relative_error(&grads.blocks[1].w1, &fd_w1) < 1e-4);
        }
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (_, g) = loss_and_grads_to_depth(&params, &[&x], &[1], 6, 0).unwrap();
        let next = sgd_step(&params, &g, 0.0).unwrap();
        assert!(next.bitwise_eq(&params));
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let cfg = ModelConfig {
            input_dim: 1,
            width: 1,
            hidden: 1,
            depth: 3,
            exits: ExitSet::new(vec![3]).unwrap(),
            task_classes: vec![2],
        };
        let mut params = ParameterSet::zeros(&cfg).unwrap();
        params.embed.data_mut()[0] = 1.0;
        let mut g = Gradients::zeros_like(&params, 3, 0).unwrap();
        g.embed.data_mut()[0] = 0.5;
        let next = sgd_step(&params, &g, 0.1).unwrap();
        assert_eq!(next.embed.data()[0], 0.95);
    }

    #[test]
    fn sgd_leaves_deeper_layers_untouched() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (_, g) = loss_and_grads_to_depth(&params, &[&x], &[1], 3, 0).unwrap();
        let next = sgd_step(&params, &g, 0.5).unwrap();
        for l in 4..=12 {
            assert_eq!(next.layer_values(l), params.layer_values(l));
        }
        assert_ne!(next.layer_values(3), params.layer_values(3));
        for key in [6, 9, 12] {
            let k = HeadKey { exit: key, task: 0 };
            assert_eq!(next.head_values(k).unwrap(), params.head_values(k).unwrap());
        }
    }

    #[test]
    fn sgd_shape_mismatch_names_layer() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 5, 3);
        let (_, mut g) = loss_and_grads_to_depth(&params, &[&x], &[1], 3, 0).unwrap();
        g.blocks[1].w1 = Tensor::zeros(&[2, 2]);
        let err = sgd_step(&params, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::LayerShape { ref layer, .. } if layer == "2"));
    }

    #[test]
    fn forward_cost_grows_with_depth() {
        let params = init_model(&config(4, 8), &mut Prng::new(0)).unwrap();
        let x = seq(&mut Prng::new(1), 10, 3);
        let mut last = 0;
        for exit in [3, 6, 9, 12] {
            reset_mac_count();
            forward_to_depth(&params, &x, exit, 0).unwrap();
            let macs = mac_count();
            assert!(macs > last);
            last = macs;
        }
    }
}
