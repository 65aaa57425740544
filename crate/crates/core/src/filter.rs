//! Differentiable histogram filter over grid states: belief prediction via
//! local 3×3×4 transition kernels (map-independent or map-conditioned),
//! Bayes correction with analytic or learned observation likelihoods, and the
//! belief interfaces used by the different compositions.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::env::{observe, GridMap, State, N_ACTIONS};
use crate::error::{DanError, Result};
use crate::nn::{dense, init_conv, init_dense, NodeMap, ParamMap};
use crate::tape::{KernelKind, KernelTable, NodeId, Tape, KERNEL_ENTRIES};
use crate::tensor::Tensor;

/// Likelihood floor: learned likelihoods live in (EPS, 1], the analytic model
/// uses EPS for non-matching states.
pub const LIKELIHOOD_EPS: f64 = 1e-4;

/// Smallest belief mass `correct` accepts before declaring the belief
/// degenerate (model and observation irreconcilable).
pub const DEGENERATE_MASS: f64 = 1e-300;

// ── Map image ───────────────────────────────────────────────────────────────

/// 3-channel image of the planner/filter map: walls (plus any known
/// furniture), goal one-hot, and a constant bias plane distinguishing the
/// grid interior from zero padding. Shape (1, 3, N, N).
pub fn map_image(map: &GridMap) -> Tensor {
    let n = map.n;
    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            if map.blocked(x as i64, y as i64, true) {
                data[y * n + x] = 1.0;
            }
            data[2 * n * n + y * n + x] = 1.0;
        }
    }
    data[n * n + map.goal.1 * n + map.goal.0] = 1.0;
    Tensor::new(vec![1, 3, n, n], data)
}

/// Routing table for belief/value kernels on this map (walls + any furniture
/// recorded in the map's furniture layer, i.e. the planner's working map).
pub fn kernel_table(map: &GridMap) -> Arc<KernelTable> {
    let m = map.clone();
    Arc::new(KernelTable::build(map.n, move |x, y| m.blocked(x as i64, y as i64, true)))
}

/// (1, C, N, N) → (N, N, 4) channel-minor reordering for orientation maps.
fn chw_to_hwc(tape: &mut Tape, x: NodeId, n: usize) -> Result<NodeId> {
    let idx: Vec<u32> = (0..n * n * 4)
        .map(|i| {
            let th = i % 4;
            let cell = i / 4;
            (th * n * n + cell) as u32
        })
        .collect();
    tape.gather(x, Arc::new(idx), vec![n, n, 4])
}

/// Broadcast a (1, C) row to (1, C, N, N).
fn tile_row(tape: &mut Tape, x: NodeId, c: usize, n: usize) -> Result<NodeId> {
    let idx: Vec<u32> = (0..c * n * n).map(|i| (i / (n * n)) as u32).collect();
    tape.gather(x, Arc::new(idx), vec![1, c, n, n])
}

// ── Transition models ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionParam {
    Homogeneous,
    Heterogeneous,
}

/// Width of the heterogeneous transition model's hidden conv layer.
pub const TRANS_HIDDEN: usize = 32;

/// Homogeneous transition logits: one 3×3×4 kernel per action, shape (|A|, 36).
pub fn init_transition_hom(params: &mut ParamMap, rng: &mut ChaCha8Rng) {
    params.insert(
        "trans.hom".to_string(),
        crate::nn::glorot_uniform(rng, vec![N_ACTIONS, KERNEL_ENTRIES], KERNEL_ENTRIES, KERNEL_ENTRIES),
    );
}

/// Heterogeneous transition model: map image → per-state kernel logits via a
/// 3×3 conv (hidden filters) and a 1×1 conv to 4·|A|·36 channels.
pub fn init_transition_het(params: &mut ParamMap, hidden: usize, rng: &mut ChaCha8Rng) {
    init_conv(params, "trans.conv1", 3, hidden, 3, rng);
    init_conv(params, "trans.conv2", hidden, 4 * N_ACTIONS * KERNEL_ENTRIES, 1, rng);
}

/// Normalized homogeneous kernels: softmax over the 36 entries per action.
pub fn transition_kernel_hom(tape: &mut Tape, ids: &NodeMap) -> Result<NodeId> {
    tape.softmax(ids["trans.hom"], 1)
}

/// Normalized heterogeneous kernels from the map image: shape
/// (4·|A|·36, N, N), softmaxed over each state's 36 kernel entries.
pub fn transition_kernel_het(tape: &mut Tape, ids: &NodeMap, img: NodeId, n: usize) -> Result<NodeId> {
    let h1 = tape.conv2d(img, ids["trans.conv1.w"], Some(ids["trans.conv1.b"]))?;
    let a1 = tape.relu(h1)?;
    let h2 = tape.conv2d(a1, ids["trans.conv2.w"], Some(ids["trans.conv2.b"]))?;
    let grouped = tape.reshape(h2, vec![4 * N_ACTIONS, KERNEL_ENTRIES, n * n])?;
    let sm = tape.softmax(grouped, 1)?;
    tape.reshape(sm, vec![4 * N_ACTIONS * KERNEL_ENTRIES, n, n])
}

/// The simulator's exact dynamics as homogeneous one-hot kernels (forward
/// moves one cell ahead, turns rotate in place, stay is the identity); wall
/// blocking is supplied by the kernel table's source redirect.
pub fn true_kernel_hom() -> Tensor {
    let mut k = Tensor::zeros(vec![N_ACTIONS, KERNEL_ENTRIES]);
    let entry = |df: i64, dl: i64, dth: usize| ((df + 1) as usize * 3 + (dl + 1) as usize) * 4 + dth;
    k.data_mut()[crate::env::FORWARD * KERNEL_ENTRIES + entry(1, 0, 0)] = 1.0;
    k.data_mut()[crate::env::TURN_LEFT * KERNEL_ENTRIES + entry(0, 0, 3)] = 1.0;
    k.data_mut()[crate::env::TURN_RIGHT * KERNEL_ENTRIES + entry(0, 0, 1)] = 1.0;
    k.data_mut()[crate::env::STAY * KERNEL_ENTRIES + entry(0, 0, 0)] = 1.0;
    k
}

/// Kind descriptor for a given parameterization and action.
pub fn kernel_kind(param: TransitionParam, action: usize) -> KernelKind {
    match param {
        TransitionParam::Homogeneous => KernelKind::Homogeneous { action },
        TransitionParam::Heterogeneous => KernelKind::Heterogeneous { action, n_actions: N_ACTIONS },
    }
}

// ── Filter steps ────────────────────────────────────────────────────────────

/// b⁻(s') = Σ_s T(s'|s,a)·b(s) as a local kernel application; mass pushed
/// into blocked cells returns to its source state, then the result is
/// renormalized.
pub fn predict(
    tape: &mut Tape,
    belief: NodeId,
    action: usize,
    kernel: NodeId,
    param: TransitionParam,
    table: &Arc<KernelTable>,
) -> Result<NodeId> {
    let moved = tape.trans_kernel(kernel, belief, table.clone(), kernel_kind(param, action), false)?;
    let total = tape.sum(moved, None)?;
    tape.div(moved, total)
}

/// Analytic observation likelihood on the filter's map: 1 where the state's
/// noise-free observation equals `obs`, `eps` elsewhere (including walls).
pub fn analytic_likelihood(map: &GridMap, obs: [u8; 3], eps: f64) -> Tensor {
    let n = map.n;
    let mut z = Tensor::full(vec![n, n, 4], eps);
    for y in 0..n {
        for x in 0..n {
            if map.blocked(x as i64, y as i64, true) {
                continue;
            }
            for th in 0..4 {
                if observe(map, State::new(x, y, th), true) == obs {
                    z.data_mut()[State::new(x, y, th).index(n)] = 1.0;
                }
            }
        }
    }
    z
}

/// Channel widths of the learned observation model.
#[derive(Debug, Clone, Copy)]
pub struct ZModelConfig {
    pub conv_filters: usize,
    pub obs_embed: usize,
}

impl Default for ZModelConfig {
    fn default() -> Self {
        ZModelConfig { conv_filters: 32, obs_embed: 8 }
    }
}

pub fn init_zmodel(params: &mut ParamMap, cfg: ZModelConfig, rng: &mut ChaCha8Rng) {
    init_conv(params, "zmodel.conv1", 3, cfg.conv_filters, 3, rng);
    init_conv(params, "zmodel.conv2", cfg.conv_filters, cfg.conv_filters, 3, rng);
    init_dense(params, "zmodel.embed", 3, cfg.obs_embed, rng);
    init_conv(params, "zmodel.head", cfg.conv_filters + cfg.obs_embed, 4, 1, rng);
}

/// Map-conditioned conv features shared by every observation in an
/// environment; compute once per tape.
pub fn zmodel_map_features(tape: &mut Tape, ids: &NodeMap, img: NodeId) -> Result<NodeId> {
    let h1 = tape.conv2d(img, ids["zmodel.conv1.w"], Some(ids["zmodel.conv1.b"]))?;
    let a1 = tape.relu(h1)?;
    let h2 = tape.conv2d(a1, ids["zmodel.conv2.w"], Some(ids["zmodel.conv2.b"]))?;
    tape.relu(h2)
}

/// Learned per-state likelihood in (EPS, 1]: map features ⊕ tiled observation
/// embedding → 1×1 conv to 4 orientation channels → scaled sigmoid.
pub fn learned_likelihood(
    tape: &mut Tape,
    ids: &NodeMap,
    map_features: NodeId,
    obs: [u8; 3],
    cfg: ZModelConfig,
    n: usize,
) -> Result<NodeId> {
    let obs_row = tape.leaf(Tensor::new(vec![1, 3], obs.iter().map(|&v| v as f64).collect()));
    let emb = dense(tape, ids, "zmodel.embed", obs_row)?;
    let emb = tape.relu(emb)?;
    let tiled = tile_row(tape, emb, cfg.obs_embed, n)?;
    let cat = tape.concat(&[map_features, tiled], 1)?;
    let head = tape.conv2d(cat, ids["zmodel.head.w"], Some(ids["zmodel.head.b"]))?;
    let sig = tape.sigmoid(head)?;
    let scaled = tape.scale(sig, 1.0 - LIKELIHOOD_EPS)?;
    let eps = tape.leaf(Tensor::scalar(LIKELIHOOD_EPS));
    let z = tape.add(scaled, eps)?;
    chw_to_hwc(tape, z, n)
}

/// Bayes correction b(s) ∝ Z(o|s)·b⁻(s). Degenerate total mass is an error.
pub fn correct(tape: &mut Tape, belief_pred: NodeId, likelihood: NodeId) -> Result<NodeId> {
    let weighted = tape.mul(belief_pred, likelihood)?;
    let total = tape.sum(weighted, None)?;
    let mass = tape.value(total).item();
    if !(mass > DEGENERATE_MASS) {
        return Err(DanError::DegenerateBelief { mass });
    }
    tape.div(weighted, total)
}

// ── Belief interfaces ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefVariant {
    /// Belief passed through unchanged; trained so the filter output is the
    /// true posterior (models fitted independently or supervised).
    HfBel,
    /// One-hot at the most likely state, ties to the smallest linear index;
    /// gradients do not flow through the argmax.
    HfMl,
    /// Belief passed through unchanged; end-to-end training may repurpose it.
    Hf,
}

pub fn belief_interface(tape: &mut Tape, belief: NodeId, variant: BeliefVariant) -> Result<NodeId> {
    match variant {
        BeliefVariant::HfBel | BeliefVariant::Hf => Ok(belief),
        BeliefVariant::HfMl => {
            let v = tape.value(belief);
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for (i, &p) in v.data().iter().enumerate() {
                if p > best {
                    best = p;
                    arg = i;
                }
            }
            let mut one_hot = Tensor::zeros(v.shape().to_vec());
            one_hot.data_mut()[arg] = 1.0;
            // A fresh leaf: downstream consumers differentiate normally, but
            // no gradient reaches the belief or the filter parameters.
            Ok(tape.leaf(one_hot))
        }
    }
}

/// Most-likely state of a belief tensor (ties to the smallest linear index).
pub fn most_likely_state(belief: &Tensor, n: usize) -> State {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &p) in belief.data().iter().enumerate() {
        if p > best {
            best = p;
            arg = i;
        }
    }
    State::from_index(arg, n)
}

/// Host-side belief invariant check (sum ≈ 1, non-negative, no wall mass).
pub fn assert_valid_belief(map: &GridMap, b: &Tensor) -> Result<()> {
    let sum: f64 = b.data().iter().sum();
    if (sum - 1.0).abs() > 1e-9 || b.data().iter().any(|&v| v < 0.0) {
        return Err(DanError::DegenerateBelief { mass: sum });
    }
    for y in 0..map.n {
        for x in 0..map.n {
            if map.wall(x, y) {
                for th in 0..4 {
                    if b.data()[State::new(x, y, th).index(map.n)] > 1e-12 {
                        return Err(DanError::DegenerateBelief { mass: sum });
                    }
                }
            }
        }
    }
    Ok(())
}
