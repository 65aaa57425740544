//! Differentiable planning: finite-horizon value iteration over grid and
//! tabular transition models, QMDP action values under a belief, a learned
//! reward model, the named planner variants (horizon / transition / backup
//! combinations), and observation-triggered replanning.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::env::{
    observed_cells, GridMap, PuddleProblem, State, DISCOUNT, FORWARD, N_ACTIONS,
    REWARD_COLLISION, REWARD_GOAL, REWARD_STEP,
};
use crate::error::{DanError, Result};
use crate::filter::{kernel_kind, TransitionParam};
use crate::nn::{init_conv, NodeMap, ParamMap};
use crate::tape::{KernelTable, NodeId, Tape, HEADING};
use crate::tensor::Tensor;

// ── Configuration ───────────────────────────────────────────────────────────

/// Converged-horizon planning on the 9×9 grid (longest optimal paths are far
/// shorter than this).
pub const H_LONG: usize = 100;
/// Default horizon for jointly trained planners.
pub const H_DEFAULT_DAN: usize = 40;
/// Deliberately truncated horizon, shorter than typical optimal paths.
pub const H_SHORT: usize = 12;
/// Temperature of the soft Bellman backup used during joint training on mazes.
pub const SOFT_TEMPERATURE: f64 = 1.0;
/// Hidden width of the reward model's first convolution.
pub const REWARD_HIDDEN: usize = 32;

/// Bellman backup operator over the action axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backup {
    /// Exact maximum (subgradient at ties flows to the smallest index).
    Hard,
    /// Temperature-scaled log-sum-exp, a smooth upper bound on the maximum.
    Soft { temperature: f64 },
}

/// Named planner variants; they differ only in horizon, transition
/// parameterization, and replanning behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerVariant {
    Vi,
    ViStar,
    ViShort,
    ViHom,
    ViShortHom,
    ViRepl,
}

impl fmt::Display for PlannerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlannerVariant::Vi => "VI",
            PlannerVariant::ViStar => "VI*",
            PlannerVariant::ViShort => "VI-short",
            PlannerVariant::ViHom => "VI-hom",
            PlannerVariant::ViShortHom => "VI-short-hom",
            PlannerVariant::ViRepl => "VI-repl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    pub variant: PlannerVariant,
    pub horizon: usize,
    pub transition: TransitionParam,
    pub backup: Backup,
}

impl PlannerConfig {
    /// Standard 9×9 configuration per variant. Planners wrapped around
    /// independently fitted models use the hard backup and (except for the
    /// explicitly homogeneous variants) heterogeneous transitions; jointly
    /// trained planners use the soft backup — needed for useful gradients —
    /// and, for the default variant, the homogeneous model with a medium
    /// horizon.
    pub fn standard(variant: PlannerVariant, independent: bool) -> PlannerConfig {
        let (transition, horizon) = match variant {
            PlannerVariant::ViStar => (TransitionParam::Heterogeneous, H_LONG),
            PlannerVariant::Vi | PlannerVariant::ViRepl => {
                if independent {
                    (TransitionParam::Heterogeneous, H_LONG)
                } else {
                    (TransitionParam::Homogeneous, H_DEFAULT_DAN)
                }
            }
            PlannerVariant::ViShort => (TransitionParam::Heterogeneous, H_SHORT),
            PlannerVariant::ViHom => (TransitionParam::Homogeneous, H_LONG),
            PlannerVariant::ViShortHom => (TransitionParam::Homogeneous, H_SHORT),
        };
        let backup = if independent {
            Backup::Hard
        } else {
            Backup::Soft { temperature: SOFT_TEMPERATURE }
        };
        PlannerConfig { variant, horizon, transition, backup }
    }

    /// Whether this variant re-plans when observations reveal unmapped
    /// obstacles.
    pub fn replans(&self) -> bool {
        self.variant == PlannerVariant::ViRepl
    }
}

// ── Grid model inputs ───────────────────────────────────────────────────────

/// Routing table for the planner's Bellman backups. A heterogeneous
/// transition model is conditioned on the map, so its per-cell kernels are
/// applied with wall-aware target folding. A homogeneous model is translation
/// invariant by definition — the same local kernel applied identically at
/// every cell — so nothing about interior walls can enter through its
/// application; only out-of-grid targets fold back to the source cell. This
/// is what lets a maximum-likelihood homogeneous model plan straight through
/// walls it cannot represent.
pub fn planner_kernel_table(map: &GridMap, transition: TransitionParam) -> Arc<KernelTable> {
    match transition {
        TransitionParam::Heterogeneous => {
            let m = map.clone();
            Arc::new(KernelTable::build(map.n, move |x, y| m.blocked(x as i64, y as i64, true)))
        }
        TransitionParam::Homogeneous => Arc::new(KernelTable::build(map.n, |_, _| false)),
    }
}

/// Mask that pins the four goal-cell states to value 0 after every backup,
/// making the goal absorbing regardless of what the transition and reward
/// models say. Shape (N, N, 4).
pub fn goal_mask_leaf(tape: &mut Tape, map: &GridMap) -> NodeId {
    let n = map.n;
    let mut m = Tensor::new(vec![n, n, 4], vec![1.0; n * n * 4]);
    for th in 0..4 {
        m.data_mut()[(map.goal.1 * n + map.goal.0) * 4 + th] = 0.0;
    }
    tape.leaf(m)
}

/// The simulator's exact per-action reward maps as constant leaves, each of
/// shape (N, N, 4): forward into a blocked cell −10, forward onto the goal
/// +20, anything else −0.1.
pub fn true_reward_nodes(tape: &mut Tape, map: &GridMap) -> Vec<NodeId> {
    let n = map.n;
    let mut out = Vec::with_capacity(N_ACTIONS);
    for a in 0..N_ACTIONS {
        let mut r = Tensor::zeros(vec![n, n, 4]);
        for y in 0..n {
            for x in 0..n {
                for th in 0..4 {
                    let val = if a == FORWARD {
                        let (dx, dy) = HEADING[th];
                        let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                        if map.blocked(tx, ty, true) {
                            REWARD_COLLISION
                        } else if (tx as usize, ty as usize) == map.goal {
                            REWARD_GOAL
                        } else {
                            REWARD_STEP
                        }
                    } else {
                        REWARD_STEP
                    };
                    r.data_mut()[(y * n + x) * 4 + th] = val;
                }
            }
        }
        out.push(tape.leaf(r));
    }
    out
}

/// Learned reward model: a 3×3 convolution over the map image followed by a
/// 1×1 convolution to 4·|A| channels, one per (orientation, action) pair.
pub fn init_rmodel(params: &mut ParamMap, hidden: usize, rng: &mut ChaCha8Rng) {
    init_conv(params, "reward.conv1", 3, hidden, 3, rng);
    init_conv(params, "reward.head", hidden, 4 * N_ACTIONS, 1, rng);
}

/// Per-action reward maps from the learned reward model, each of shape
/// (N, N, 4); channel th·|A| + a of the head holds R(·, ·, th, a).
pub fn reward_model_nodes(
    tape: &mut Tape,
    ids: &NodeMap,
    img: NodeId,
    n: usize,
) -> Result<Vec<NodeId>> {
    let h = tape.conv2d(img, ids["reward.conv1.w"], Some(ids["reward.conv1.b"]))?;
    let act = tape.relu(h)?;
    let out = tape.conv2d(act, ids["reward.head.w"], Some(ids["reward.head.b"]))?;
    let mut rewards = Vec::with_capacity(N_ACTIONS);
    for a in 0..N_ACTIONS {
        let mut idx = Vec::with_capacity(n * n * 4);
        for y in 0..n {
            for x in 0..n {
                for th in 0..4 {
                    idx.push((((th * N_ACTIONS + a) * n + y) * n + x) as u32);
                }
            }
        }
        rewards.push(tape.gather(out, Arc::new(idx), vec![n, n, 4])?);
    }
    Ok(rewards)
}

// ── Value iteration ─────────────────────────────────────────────────────────

/// Reduce action values over `axis` with the chosen backup; the axis is
/// removed from the output shape.
pub fn backup_values(tape: &mut Tape, q: NodeId, axis: usize, backup: Backup) -> Result<NodeId> {
    match backup {
        Backup::Hard => tape.max_axis(q, axis),
        Backup::Soft { temperature } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(DanError::Config(format!("soft backup temperature {temperature}")));
            }
            let scaled = tape.scale(q, 1.0 / temperature)?;
            let lse = tape.logsumexp(scaled, axis)?;
            tape.scale(lse, temperature)
        }
    }
}

/// Finite-horizon value iteration on the grid. Starting from V₀ = 0, each of
/// the `horizon` iterations computes Q(s,a) = R(s,a) + γ·E[V(s')] — the
/// expectation implemented as a transposed local-kernel application — then
/// backs V up over actions and re-pins the goal states to 0. Returns the
/// final Q of shape (N, N, 4, |A|).
#[allow(clippy::too_many_arguments)]
pub fn value_iteration_grid(
    tape: &mut Tape,
    kernel: NodeId,
    param: TransitionParam,
    table: &Arc<KernelTable>,
    rewards: &[NodeId],
    goal_mask: NodeId,
    horizon: usize,
    backup: Backup,
) -> Result<NodeId> {
    if horizon == 0 {
        return Err(DanError::Config("planning horizon must be at least 1".into()));
    }
    if rewards.len() != N_ACTIONS {
        return Err(DanError::Config(format!(
            "expected {N_ACTIONS} per-action reward maps, got {}",
            rewards.len()
        )));
    }
    let n = table.n;
    let mut v = tape.leaf(Tensor::zeros(vec![n, n, 4]));
    let mut q = None;
    for _ in 0..horizon {
        let mut per_action = Vec::with_capacity(N_ACTIONS);
        for (a, &r_a) in rewards.iter().enumerate() {
            let ev = tape.trans_kernel(kernel, v, table.clone(), kernel_kind(param, a), true)?;
            let disc = tape.scale(ev, DISCOUNT)?;
            let q_a = tape.add(r_a, disc)?;
            per_action.push(tape.reshape(q_a, vec![n, n, 4, 1])?);
        }
        let qk = tape.concat(&per_action, 3)?;
        let vb = backup_values(tape, qk, 3, backup)?;
        v = tape.mul(vb, goal_mask)?;
        q = Some(qk);
    }
    Ok(q.expect("horizon checked above"))
}

/// Finite-horizon value iteration on a small tabular problem: one (S, S)
/// row-stochastic transition matrix and one (S, 1) reward vector per action.
/// `terminal_mask` (S, 1) holds 0 at terminal states and 1 elsewhere; masked
/// states are pinned to value 0 after every backup. Returns the final Q of
/// shape (S, |A|).
pub fn value_iteration_tabular(
    tape: &mut Tape,
    t_mats: &[NodeId],
    rewards: &[NodeId],
    terminal_mask: NodeId,
    horizon: usize,
    backup: Backup,
    discount: f64,
) -> Result<NodeId> {
    if horizon == 0 {
        return Err(DanError::Config("planning horizon must be at least 1".into()));
    }
    if t_mats.is_empty() || t_mats.len() != rewards.len() {
        return Err(DanError::Config(
            "need one transition matrix and one reward vector per action".into(),
        ));
    }
    let s_count = tape.value(t_mats[0]).shape()[0];
    let mut v = tape.leaf(Tensor::zeros(vec![s_count, 1]));
    let mut q = None;
    for _ in 0..horizon {
        let mut per_action = Vec::with_capacity(t_mats.len());
        for (a, &t_a) in t_mats.iter().enumerate() {
            let ev = tape.matmul(t_a, v)?;
            let disc = tape.scale(ev, discount)?;
            per_action.push(tape.add(rewards[a], disc)?);
        }
        let qk = tape.concat(&per_action, 1)?;
        let vb = backup_values(tape, qk, 1, backup)?;
        let col = tape.reshape(vb, vec![s_count, 1])?;
        v = tape.mul(col, terminal_mask)?;
        q = Some(qk);
    }
    Ok(q.expect("horizon checked above"))
}

// ── Action selection ────────────────────────────────────────────────────────

/// Belief-weighted action values q(a) = Σ_s b(s)·Q(s,a). Accepts any Q whose
/// flattened layout is state-major (grid (N,N,4,|A|) and tabular (S,|A|)
/// both are) and any belief of matching state count; returns a (1, |A|) row.
pub fn qmdp_action_values(tape: &mut Tape, q: NodeId, belief: NodeId) -> Result<NodeId> {
    let s_count = tape.value(belief).len();
    let q_len = tape.value(q).len();
    if s_count == 0 || q_len % s_count != 0 {
        return Err(DanError::Config(format!(
            "action values of length {q_len} do not factor over {s_count} states"
        )));
    }
    let n_actions = q_len / s_count;
    let b_row = tape.reshape(belief, vec![1, s_count])?;
    let q_mat = tape.reshape(q, vec![s_count, n_actions])?;
    tape.matmul(b_row, q_mat)
}

/// Index of the largest value; ties break toward the smallest index.
pub fn argmax_action(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ── Replanning ──────────────────────────────────────────────────────────────

/// When the observation reports blocked cells that the working map believes
/// are free, mark them occupied (relative to the most-likely state) in a copy
/// of the working map and invoke `plan` on it; returns the updated map with
/// the recomputed action values. Implied cells outside the grid are ignored.
/// Returns `Ok(None)` — without planning — when the observation is consistent
/// with the working map. The original map is never modified.
pub fn replan_on_obstacle<F>(
    working: &GridMap,
    most_likely: State,
    obs: [u8; 3],
    plan: F,
) -> Result<Option<(GridMap, Tensor)>>
where
    F: FnOnce(&GridMap) -> Result<Tensor>,
{
    let cells = observed_cells(most_likely);
    let mut extra: Vec<(usize, usize)> = Vec::new();
    for (i, &(x, y)) in cells.iter().enumerate() {
        let in_grid = x >= 0 && y >= 0 && (x as usize) < working.n && (y as usize) < working.n;
        if obs[i] == 1 && in_grid && !working.blocked(x, y, true) {
            extra.push((x as usize, y as usize));
        }
    }
    if extra.is_empty() {
        return Ok(None);
    }
    let updated = working.with_extra_furniture(&extra);
    let q = plan(&updated)?;
    Ok(Some((updated, q)))
}

// ── Tabular model builders (puddle problems) ────────────────────────────────

/// Number of one-step displacements on a small grid: (dx, dy) ∈ {−1, 0, 1}².
pub const N_DISPLACEMENTS: usize = 9;

/// Unconstrained per-(s, a) transition logits, shape (S·|A|, S), initialised
/// to zero so every row starts uniform.
pub fn init_puddle_tabular(params: &mut ParamMap, n_states: usize, n_actions: usize) {
    params.insert(
        "puddle.t_logits".to_string(),
        Tensor::zeros(vec![n_states * n_actions, n_states]),
    );
}

/// Row-normalized per-action transition matrices from the unconstrained
/// logits: softmax each (s, a) row, then split into one (S, S) matrix per
/// action.
pub fn puddle_tabular_t(
    tape: &mut Tape,
    ids: &NodeMap,
    n_states: usize,
    n_actions: usize,
) -> Result<Vec<NodeId>> {
    let sm = tape.softmax(ids["puddle.t_logits"], 1)?;
    let mut mats = Vec::with_capacity(n_actions);
    for a in 0..n_actions {
        let mut idx = Vec::with_capacity(n_states * n_states);
        for s in 0..n_states {
            for s2 in 0..n_states {
                idx.push(((s * n_actions + a) * n_states + s2) as u32);
            }
        }
        mats.push(tape.gather(sm, Arc::new(idx), vec![n_states, n_states])?);
    }
    Ok(mats)
}

/// Per-action displacement-mixture logits, shape (|A|, 9), initialised to
/// zero (uniform over displacements).
pub fn init_puddle_kernel(params: &mut ParamMap, n_actions: usize) {
    params.insert("puddle.k_logits".to_string(), Tensor::zeros(vec![n_actions, N_DISPLACEMENTS]));
}

/// Constant mixture components for the displacement parameterization: a
/// (9, S·S) stack of transition matrices — matrix d moves every non-terminal
/// state by (dx, dy) = (d%3−1, d/3−1), staying put when that leaves the grid —
/// plus the identity restricted to terminal rows (which the stack leaves at
/// zero, so terminal states are exactly absorbing).
fn displacement_matrices(width: usize, height: usize, terminal: &[bool]) -> (Tensor, Tensor) {
    let s_count = width * height;
    debug_assert_eq!(terminal.len(), s_count);
    let mut stack = Tensor::zeros(vec![N_DISPLACEMENTS, s_count * s_count]);
    for d in 0..N_DISPLACEMENTS {
        let dx = d as i64 % 3 - 1;
        let dy = d as i64 / 3 - 1;
        for s in 0..s_count {
            if terminal[s] {
                continue;
            }
            let (x, y) = ((s % width) as i64, (s / width) as i64);
            let (tx, ty) = (x + dx, y + dy);
            let t = if tx < 0 || ty < 0 || tx >= width as i64 || ty >= height as i64 {
                s
            } else {
                ty as usize * width + tx as usize
            };
            stack.data_mut()[(d * s_count + s) * s_count + t] += 1.0;
        }
    }
    let mut ident = Tensor::zeros(vec![s_count, s_count]);
    for s in 0..s_count {
        if terminal[s] {
            ident.data_mut()[s * s_count + s] = 1.0;
        }
    }
    (stack, ident)
}

/// Per-action transition matrices from the displacement mixture: softmax the
/// (|A|, 9) logits, mix the constant displacement matrices, and pin terminal
/// rows to exact self-loops. Returns one (S, S) node per action.
pub fn puddle_kernel_t(
    tape: &mut Tape,
    ids: &NodeMap,
    width: usize,
    height: usize,
    terminal: &[bool],
) -> Result<Vec<NodeId>> {
    let s_count = width * height;
    if terminal.len() != s_count {
        return Err(DanError::Config(format!(
            "terminal flags for {} states, grid has {s_count}",
            terminal.len()
        )));
    }
    let n_actions = tape.value(ids["puddle.k_logits"]).shape()[0];
    let (stack, ident) = displacement_matrices(width, height, terminal);
    let stack = tape.leaf(stack);
    let ident = tape.leaf(ident);
    let probs = tape.softmax(ids["puddle.k_logits"], 1)?;
    let mut mats = Vec::with_capacity(n_actions);
    for a in 0..n_actions {
        let idx: Vec<u32> =
            (0..N_DISPLACEMENTS).map(|d| (a * N_DISPLACEMENTS + d) as u32).collect();
        let row = tape.gather(probs, Arc::new(idx), vec![1, N_DISPLACEMENTS])?;
        let mixed = tape.matmul(row, stack)?;
        let open = tape.reshape(mixed, vec![s_count, s_count])?;
        mats.push(tape.add(open, ident)?);
    }
    Ok(mats)
}

/// Self-loop probability T(s | s, ·) of a composed (S, S) transition matrix.
pub fn stay_probability(t: &Tensor, s: usize) -> f64 {
    let s_count = t.shape()[0];
    t.data()[s * s_count + s]
}

/// True expected one-step rewards R(s, a) = Σ_s' T(s'|s,a)·R(s,a,s') as
/// constant (S, 1) leaves, one per action.
pub fn expected_reward_leaves(tape: &mut Tape, p: &PuddleProblem) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(p.n_actions);
    for a in 0..p.n_actions {
        let r: Vec<f64> = (0..p.n_states).map(|s| p.expected_reward(s, a)).collect();
        out.push(tape.leaf(Tensor::new(vec![p.n_states, 1], r)));
    }
    out
}

/// The problem's true transition matrices as constant (S, S) leaves, one per
/// action.
pub fn true_transition_leaves(tape: &mut Tape, p: &PuddleProblem) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(p.n_actions);
    for a in 0..p.n_actions {
        let mut t = Tensor::zeros(vec![p.n_states, p.n_states]);
        for s in 0..p.n_states {
            for s2 in 0..p.n_states {
                t.data_mut()[s * p.n_states + s2] = p.t(s, a, s2);
            }
        }
        out.push(tape.leaf(t));
    }
    out
}

/// (S, 1) mask holding 0 at terminal states and 1 elsewhere.
pub fn terminal_mask_leaf(tape: &mut Tape, p: &PuddleProblem) -> NodeId {
    let m: Vec<f64> = p.terminal.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect();
    tape.leaf(Tensor::new(vec![p.n_states, 1], m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        generate_environment, make_puddle_mdp, make_puddle_pomdp, observe, step, PP_A, PP_DOWN,
        PP_FAIL, PP_RIGHT, PUDDLE_UP,
    };
    use crate::filter::{
        init_transition_hom, kernel_table, map_image, transition_kernel_hom, true_kernel_hom,
    };
    use crate::tape::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Classical dynamic-programming value iteration on the grid's exact
    /// deterministic dynamics, mirroring the collision-stay rule and the
    /// absorbing goal.
    fn local_grid_dp(map: &GridMap, horizon: usize) -> Vec<f64> {
        let n = map.n;
        let ns = n * n * 4;
        let succ = |s: usize, a: usize| -> usize {
            let st = State::from_index(s, n);
            match a {
                FORWARD => {
                    let (dx, dy) = HEADING[st.th];
                    let (tx, ty) = (st.x as i64 + dx, st.y as i64 + dy);
                    if map.blocked(tx, ty, true) {
                        s
                    } else {
                        State::new(tx as usize, ty as usize, st.th).index(n)
                    }
                }
                crate::env::TURN_LEFT => State::new(st.x, st.y, (st.th + 3) % 4).index(n),
                crate::env::TURN_RIGHT => State::new(st.x, st.y, (st.th + 1) % 4).index(n),
                _ => s,
            }
        };
        let rew = |s: usize, a: usize| -> f64 {
            if a != FORWARD {
                return REWARD_STEP;
            }
            let st = State::from_index(s, n);
            let (dx, dy) = HEADING[st.th];
            let (tx, ty) = (st.x as i64 + dx, st.y as i64 + dy);
            if map.blocked(tx, ty, true) {
                REWARD_COLLISION
            } else if (tx as usize, ty as usize) == map.goal {
                REWARD_GOAL
            } else {
                REWARD_STEP
            }
        };
        let mut v = vec![0.0; ns];
        let mut q = vec![0.0; ns * N_ACTIONS];
        for _ in 0..horizon {
            for s in 0..ns {
                for a in 0..N_ACTIONS {
                    q[s * N_ACTIONS + a] = rew(s, a) + DISCOUNT * v[succ(s, a)];
                }
            }
            for s in 0..ns {
                let st = State::from_index(s, n);
                v[s] = if (st.x, st.y) == map.goal {
                    0.0
                } else {
                    (0..N_ACTIONS).map(|a| q[s * N_ACTIONS + a]).fold(f64::NEG_INFINITY, f64::max)
                };
            }
        }
        q
    }

    fn puddle_q(horizon: usize, backup: Backup) -> (PuddleProblem, Tensor) {
        let p = make_puddle_mdp();
        let mut tape = Tape::new();
        let t_mats = true_transition_leaves(&mut tape, &p);
        let rewards = expected_reward_leaves(&mut tape, &p);
        let mask = terminal_mask_leaf(&mut tape, &p);
        let q = value_iteration_tabular(&mut tape, &t_mats, &rewards, mask, horizon, backup, p.discount)
            .unwrap();
        let qv = tape.value(q).clone();
        (p, qv)
    }

    #[test]
    fn tabular_two_steps_accumulate_geometric_sum() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]));
        let r = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]));
        let mask = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]));
        let q =
            value_iteration_tabular(&mut tape, &[t], &[r], mask, 2, Backup::Hard, 0.99).unwrap();
        assert!((tape.value(q).data()[0] - 1.99).abs() < 1e-12);
        assert!(value_iteration_tabular(&mut tape, &[t], &[r], mask, 0, Backup::Hard, 0.99)
            .is_err());
    }

    #[test]
    fn puddle_horizon_six_rollout_takes_the_long_way_round() {
        let (p, qv) = puddle_q(6, Backup::Hard);
        let mut s = 0usize;
        let mut ret = 0.0;
        let mut disc = 1.0;
        let mut visited = Vec::new();
        for _ in 0..20 {
            let row = &qv.data()[s * p.n_actions..(s + 1) * p.n_actions];
            let a = argmax_action(row);
            let s2 = (0..p.n_states).find(|&s2| p.t(s, a, s2) > 0.5).unwrap();
            ret += disc * p.r(s, a, s2);
            disc *= p.discount;
            s = s2;
            visited.push(s2);
            if p.terminal[s2] {
                break;
            }
        }
        assert_eq!(visited, vec![1, 2, 5, 8, 7, 6], "expected the detour around the puddles");
        let j_star: f64 =
            (0..5).map(|t| 0.99f64.powi(t) * -0.1).sum::<f64>() + 0.99f64.powi(5) * 20.0;
        assert!((ret - j_star).abs() < 1e-9, "return {ret} vs optimal {j_star}");
    }

    #[test]
    fn puddle_horizon_four_cannot_see_past_the_puddles() {
        let (p, qv) = puddle_q(4, Backup::Hard);
        let row = &qv.data()[0..p.n_actions];
        assert_eq!(argmax_action(row), PUDDLE_UP);
        // With four lookahead steps the goal is out of range from the start
        // state, so the best entries are pure step-cost chains that tie; the
        // winner just bumps the top wall.
        let expected = -0.1 + 0.99 * (-0.1 * (1.0 + 0.99 + 0.99 * 0.99));
        assert!((row[PUDDLE_UP] - expected).abs() < 1e-12);
    }

    #[test]
    fn grid_vi_matches_classical_dp_on_a_maze() {
        let map = generate_environment(7, 9, 0).unwrap();
        let mut tape = Tape::new();
        let kernel = tape.leaf(true_kernel_hom());
        let table = kernel_table(&map);
        let rewards = true_reward_nodes(&mut tape, &map);
        let mask = goal_mask_leaf(&mut tape, &map);
        let q = value_iteration_grid(
            &mut tape,
            kernel,
            TransitionParam::Homogeneous,
            &table,
            &rewards,
            mask,
            80,
            Backup::Hard,
        )
        .unwrap();
        let qv = tape.value(q);
        assert_eq!(qv.shape(), &[9, 9, 4, N_ACTIONS]);
        let dp = local_grid_dp(&map, 80);
        // Compare on free cells only: the kernel routing treats a wall state's
        // in-place turn as blocked (its own cell is occupied), while the
        // classical program lets wall states rotate. Free-state values never
        // read wall-state values, so they are unaffected by that convention.
        let mut worst = 0.0f64;
        for (x, y) in map.free_cells(true) {
            for th in 0..4 {
                let s = State::new(x, y, th).index(9);
                for a in 0..N_ACTIONS {
                    let i = s * N_ACTIONS + a;
                    worst = worst.max((qv.data()[i] - dp[i]).abs());
                }
            }
        }
        assert!(worst <= 1e-9, "max deviation from dynamic programming: {worst}");
    }

    #[test]
    fn tabular_vi_matches_classical_dp_on_random_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &s_count in &[3usize, 7, 12] {
            for &a_count in &[2usize, 3] {
                let mut t = vec![0.0; a_count * s_count * s_count];
                let mut r = vec![0.0; a_count * s_count];
                for a in 0..a_count {
                    for s in 0..s_count {
                        let row: Vec<f64> =
                            (0..s_count).map(|_| rng.gen_range(0.05..1.0)).collect();
                        let z: f64 = row.iter().sum();
                        for s2 in 0..s_count {
                            t[(a * s_count + s) * s_count + s2] = row[s2] / z;
                        }
                        r[a * s_count + s] = rng.gen_range(-1.0..1.0);
                    }
                }
                let gamma = 0.9;
                let horizon = 60;
                // Reference dynamic program.
                let mut v = vec![0.0; s_count];
                let mut q_ref = vec![0.0; s_count * a_count];
                for _ in 0..horizon {
                    for s in 0..s_count {
                        for a in 0..a_count {
                            let ev: f64 = (0..s_count)
                                .map(|s2| t[(a * s_count + s) * s_count + s2] * v[s2])
                                .sum();
                            q_ref[s * a_count + a] = r[a * s_count + s] + gamma * ev;
                        }
                    }
                    for s in 0..s_count {
                        v[s] = (0..a_count)
                            .map(|a| q_ref[s * a_count + a])
                            .fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                let mut tape = Tape::new();
                let t_mats: Vec<NodeId> = (0..a_count)
                    .map(|a| {
                        tape.leaf(Tensor::new(
                            vec![s_count, s_count],
                            t[a * s_count * s_count..(a + 1) * s_count * s_count].to_vec(),
                        ))
                    })
                    .collect();
                let rewards: Vec<NodeId> = (0..a_count)
                    .map(|a| {
                        tape.leaf(Tensor::new(
                            vec![s_count, 1],
                            r[a * s_count..(a + 1) * s_count].to_vec(),
                        ))
                    })
                    .collect();
                let mask = tape.leaf(Tensor::new(vec![s_count, 1], vec![1.0; s_count]));
                let q = value_iteration_tabular(
                    &mut tape,
                    &t_mats,
                    &rewards,
                    mask,
                    horizon,
                    Backup::Hard,
                    gamma,
                )
                .unwrap();
                for i in 0..q_ref.len() {
                    assert!(
                        (tape.value(q).data()[i] - q_ref[i]).abs() <= 1e-9,
                        "S={s_count} A={a_count} entry {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn soft_backup_upper_bounds_hard_and_tightens_with_temperature() {
        let map = GridMap::open(5, (4, 4), 0);
        let mut tape = Tape::new();
        let kernel = tape.leaf(true_kernel_hom());
        let table = kernel_table(&map);
        let rewards = true_reward_nodes(&mut tape, &map);
        let mask = goal_mask_leaf(&mut tape, &map);
        let run = |tape: &mut Tape, backup: Backup| -> Tensor {
            let q = value_iteration_grid(
                tape,
                kernel,
                TransitionParam::Homogeneous,
                &table,
                &rewards,
                mask,
                30,
                backup,
            )
            .unwrap();
            tape.value(q).clone()
        };
        let hard = run(&mut tape, Backup::Hard);
        let mut gaps = Vec::new();
        for &temp in &[1.0, 0.1, 0.01] {
            let soft = run(&mut tape, Backup::Soft { temperature: temp });
            let mut gap = 0.0f64;
            for (qs, qh) in soft.data().iter().zip(hard.data()) {
                assert!(qs - qh >= -1e-12, "soft backup fell below hard at T={temp}");
                gap = gap.max(qs - qh);
            }
            gaps.push(gap);
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps not decreasing: {gaps:?}");
    }

    #[test]
    fn qmdp_weights_rows_by_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (s_count, a_count) = (12usize, 4usize);
        let q_data: Vec<f64> = (0..s_count * a_count).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![s_count, a_count], q_data.clone()));

        let mut onehot = vec![0.0; s_count];
        onehot[7] = 1.0;
        let b = tape.leaf(Tensor::new(vec![s_count], onehot));
        let vals = qmdp_action_values(&mut tape, q, b).unwrap();
        assert_eq!(tape.value(vals).shape(), &[1, a_count]);
        for a in 0..a_count {
            assert!((tape.value(vals).data()[a] - q_data[7 * a_count + a]).abs() < 1e-12);
        }

        let mut two = vec![0.0; s_count];
        two[2] = 0.5;
        two[9] = 0.5;
        let b2 = tape.leaf(Tensor::new(vec![s_count], two));
        let vals2 = qmdp_action_values(&mut tape, q, b2).unwrap();
        for a in 0..a_count {
            let want = 0.5 * (q_data[2 * a_count + a] + q_data[9 * a_count + a]);
            assert!((tape.value(vals2).data()[a] - want).abs() < 1e-12);
        }

        let raw: Vec<f64> = (0..s_count).map(|_| rng.gen_range(0.01..1.0)).collect();
        let b3 = tape.leaf(Tensor::new(vec![s_count], raw.clone()));
        let b4 = tape.leaf(Tensor::new(vec![s_count], raw.iter().map(|v| v * 7.3).collect()));
        let v3 = qmdp_action_values(&mut tape, q, b3).unwrap();
        let v4 = qmdp_action_values(&mut tape, q, b4).unwrap();
        assert_eq!(
            argmax_action(tape.value(v3).data()),
            argmax_action(tape.value(v4).data()),
            "argmax must ignore belief scaling"
        );
    }

    #[test]
    fn planner_composition_passes_gradient_check() {
        let map = generate_environment(4, 5, 0).unwrap();
        let table = kernel_table(&map);
        let img = map_image(&map);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = ParamMap::new();
        init_transition_hom(&mut params, &mut rng);
        init_conv(&mut params, "reward.conv1", 3, 3, 3, &mut rng);
        init_conv(&mut params, "reward.head", 3, 4 * N_ACTIONS, 1, &mut rng);
        // Nudge the conv biases off zero: an all-zero input patch would
        // otherwise put relu pre-activations exactly at their kink, where
        // finite differences disagree with the subgradient.
        for name in ["reward.conv1.b", "reward.head.b"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = rng.gen_range(0.05..0.3);
            }
        }
        let mut belief = Tensor::zeros(vec![5, 5, 4]);
        for &(x, y) in &map.free_cells(true) {
            for th in 0..4 {
                belief.data_mut()[(y * 5 + x) * 4 + th] = rng.gen_range(0.1..1.0);
            }
        }
        let total: f64 = belief.data().iter().sum();
        for v in belief.data_mut() {
            *v /= total;
        }
        let readout: Vec<f64> = (0..N_ACTIONS).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let f = move |tape: &mut Tape, ids: &BTreeMap<String, NodeId>| {
            let kernel = transition_kernel_hom(tape, ids)?;
            let img_node = tape.leaf(img.clone());
            let rewards = reward_model_nodes(tape, ids, img_node, 5)?;
            let mask = goal_mask_leaf(tape, &map);
            let q = value_iteration_grid(
                tape,
                kernel,
                TransitionParam::Homogeneous,
                &table,
                &rewards,
                mask,
                4,
                Backup::Soft { temperature: 1.0 },
            )?;
            let b = tape.leaf(belief.clone());
            let vals = qmdp_action_values(tape, q, b)?;
            let w = tape.leaf(Tensor::new(vec![1, N_ACTIONS], readout.clone()));
            let weighted = tape.mul(vals, w)?;
            tape.sum(weighted, None)
        };
        let err = gradient_check(&f, &params, 1e-5).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn replanning_routes_around_an_unmapped_obstacle() {
        let base = GridMap::open(5, (4, 2), 99);
        let true_map = base.with_extra_furniture(&[(2, 2)]);
        let plan = |m: &GridMap| -> Tensor {
            let mut tape = Tape::new();
            let kernel = tape.leaf(true_kernel_hom());
            let table = kernel_table(m);
            let rewards = true_reward_nodes(&mut tape, m);
            let mask = goal_mask_leaf(&mut tape, m);
            let q = value_iteration_grid(
                &mut tape,
                kernel,
                TransitionParam::Homogeneous,
                &table,
                &rewards,
                mask,
                60,
                Backup::Hard,
            )
            .unwrap();
            tape.value(q).clone()
        };
        let mut working = base.clone();
        let mut qv = plan(&working);
        let mut s = State::new(0, 2, 1); // facing east, straight at the obstacle
        let mut steps = 0;
        let mut replans = 0;
        loop {
            let obs = observe(&true_map, s, true);
            if let Some((updated, q2)) =
                replan_on_obstacle(&working, s, obs, |m| Ok(plan(m))).unwrap()
            {
                working = updated;
                qv = q2;
                replans += 1;
            }
            let row = s.index(5) * N_ACTIONS;
            let a = argmax_action(&qv.data()[row..row + N_ACTIONS]);
            let out = step(&true_map, s, a, true).unwrap();
            assert!(!out.collided, "collided at step {steps}");
            s = out.state;
            steps += 1;
            if out.done {
                break;
            }
            assert!(steps < 40, "never reached the goal");
        }
        assert!(replans >= 1, "the obstacle was never noticed");
        assert!(!base.furniture_at(2, 2), "original map was modified");
        // A consistent observation must not trigger planning.
        let nop = replan_on_obstacle(&base, State::new(0, 2, 1), [0, 0, 0], |_| {
            panic!("planned without a map update")
        })
        .unwrap();
        assert!(nop.is_none());
        // Facing out of the grid, the implied cells are ignored.
        let edge = replan_on_obstacle(&base, State::new(4, 2, 1), [1, 1, 1], |_| {
            panic!("planned on out-of-grid cells")
        })
        .unwrap();
        assert!(edge.is_none());
    }

    #[test]
    fn standard_configs_follow_the_variant_table() {
        let c = PlannerConfig::standard(PlannerVariant::ViStar, true);
        assert_eq!(c.transition, TransitionParam::Heterogeneous);
        assert_eq!((c.horizon, c.backup), (H_LONG, Backup::Hard));
        assert!(!c.replans());

        let c = PlannerConfig::standard(PlannerVariant::Vi, false);
        assert_eq!(c.transition, TransitionParam::Homogeneous);
        assert_eq!(c.horizon, H_DEFAULT_DAN);
        assert_eq!(c.backup, Backup::Soft { temperature: SOFT_TEMPERATURE });

        let c = PlannerConfig::standard(PlannerVariant::Vi, true);
        assert_eq!(c.transition, TransitionParam::Heterogeneous);
        assert_eq!((c.horizon, c.backup), (H_LONG, Backup::Hard));

        assert_eq!(PlannerConfig::standard(PlannerVariant::ViShort, true).horizon, H_SHORT);
        let c = PlannerConfig::standard(PlannerVariant::ViShortHom, false);
        assert_eq!((c.transition, c.horizon), (TransitionParam::Homogeneous, H_SHORT));
        assert_eq!(PlannerConfig::standard(PlannerVariant::ViHom, true).transition, TransitionParam::Homogeneous);
        assert!(PlannerConfig::standard(PlannerVariant::ViRepl, true).replans());

        let names = format!(
            "{} {} {} {} {} {}",
            PlannerVariant::Vi,
            PlannerVariant::ViStar,
            PlannerVariant::ViShort,
            PlannerVariant::ViHom,
            PlannerVariant::ViShortHom,
            PlannerVariant::ViRepl,
        );
        assert_eq!(names, "VI VI* VI-short VI-hom VI-short-hom VI-repl");
    }

    #[test]
    fn displacement_kernel_can_express_the_exact_pomdp() {
        let p = make_puddle_pomdp();
        let mut params = ParamMap::new();
        init_puddle_kernel(&mut params, p.n_actions);
        {
            // d = (dy+1)*3 + (dx+1): stay = 4, right = 5, down = 7.
            let logits = params.get_mut("puddle.k_logits").unwrap();
            for v in logits.data_mut() {
                *v = -50.0;
            }
            logits.data_mut()[PP_RIGHT * N_DISPLACEMENTS + 5] = (1.0 - PP_FAIL).ln();
            logits.data_mut()[PP_RIGHT * N_DISPLACEMENTS + 4] = PP_FAIL.ln();
            logits.data_mut()[PP_DOWN * N_DISPLACEMENTS + 7] = (1.0 - PP_FAIL).ln();
            logits.data_mut()[PP_DOWN * N_DISPLACEMENTS + 4] = PP_FAIL.ln();
        }
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let mats = puddle_kernel_t(&mut tape, &ids, 2, 2, &p.terminal).unwrap();
        for (a, &m) in mats.iter().enumerate() {
            let tv = tape.value(m);
            for s in 0..p.n_states {
                for s2 in 0..p.n_states {
                    let want = p.t(s, a, s2);
                    let got = tv.data()[s * p.n_states + s2];
                    assert!(
                        (got - want).abs() < 1e-12,
                        "action {a}: T({s2}|{s}) = {got}, true {want}"
                    );
                }
            }
        }
        assert!((stay_probability(tape.value(mats[PP_RIGHT]), PP_A) - PP_FAIL).abs() < 1e-12);
    }

    #[test]
    fn tabular_logits_split_into_per_action_rows() {
        let (s_count, a_count) = (4usize, 3usize);
        let mut params = ParamMap::new();
        init_puddle_tabular(&mut params, s_count, a_count);
        {
            let logits = params.get_mut("puddle.t_logits").unwrap();
            for s in 0..s_count {
                for a in 0..a_count {
                    logits.data_mut()[((s * a_count + a) * s_count) + (s + a) % s_count] = 10.0;
                }
            }
        }
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let mats = puddle_tabular_t(&mut tape, &ids, s_count, a_count).unwrap();
        for (a, &m) in mats.iter().enumerate() {
            let tv = tape.value(m);
            assert_eq!(tv.shape(), &[s_count, s_count]);
            for s in 0..s_count {
                let row = &tv.data()[s * s_count..(s + 1) * s_count];
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-12, "row must stay normalized");
                assert_eq!(argmax_action(row), (s + a) % s_count);
                assert!(row[(s + a) % s_count] > 0.99);
            }
        }
    }

    #[test]
    fn reward_model_reads_channels_orientation_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamMap::new();
        init_conv(&mut params, "reward.conv1", 3, 2, 3, &mut rng);
        init_conv(&mut params, "reward.head", 2, 4 * N_ACTIONS, 1, &mut rng);
        for name in ["reward.conv1.w", "reward.conv1.b", "reward.head.w"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        for (c, v) in params.get_mut("reward.head.b").unwrap().data_mut().iter_mut().enumerate() {
            *v = c as f64;
        }
        let map = GridMap::open(3, (2, 2), 0);
        let mut tape = Tape::new();
        let ids = tape.params_from(&params);
        let img = tape.leaf(map_image(&map));
        let rewards = reward_model_nodes(&mut tape, &ids, img, 3).unwrap();
        for (a, &r) in rewards.iter().enumerate() {
            let rv = tape.value(r);
            assert_eq!(rv.shape(), &[3, 3, 4]);
            for cell in 0..9 {
                for th in 0..4 {
                    assert_eq!(rv.data()[cell * 4 + th], (th * N_ACTIONS + a) as f64);
                }
            }
        }
    }
}
