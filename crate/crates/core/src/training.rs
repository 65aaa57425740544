//! End-to-end imitation training over composed differentiable modules.
//!
//! A composition chains an optional belief filter, a value-iteration planner,
//! and an optional recurrent controller; modules marked trainable are
//! optimized jointly by weighted negative log-likelihood of expert actions
//! under teacher forcing. Training is deterministic given the seed: data
//! order, initial beliefs, and every update depend only on seeded generators
//! and a fixed reduction order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{controller_state_init, init_controller, lstm_controller_step, ControllerState};
use crate::env::{
    is_validation_env, make_puddle_mdp, make_puddle_pomdp, obs_index, sample_initial_belief,
    BeliefMode, DemoStep, GridMap, PuddleProblem, N_ACTIONS, PP_A, PP_DOWN, PP_RIGHT,
};
use crate::error::{DanError, Result};
use crate::filter::{
    belief_interface, correct, init_transition_het, init_transition_hom, init_zmodel,
    kernel_table, learned_likelihood, map_image, predict, transition_kernel_het,
    transition_kernel_hom, zmodel_map_features, BeliefVariant, TransitionParam, ZModelConfig,
    TRANS_HIDDEN,
};
use crate::nn::{accumulate_param_grads, param_leaves, NodeMap, ParamMap, RmsProp};
use crate::planner::{
    argmax_action, expected_reward_leaves, goal_mask_leaf, init_puddle_kernel,
    init_puddle_tabular, init_rmodel, planner_kernel_table, puddle_kernel_t, puddle_tabular_t,
    qmdp_action_values, reward_model_nodes, stay_probability, terminal_mask_leaf,
    true_transition_leaves, value_iteration_grid, value_iteration_tabular, Backup, PlannerConfig,
    REWARD_HIDDEN,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── Tasks and schedules ─────────────────────────────────────────────────────

/// Initial-belief regime of one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageBeliefs {
    /// Every episode starts with a delta belief on the true state.
    Certain,
    /// Per episode, a fair coin picks a uniform belief over a random quarter
    /// of the free states or over all of them (the true state always in
    /// support).
    Mixed,
}

impl StageBeliefs {
    pub(crate) fn sample_mode(self, rng: &mut ChaCha8Rng) -> BeliefMode {
        match self {
            StageBeliefs::Certain => BeliefMode::Certain,
            StageBeliefs::Mixed => {
                if rng.gen_bool(0.5) {
                    BeliefMode::RandomSubset
                } else {
                    BeliefMode::AllStates
                }
            }
        }
    }
}

/// Navigation task family. `A` is fully observed on a known map, `B` adds
/// partial observability, `D` adds unmapped obstacles that the sensor sees
/// but the map given to the filter and planner does not contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    A,
    B,
    D,
}

impl Task {
    /// Unmapped obstacles placed per environment when generating data.
    pub fn furniture_count(self) -> usize {
        match self {
            Task::D => 3,
            _ => 0,
        }
    }

    /// Steps between gradient truncation points (longer with obstacles, so
    /// recovery behaviour fits inside one window).
    pub fn bptt(self) -> usize {
        match self {
            Task::D => 8,
            _ => 4,
        }
    }

    pub fn lr(self) -> f64 {
        match self {
            Task::D => 5e-4,
            _ => 1e-3,
        }
    }

    /// Curriculum stages: uncertain-belief tasks warm up with certain starts
    /// before mixing in uninformed ones; fully observed training needs one
    /// stage only.
    pub fn stages(self) -> &'static [StageBeliefs] {
        match self {
            Task::A => &[StageBeliefs::Certain],
            _ => &[StageBeliefs::Certain, StageBeliefs::Mixed],
        }
    }
}

/// Optimization schedule. The learning rate decays by `decay` each time the
/// validation loss stalls — `patience_first` non-improving epochs for the
/// first decay, `patience_later` for each later one — and training stops when
/// a decay beyond `max_decays` would fire.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub lr: f64,
    /// Trajectory segments per optimizer update.
    pub batch_segments: usize,
    /// Steps between gradient truncation points.
    pub bptt: usize,
    pub patience_first: usize,
    pub patience_later: usize,
    pub decay: f64,
    pub max_decays: usize,
    pub max_epochs: usize,
}

impl TrainSchedule {
    pub fn for_task(task: Task) -> TrainSchedule {
        TrainSchedule {
            lr: task.lr(),
            batch_segments: 100,
            bptt: task.bptt(),
            patience_first: 15,
            patience_later: 5,
            decay: 0.8,
            max_decays: 5,
            max_epochs: 500,
        }
    }
}

// ── Early stopping ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    DecayLr,
    Stop,
}

/// Validation-loss schedule state. Feed one loss per epoch; staleness resets
/// on every strict improvement and on every decay. The caller keeps a copy of
/// the best parameters and restores them when training ends.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience_first: usize,
    patience_later: usize,
    max_decays: usize,
    best: f64,
    best_epoch: usize,
    decays: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStop {
    pub fn new(patience_first: usize, patience_later: usize, max_decays: usize) -> EarlyStop {
        EarlyStop {
            patience_first,
            patience_later,
            max_decays,
            best: f64::INFINITY,
            best_epoch: 0,
            decays: 0,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn for_schedule(schedule: &TrainSchedule) -> EarlyStop {
        EarlyStop::new(schedule.patience_first, schedule.patience_later, schedule.max_decays)
    }

    /// Lowest validation loss seen so far.
    pub fn best(&self) -> f64 {
        self.best
    }

    /// Zero-based epoch index of the best validation loss.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Record one epoch's validation loss and return the schedule decision.
    pub fn record(&mut self, val_loss: f64) -> StopDecision {
        let epoch = self.epoch;
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Continue;
        }
        self.stale += 1;
        let patience =
            if self.decays == 0 { self.patience_first } else { self.patience_later };
        if self.stale >= patience {
            self.stale = 0;
            if self.decays == self.max_decays {
                return StopDecision::Stop;
            }
            self.decays += 1;
            return StopDecision::DecayLr;
        }
        StopDecision::Continue
    }
}

// ── Compositions ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FilterSpec {
    pub variant: BeliefVariant,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct PlannerSpec {
    pub config: PlannerConfig,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlSpec {
    /// Execute the argmax action value directly.
    Argmax,
    /// Low-level turn/forward state machine, applied at execution time only;
    /// training (if any) scores the raw action values.
    StateMachine,
    /// Recurrent controller adding residual action values.
    Lstm { trainable: bool },
}

/// An ordered module chain — optional filter, planner, optional controller —
/// with per-module trainability. Frozen modules run forward as usual but the
/// optimizer never touches their parameters; transition parameters are shared
/// between the filter's prediction step and the planner's backups.
#[derive(Debug, Clone)]
pub struct Composition {
    pub task: Task,
    pub filter: Option<FilterSpec>,
    pub planner: PlannerSpec,
    pub control: ControlSpec,
}

impl Composition {
    /// Parameter-name prefixes the optimizer is allowed to update.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.filter.as_ref().is_some_and(|f| f.trainable) {
            out.push("zmodel.");
            out.push("trans.");
        }
        if self.planner.trainable {
            out.push("trans.");
            out.push("reward.");
        }
        if let ControlSpec::Lstm { trainable: true } = self.control {
            out.push("ctrl.");
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn is_trainable_param(&self, name: &str) -> bool {
        self.trainable_prefixes().iter().any(|p| name.starts_with(p))
    }

    pub fn any_trainable(&self) -> bool {
        !self.trainable_prefixes().is_empty()
    }
}

/// Fresh parameters for every module the composition runs, in a fixed order
/// so equal seeds give equal initializations.
pub fn init_composition_params(comp: &Composition, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    match comp.planner.config.transition {
        TransitionParam::Homogeneous => init_transition_hom(&mut params, &mut rng),
        TransitionParam::Heterogeneous => init_transition_het(&mut params, TRANS_HIDDEN, &mut rng),
    }
    init_rmodel(&mut params, REWARD_HIDDEN, &mut rng);
    if comp.filter.is_some() {
        init_zmodel(&mut params, ZModelConfig::default(), &mut rng);
    }
    if matches!(comp.control, ControlSpec::Lstm { .. }) {
        init_controller(&mut params, &mut rng);
    }
    params
}

// ── Datasets ────────────────────────────────────────────────────────────────

/// Demonstrations for one environment: the full map the data was recorded on
/// (furniture included) plus its teacher-forcing trajectories. The filter and
/// planner always see the map without furniture.
#[derive(Debug, Clone)]
pub struct EnvData {
    pub map: GridMap,
    pub trajectories: Vec<Vec<DemoStep>>,
}

pub type Dataset = Vec<EnvData>;

/// Split by environment seed; seeds ending in 9 are held out for validation.
pub fn split_dataset(data: &Dataset) -> (Dataset, Dataset) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for e in data {
        if is_validation_env(e.map.seed) {
            val.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, val)
}

/// Mean per-step loss of a policy that picks uniformly at random; the bar a
/// trained stage must beat.
pub fn uniform_policy_loss() -> f64 {
    (N_ACTIONS as f64).ln()
}

// ── Imitation loss ──────────────────────────────────────────────────────────

/// Loss weight on steps flagged as obstacle avoidance.
pub const AVOID_WEIGHT: f64 = 10.0;

/// weight · (− log softmax(action_values)[expert_action]).
pub fn imitation_loss(
    tape: &mut Tape,
    action_values: NodeId,
    expert_action: usize,
    weight: f64,
) -> Result<NodeId> {
    let width = tape.value(action_values).len();
    if expert_action >= width {
        return Err(DanError::Config(format!(
            "expert action {expert_action} out of range for {width} action values"
        )));
    }
    let logp = tape.log_softmax(action_values, 1)?;
    let picked = tape.gather(logp, Arc::new(vec![expert_action as u32]), vec![1, 1])?;
    let s = tape.sum(picked, None)?;
    tape.scale(s, -weight)
}

// ── Seed streams ────────────────────────────────────────────────────────────

const SHUFFLE_STREAM: u64 = 0x51;
const BELIEF_STREAM: u64 = 0xB5;
const DEMO_STREAM: u64 = 0xDE;
pub(crate) const EVAL_STREAM: u64 = 0xEA;

/// FNV-1a over the little-endian bytes of the parts: one deterministic seed
/// per (purpose, stage, epoch, environment, trajectory) coordinate.
pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &p in parts {
        for b in p.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Seed for one trajectory's initial-belief draw. `epoch_tag` is 0 for
/// validation (fixed across epochs) and epoch+1 for training.
pub(crate) fn episode_belief_seed(
    seed: u64,
    stage_idx: usize,
    epoch_tag: u64,
    env_seed: u64,
    traj_idx: usize,
) -> u64 {
    stream_seed(&[seed, BELIEF_STREAM, stage_idx as u64, epoch_tag, env_seed, traj_idx as u64])
}

// ── Forward machinery ───────────────────────────────────────────────────────

/// Per-environment graph shared by all of the environment's trajectories on
/// one tape: the planner's action values, the transition kernels, and the
/// map-conditioned observation features.
pub(crate) struct EnvGraph {
    pub(crate) n: usize,
    pub(crate) q: NodeId,
    pub(crate) filter_kernel: NodeId,
    pub(crate) table: Arc<crate::tape::KernelTable>,
    pub(crate) zfeat: Option<NodeId>,
}

pub(crate) fn build_env_graph(
    tape: &mut Tape,
    ids: &NodeMap,
    comp: &Composition,
    known: &GridMap,
) -> Result<EnvGraph> {
    let n = known.n;
    let img = tape.leaf(map_image(known));
    let table = kernel_table(known);
    let planner_table = planner_kernel_table(known, comp.planner.config.transition);
    let kernel = match comp.planner.config.transition {
        TransitionParam::Homogeneous => transition_kernel_hom(tape, ids)?,
        TransitionParam::Heterogeneous => transition_kernel_het(tape, ids, img, n)?,
    };
    let rewards = reward_model_nodes(tape, ids, img, n)?;
    let goal_mask = goal_mask_leaf(tape, known);
    let q = value_iteration_grid(
        tape,
        kernel,
        comp.planner.config.transition,
        &planner_table,
        &rewards,
        goal_mask,
        comp.planner.config.horizon,
        comp.planner.config.backup,
    )?;
    // Frozen modules keep their forward values but stop gradients, which also
    // spares the backward pass the walk through their graphs.
    let q = if comp.planner.trainable { q } else { tape.stop_grad(q)? };
    let filter_trainable = comp.filter.as_ref().is_some_and(|f| f.trainable);
    let filter_kernel = if filter_trainable { kernel } else { tape.stop_grad(kernel)? };
    let zfeat = match comp.filter {
        Some(_) => Some(zmodel_map_features(tape, ids, img)?),
        None => None,
    };
    Ok(EnvGraph { n, q, filter_kernel, table, zfeat })
}

struct TrajRun {
    loss: NodeId,
    steps: usize,
}

/// Teacher-forced pass over one trajectory. The belief starts from the
/// episode's true initial belief, is corrected with each recorded observation
/// before acting, scored against the expert action, then advanced with the
/// executed action. Every `bptt` steps the belief (and controller state)
/// values are carried across a stop-gradient, so updates see truncated
/// windows while the forward values match an untruncated run exactly.
#[allow(clippy::too_many_arguments)]
fn forward_trajectory(
    tape: &mut Tape,
    ids: &NodeMap,
    comp: &Composition,
    g: &EnvGraph,
    traj: &[DemoStep],
    init_belief: Option<&Tensor>,
    bptt: usize,
    weighted: bool,
    z_cache: &mut BTreeMap<usize, NodeId>,
) -> Result<TrajRun> {
    let filter = comp.filter.as_ref();
    let mut belief: Option<NodeId> = match (filter, init_belief) {
        (Some(_), Some(b0)) => Some(tape.leaf(b0.clone())),
        (None, _) => None,
        (Some(_), None) => {
            return Err(DanError::Config("a filter composition needs an initial belief".into()))
        }
    };
    let mut ctrl = match comp.control {
        ControlSpec::Lstm { .. } => Some(controller_state_init(tape)),
        _ => None,
    };
    let mut loss: Option<NodeId> = None;
    for (t, d) in traj.iter().enumerate() {
        if t > 0 && t % bptt == 0 {
            if let Some(b) = belief {
                belief = Some(tape.stop_grad(b)?);
            }
            if let Some(cs) = &ctrl {
                let h = tape.stop_grad(cs.h)?;
                let c = tape.stop_grad(cs.c)?;
                ctrl = Some(ControllerState { h, c, last_action: cs.last_action });
            }
        }
        let scored_belief = match (filter, belief) {
            (Some(f), Some(b)) => {
                let key = obs_index(d.obs);
                let z = match z_cache.get(&key) {
                    Some(&z) => z,
                    None => {
                        let zf = g.zfeat.expect("filter graph carries map features");
                        let mut z =
                            learned_likelihood(tape, ids, zf, d.obs, ZModelConfig::default(), g.n)?;
                        if !f.trainable {
                            z = tape.stop_grad(z)?;
                        }
                        z_cache.insert(key, z);
                        z
                    }
                };
                let bc = correct(tape, b, z)?;
                belief = Some(bc);
                belief_interface(tape, bc, f.variant)?
            }
            // Fully observed: a delta belief on the recorded true state.
            _ => {
                let mut one = Tensor::zeros(vec![g.n, g.n, 4]);
                one.data_mut()[d.state().index(g.n)] = 1.0;
                tape.leaf(one)
            }
        };
        let mut values = qmdp_action_values(tape, g.q, scored_belief)?;
        if let (ControlSpec::Lstm { .. }, Some(cs)) = (comp.control, &ctrl) {
            let (out, mut next) = lstm_controller_step(tape, ids, d.obs, values, cs)?;
            next.last_action = Some(d.action);
            values = out;
            ctrl = Some(next);
        }
        let weight = if weighted && d.avoid_flag { AVOID_WEIGHT } else { 1.0 };
        let li = imitation_loss(tape, values, d.expert_action, weight)?;
        loss = Some(match loss {
            None => li,
            Some(acc) => tape.add(acc, li)?,
        });
        if t + 1 < traj.len() {
            if let Some(b) = belief {
                belief = Some(predict(
                    tape,
                    b,
                    d.action,
                    g.filter_kernel,
                    comp.planner.config.transition,
                    &g.table,
                )?);
            }
        }
    }
    match loss {
        Some(loss) => Ok(TrajRun { loss, steps: traj.len() }),
        None => Err(DanError::Config("empty trajectory".into())),
    }
}

fn is_numeric_blowup(e: &DanError) -> bool {
    matches!(e, DanError::NonFinite { .. } | DanError::DegenerateBelief { .. })
}

pub(crate) fn apply_batch(opt: &mut RmsProp, params: &mut ParamMap, acc: &mut ParamMap, steps: usize) {
    if steps > 0 && !acc.is_empty() {
        let inv = 1.0 / steps as f64;
        for g in acc.values_mut() {
            for v in g.data_mut() {
                *v *= inv;
            }
        }
        opt.step(params, acc);
    }
    acc.clear();
}

/// Loss, step/segment counts, and (when training) gradients from one
/// environment's shared-tape forward pass.
struct EnvPass {
    loss: f64,
    steps: usize,
    grads: Option<ParamMap>,
}

/// Forward (and optionally backward) pass over one environment on its own
/// tape. Pure given the parameter values, so batches can fan out over
/// environments; the caller folds results in dataset order to keep every
/// float identical to a sequential pass.
#[allow(clippy::too_many_arguments)]
fn env_pass(
    comp: &Composition,
    params: &ParamMap,
    env: &EnvData,
    schedule: &TrainSchedule,
    beliefs: StageBeliefs,
    stage_idx: usize,
    seed: u64,
    epoch: usize,
    with_grads: bool,
) -> Result<Option<EnvPass>> {
    let known = env.map.without_furniture();
    let mut tape = Tape::new();
    let ids = param_leaves(&mut tape, params);
    let g = build_env_graph(&mut tape, &ids, comp, &known)?;
    let mut z_cache = BTreeMap::new();
    let mut env_loss: Option<NodeId> = None;
    let mut env_steps = 0usize;
    for (ti, traj) in env.trajectories.iter().enumerate() {
        if traj.is_empty() {
            continue;
        }
        let init_belief = match comp.filter {
            Some(_) => {
                let mut brng = ChaCha8Rng::seed_from_u64(episode_belief_seed(
                    seed,
                    stage_idx,
                    epoch as u64 + 1,
                    env.map.seed,
                    ti,
                ));
                let mode = beliefs.sample_mode(&mut brng);
                Some(sample_initial_belief(&mut brng, mode, &known, traj[0].state())?)
            }
            None => None,
        };
        let run = forward_trajectory(
            &mut tape,
            &ids,
            comp,
            &g,
            traj,
            init_belief.as_ref(),
            schedule.bptt,
            true,
            &mut z_cache,
        )?;
        env_steps += run.steps;
        env_loss = Some(match env_loss {
            None => run.loss,
            Some(a) => tape.add(a, run.loss)?,
        });
    }
    let Some(env_loss) = env_loss else { return Ok(None) };
    let lv = tape.value(env_loss).item();
    if !lv.is_finite() {
        return Err(DanError::NonFinite { primitive: "training loss" });
    }
    let grads = if with_grads {
        let raw = tape.backward(env_loss)?;
        let mut acc = ParamMap::new();
        accumulate_param_grads(&mut acc, params, &ids, &raw, |name| {
            comp.is_trainable_param(name)
        });
        Some(acc)
    } else {
        None
    };
    Ok(Some(EnvPass { loss: lv, steps: env_steps, grads }))
}

/// Number of truncation segments an environment contributes, matching what
/// `forward_trajectory` reports: one segment per started `bptt` window.
fn env_segment_count(env: &EnvData, bptt: usize) -> usize {
    env.trajectories
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| 1 + (t.len() - 1) / bptt)
        .sum()
}

/// One pass over the training environments in a seeded shuffled order,
/// applying an optimizer update per `batch_segments` trajectory segments
/// (batch boundaries fall on environment boundaries; each environment shares
/// one tape so its planner graph is built once). Environments within a batch
/// all read the same parameter snapshot, so they are evaluated in parallel
/// and their gradients folded in order — bit-identical to a sequential pass
/// for any worker count. Returns the weighted mean per-step training loss.
#[allow(clippy::too_many_arguments)]
fn run_train_epoch(
    comp: &Composition,
    params: &mut ParamMap,
    train: &Dataset,
    schedule: &TrainSchedule,
    beliefs: StageBeliefs,
    stage_idx: usize,
    seed: u64,
    epoch: usize,
    opt: &mut RmsProp,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
        seed,
        SHUFFLE_STREAM,
        stage_idx as u64,
        epoch as u64,
    ]));
    order.shuffle(&mut shuffle_rng);

    // Group the shuffled environments into optimizer batches up front; the
    // segment counts depend only on trajectory lengths.
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_segments = 0usize;
    for &ei in &order {
        let segs = env_segment_count(&train[ei], schedule.bptt);
        if segs == 0 {
            continue;
        }
        current.push(ei);
        current_segments += segs;
        if current_segments >= schedule.batch_segments {
            batches.push(std::mem::take(&mut current));
            current_segments = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }

    let trainable = comp.any_trainable();
    let mut loss_sum = 0.0f64;
    let mut step_sum = 0usize;
    for batch in &batches {
        let passes: Vec<Result<Option<EnvPass>>> = crate::par::par_map_slice(batch, |&ei| {
            env_pass(
                comp, params, &train[ei], schedule, beliefs, stage_idx, seed, epoch, trainable,
            )
        });
        let mut acc = ParamMap::new();
        let mut acc_steps = 0usize;
        for pass in passes {
            let Some(pass) = pass? else { continue };
            loss_sum += pass.loss;
            step_sum += pass.steps;
            acc_steps += pass.steps;
            if let Some(grads) = pass.grads {
                for (name, g) in grads {
                    match acc.get_mut(&name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
        }
        if trainable {
            apply_batch(opt, params, &mut acc, acc_steps);
        }
    }
    if step_sum == 0 {
        return Err(DanError::Training {
            stage: format!("stage {stage_idx}"),
            reason: "no training steps in dataset".into(),
        });
    }
    Ok(loss_sum / step_sum as f64)
}

/// Unweighted mean per-step negative log-likelihood of the expert actions
/// over a dataset, with initial beliefs drawn from the stage's fixed
/// validation stream. Also serves as an untruncated reference evaluator.
pub fn dataset_loss(
    comp: &Composition,
    params: &ParamMap,
    data: &Dataset,
    beliefs: StageBeliefs,
    stage_idx: usize,
    seed: u64,
) -> Result<f64> {
    let passes: Vec<Result<(f64, usize)>> = crate::par::par_map_slice(data, |env| {
        let mut total = 0.0f64;
        let mut steps = 0usize;
        let known = env.map.without_furniture();
        let mut tape = Tape::new();
        let ids = param_leaves(&mut tape, params);
        let g = build_env_graph(&mut tape, &ids, comp, &known)?;
        let mut z_cache = BTreeMap::new();
        for (ti, traj) in env.trajectories.iter().enumerate() {
            if traj.is_empty() {
                continue;
            }
            let init_belief = match comp.filter {
                Some(_) => {
                    let mut brng = ChaCha8Rng::seed_from_u64(episode_belief_seed(
                        seed,
                        stage_idx,
                        0,
                        env.map.seed,
                        ti,
                    ));
                    let mode = beliefs.sample_mode(&mut brng);
                    Some(sample_initial_belief(&mut brng, mode, &known, traj[0].state())?)
                }
                None => None,
            };
            let run = forward_trajectory(
                &mut tape,
                &ids,
                comp,
                &g,
                traj,
                init_belief.as_ref(),
                usize::MAX,
                false,
                &mut z_cache,
            )?;
            total += tape.value(run.loss).item();
            steps += run.steps;
        }
        Ok((total, steps))
    });
    let mut total = 0.0f64;
    let mut steps = 0usize;
    for pass in passes {
        let (t, s) = pass?;
        total += t;
        steps += s;
    }
    if steps == 0 {
        return Err(DanError::Config("dataset has no steps to evaluate".into()));
    }
    let mean = total / steps as f64;
    if !mean.is_finite() {
        return Err(DanError::NonFinite { primitive: "validation loss" });
    }
    Ok(mean)
}

// ── Stage training ──────────────────────────────────────────────────────────

/// One epoch line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: usize,
    pub beliefs: StageBeliefs,
    pub epochs_run: usize,
    /// Validation loss before the stage's first update.
    pub start_val_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub records: Vec<TrainLogRecord>,
}

/// Train one curriculum stage to the early-stopping schedule. On a non-finite
/// loss the epoch's updates are rolled back and retried once at half the
/// learning rate; a second blowup aborts with diagnostics. The parameters are
/// left at the epoch with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn train_dan(
    comp: &Composition,
    params: &mut ParamMap,
    data: &Dataset,
    schedule: &TrainSchedule,
    beliefs: StageBeliefs,
    stage_idx: usize,
    seed: u64,
    on_epoch: &mut dyn FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<StageReport> {
    let (train, val) = split_dataset(data);
    if train.is_empty() || val.is_empty() {
        return Err(DanError::Training {
            stage: format!("stage {stage_idx}"),
            reason: format!(
                "need both training and validation environments, got {} train / {} validation",
                train.len(),
                val.len()
            ),
        });
    }
    let started = Instant::now();
    let mut opt = RmsProp::new(schedule.lr);
    let mut stopper = EarlyStop::for_schedule(schedule);
    let start_val_loss = dataset_loss(comp, params, &val, beliefs, stage_idx, seed)?;
    let mut best_params = params.clone();
    let mut records: Vec<TrainLogRecord> = Vec::new();
    let mut halved = false;
    let mut epoch = 0usize;
    while epoch < schedule.max_epochs {
        let params_snapshot = params.clone();
        let opt_snapshot = opt.v.clone();
        let outcome = run_train_epoch(
            comp, params, &train, schedule, beliefs, stage_idx, seed, epoch, &mut opt,
        )
        .and_then(|tl| {
            dataset_loss(comp, params, &val, beliefs, stage_idx, seed).map(|vl| (tl, vl))
        });
        let (train_loss, val_loss) = match outcome {
            Ok(v) => v,
            Err(e) if is_numeric_blowup(&e) => {
                *params = params_snapshot;
                opt.v = opt_snapshot;
                if halved {
                    return Err(DanError::Training {
                        stage: format!("stage {stage_idx}"),
                        reason: format!(
                            "non-finite loss recurred after halving the learning rate \
                             (epoch {epoch}, lr {:.3e}): {e}",
                            opt.lr
                        ),
                    });
                }
                halved = true;
                opt.lr *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        let prev_best = stopper.best();
        let decision = stopper.record(val_loss);
        if val_loss < prev_best {
            best_params = params.clone();
        }
        let rec = TrainLogRecord {
            stage: stage_idx,
            epoch,
            train_loss,
            val_loss,
            lr: opt.lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&rec)?;
        records.push(rec);
        epoch += 1;
        match decision {
            StopDecision::Continue => {}
            StopDecision::DecayLr => opt.lr *= schedule.decay,
            StopDecision::Stop => break,
        }
    }
    *params = best_params;
    Ok(StageReport {
        stage: stage_idx,
        beliefs,
        epochs_run: epoch,
        start_val_loss,
        best_val_loss: stopper.best(),
        best_epoch: stopper.best_epoch(),
        records,
    })
}

/// Run every curriculum stage of the composition's task in order, warm-
/// starting each stage from the last. A stage whose best validation loss does
/// not beat a uniform random policy aborts the run. Epoch records stream to
/// `log_path` as JSON lines when given.
pub fn run_curriculum(
    comp: &Composition,
    params: &mut ParamMap,
    data: &Dataset,
    schedule: &TrainSchedule,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<Vec<StageReport>> {
    let mut writer = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut on_epoch = move |rec: &TrainLogRecord| -> Result<()> {
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    };
    let uniform = uniform_policy_loss();
    let mut reports = Vec::new();
    for (stage_idx, &beliefs) in comp.task.stages().iter().enumerate() {
        let report =
            train_dan(comp, params, data, schedule, beliefs, stage_idx, seed, &mut on_epoch)?;
        if !(report.best_val_loss < uniform) {
            return Err(DanError::Training {
                stage: format!("stage {stage_idx}"),
                reason: format!(
                    "best validation loss {:.4} does not beat a uniform policy ({:.4})",
                    report.best_val_loss, uniform
                ),
            });
        }
        reports.push(report);
    }
    Ok(reports)
}

// ── Tabular puddle training ─────────────────────────────────────────────────

/// Draw from a distribution slice by inverse CDF.
fn sample_dist(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Exact action values of a tabular problem under its true model.
fn puddle_true_q(p: &PuddleProblem, backup: Backup, horizon: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = true_transition_leaves(&mut tape, p);
    let r = expected_reward_leaves(&mut tape, p);
    let mask = terminal_mask_leaf(&mut tape, p);
    let q = value_iteration_tabular(&mut tape, &t, &r, mask, horizon, backup, p.discount)?;
    Ok(tape.value(q).clone())
}

fn true_transition_tensors(p: &PuddleProblem) -> Vec<Tensor> {
    (0..p.n_actions)
        .map(|a| {
            let mut t = Tensor::zeros(vec![p.n_states, p.n_states]);
            for s in 0..p.n_states {
                for s2 in 0..p.n_states {
                    t.data_mut()[s * p.n_states + s2] = p.t(s, a, s2);
                }
            }
            t
        })
        .collect()
}

/// Greedy rollout through deterministic true dynamics under the given action
/// values. Returns the discounted return and the visited (state, action)
/// pairs.
fn greedy_mdp_rollout(
    p: &PuddleProblem,
    q: &Tensor,
    start: usize,
    cap: usize,
) -> (f64, Vec<(usize, usize)>) {
    let mut s = start;
    let mut ret = 0.0;
    let mut disc = 1.0;
    let mut path = Vec::new();
    for _ in 0..cap {
        if p.terminal[s] {
            break;
        }
        let row = &q.data()[s * p.n_actions..(s + 1) * p.n_actions];
        let a = argmax_action(row);
        let s2 = (0..p.n_states)
            .max_by(|&i, &j| p.t(s, a, i).partial_cmp(&p.t(s, a, j)).expect("finite"))
            .expect("nonempty state space");
        ret += disc * p.r(s, a, s2);
        disc *= p.discount;
        path.push((s, a));
        s = s2;
    }
    (ret, path)
}

/// Expert (state, action) pairs for the deterministic grid problem: greedy
/// with respect to near-converged true values, from every start that is
/// neither terminal nor absorbing.
fn puddle_mdp_demos(p: &PuddleProblem) -> Result<Vec<(usize, usize)>> {
    let q = puddle_true_q(p, Backup::Hard, 600)?;
    let absorbing: Vec<bool> = (0..p.n_states)
        .map(|s| (0..p.n_actions).all(|a| p.t(s, a, s) == 1.0))
        .collect();
    let mut demos = Vec::new();
    for s0 in 0..p.n_states {
        if p.terminal[s0] || absorbing[s0] {
            continue;
        }
        let (_, path) = greedy_mdp_rollout(p, &q, s0, 20);
        demos.extend(path);
    }
    Ok(demos)
}

#[derive(Debug, Clone)]
pub struct PuddleMdpOutcome {
    pub params: ParamMap,
    /// Action values of the learned model under the training-time planner.
    pub q: Tensor,
    pub final_loss: f64,
    pub rollout_return: f64,
    pub rollout_states: Vec<usize>,
}

/// Fit the grid problem's tabular transition model end to end through a
/// short-horizon soft planner (horizon 4, true expected rewards frozen), by
/// imitation of greedy expert paths, then roll the greedy policy out from the
/// top-left corner under the true dynamics.
pub fn train_puddle_mdp_dan(iters: usize, lr: f64) -> Result<PuddleMdpOutcome> {
    let p = make_puddle_mdp();
    let demos = puddle_mdp_demos(&p)?;
    let mut params = ParamMap::new();
    init_puddle_tabular(&mut params, p.n_states, p.n_actions);
    let mut opt = RmsProp::new(lr);
    let mut final_loss = f64::INFINITY;

    let model_q = |params: &ParamMap| -> Result<(Tape, NodeMap, NodeId)> {
        let mut tape = Tape::new();
        let ids = param_leaves(&mut tape, params);
        let t_mats = puddle_tabular_t(&mut tape, &ids, p.n_states, p.n_actions)?;
        let r = expected_reward_leaves(&mut tape, &p);
        let mask = terminal_mask_leaf(&mut tape, &p);
        let q = value_iteration_tabular(
            &mut tape,
            &t_mats,
            &r,
            mask,
            4,
            Backup::Soft { temperature: 1.0 },
            p.discount,
        )?;
        Ok((tape, ids, q))
    };

    for _ in 0..iters {
        let (mut tape, ids, q) = model_q(&params)?;
        let mut loss: Option<NodeId> = None;
        for &(s, a) in &demos {
            let idx: Vec<u32> = (0..p.n_actions).map(|k| (s * p.n_actions + k) as u32).collect();
            let row = tape.gather(q, Arc::new(idx), vec![1, p.n_actions])?;
            let li = imitation_loss(&mut tape, row, a, 1.0)?;
            loss = Some(match loss {
                None => li,
                Some(acc) => tape.add(acc, li)?,
            });
        }
        let loss = loss.ok_or_else(|| DanError::Config("no expert pairs".into()))?;
        let mean = tape.scale(loss, 1.0 / demos.len() as f64)?;
        final_loss = tape.value(mean).item();
        let grads = tape.backward(mean)?;
        let mut acc = ParamMap::new();
        accumulate_param_grads(&mut acc, &params, &ids, &grads, |n| n.starts_with("puddle."));
        opt.step(&mut params, &acc);
    }

    let (tape, _, q) = model_q(&params)?;
    let q = tape.value(q).clone();
    let (rollout_return, path) = greedy_mdp_rollout(&p, &q, 0, 50);
    Ok(PuddleMdpOutcome {
        params,
        q,
        final_loss,
        rollout_return,
        rollout_states: path.iter().map(|&(s, _)| s).collect(),
    })
}

/// Scripted demonstration policy for the four-state problem: commit to this
/// many move-right attempts, then move down forever.
pub const PUDDLE_EXPERT_RIGHTS: usize = 4;

fn pomdp_expert_demos(p: &PuddleProblem, episodes: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..episodes)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(stream_seed(&[seed, DEMO_STREAM, i as u64]));
            let mut s = sample_dist(&p.b0, &mut rng);
            let mut actions = Vec::new();
            for t in 0..40 {
                if p.terminal[s] {
                    break;
                }
                let a = if t < PUDDLE_EXPERT_RIGHTS { PP_RIGHT } else { PP_DOWN };
                actions.push(a);
                let row = &p.transition[(s * p.n_actions + a) * p.n_states..][..p.n_states];
                s = sample_dist(row, &mut rng);
            }
            actions
        })
        .collect()
}

/// Greedy closed-loop evaluation through the true dynamics. Actions maximize
/// the belief-weighted action values (or the most-likely state's row when
/// `ml`); the belief evolves under the agent's own transition model
/// `t_model`. Returns the mean discounted return over seeded episodes.
pub fn eval_puddle_pomdp(
    p: &PuddleProblem,
    q: &Tensor,
    t_model: &[Tensor],
    ml: bool,
    episodes: usize,
    seed: u64,
) -> f64 {
    let sc = p.n_states;
    let ac = p.n_actions;
    let mut total = 0.0;
    for i in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, EVAL_STREAM, i as u64]));
        let mut s = sample_dist(&p.b0, &mut rng);
        let mut b = p.b0.clone();
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..200 {
            if p.terminal[s] {
                break;
            }
            let vals: Vec<f64> = if ml {
                let m = argmax_action(&b);
                (0..ac).map(|a| q.data()[m * ac + a]).collect()
            } else {
                (0..ac)
                    .map(|a| (0..sc).map(|k| b[k] * q.data()[k * ac + a]).sum())
                    .collect()
            };
            let a = argmax_action(&vals);
            let row = &p.transition[(s * ac + a) * sc..][..sc];
            let s2 = sample_dist(row, &mut rng);
            ret += disc * p.r(s, a, s2);
            disc *= p.discount;
            let tm = &t_model[a];
            let mut nb = vec![0.0; sc];
            for (src, &mass) in b.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for (dst, v) in nb.iter_mut().enumerate() {
                    *v += mass * tm.data()[src * sc + dst];
                }
            }
            let z: f64 = nb.iter().sum();
            if z > 0.0 {
                for v in &mut nb {
                    *v /= z;
                }
            }
            b = nb;
            s = s2;
        }
        total += ret;
    }
    total / episodes as f64
}

/// Most-likely-state baseline with the true model: track the exact belief,
/// act greedily from the argmax state's true action values.
pub fn eval_puddle_pomdp_ml_true(episodes: usize, seed: u64) -> Result<f64> {
    let p = make_puddle_pomdp();
    let q = puddle_true_q(&p, Backup::Hard, 2000)?;
    let t_true = true_transition_tensors(&p);
    Ok(eval_puddle_pomdp(&p, &q, &t_true, true, episodes, seed))
}

#[derive(Debug, Clone)]
pub struct PuddlePomdpOutcome {
    pub params: ParamMap,
    /// Action values of the learned model under the training-time planner.
    pub q: Tensor,
    /// Learned per-action transition matrices.
    pub t_hats: Vec<Tensor>,
    pub final_loss: f64,
    /// Mean discounted return of the trained policy over `eval_episodes`.
    pub mean_return: f64,
    /// Learned probability of staying put when moving right from the start.
    pub stay_mass_right: f64,
}

const POMDP_VI_HORIZON: usize = 100;
const POMDP_VI_TEMPERATURE: f64 = 0.1;
const PP_WIDTH: usize = 2;
const PP_HEIGHT: usize = 2;

/// Fit the four-state problem's transition model (a shared displacement
/// kernel with absorbing terminals) end to end through the soft planner and
/// the belief filter, by imitation of a scripted wait-then-commit expert,
/// then evaluate the greedy belief-weighted policy on fresh episodes.
pub fn train_puddle_pomdp_dan(
    seed: u64,
    demo_episodes: usize,
    iters: usize,
    lr: f64,
    eval_episodes: usize,
) -> Result<PuddlePomdpOutcome> {
    let p = make_puddle_pomdp();
    let demos = pomdp_expert_demos(&p, demo_episodes, seed);
    let mut params = ParamMap::new();
    init_puddle_kernel(&mut params, p.n_actions);
    let mut opt = RmsProp::new(lr);
    let mut final_loss = f64::INFINITY;
    let b0 = Tensor::new(vec![1, p.n_states], p.b0.clone());

    let model = |params: &ParamMap| -> Result<(Tape, NodeMap, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids = param_leaves(&mut tape, params);
        let t_mats = puddle_kernel_t(&mut tape, &ids, PP_WIDTH, PP_HEIGHT, &p.terminal)?;
        let r = expected_reward_leaves(&mut tape, &p);
        let mask = terminal_mask_leaf(&mut tape, &p);
        let q = value_iteration_tabular(
            &mut tape,
            &t_mats,
            &r,
            mask,
            POMDP_VI_HORIZON,
            Backup::Soft { temperature: POMDP_VI_TEMPERATURE },
            p.discount,
        )?;
        Ok((tape, ids, t_mats, q))
    };

    for _ in 0..iters {
        let (mut tape, ids, t_mats, q) = model(&params)?;
        let mut loss: Option<NodeId> = None;
        let mut steps = 0usize;
        for demo in &demos {
            if demo.is_empty() {
                continue;
            }
            // Episodes are short, so the belief chain backpropagates in full:
            // the decisive gradient for the wait-then-commit switch flows from
            // the first committed step back through every belief prediction.
            let mut b = tape.leaf(b0.clone());
            for (t, &a) in demo.iter().enumerate() {
                let vals = qmdp_action_values(&mut tape, q, b)?;
                let li = imitation_loss(&mut tape, vals, a, 1.0)?;
                loss = Some(match loss {
                    None => li,
                    Some(acc) => tape.add(acc, li)?,
                });
                steps += 1;
                if t + 1 < demo.len() {
                    let moved = tape.matmul(b, t_mats[a])?;
                    let total = tape.sum(moved, None)?;
                    b = tape.div(moved, total)?;
                }
            }
        }
        let loss = loss.ok_or_else(|| DanError::Config("no demonstration steps".into()))?;
        let mean = tape.scale(loss, 1.0 / steps as f64)?;
        final_loss = tape.value(mean).item();
        let grads = tape.backward(mean)?;
        let mut acc = ParamMap::new();
        accumulate_param_grads(&mut acc, &params, &ids, &grads, |n| n.starts_with("puddle."));
        opt.step(&mut params, &acc);
    }

    let (tape, _, t_mats, q) = model(&params)?;
    let q = tape.value(q).clone();
    let t_hats: Vec<Tensor> = t_mats.iter().map(|&m| tape.value(m).clone()).collect();
    let mean_return = eval_puddle_pomdp(&p, &q, &t_hats, false, eval_episodes, seed);
    let stay_mass_right = stay_probability(&t_hats[PP_RIGHT], PP_A);
    Ok(PuddlePomdpOutcome { params, q, t_hats, final_loss, mean_return, stay_mass_right })
}
