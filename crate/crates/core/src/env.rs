//! Discrete navigation domain: randomized grid mazes with furniture, a
//! four-action robot with heading-relative local observations, the two small
//! puddle problems used for sanity experiments, initial-belief sampling, and
//! the on-disk environment / demonstration formats.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::tape::HEADING;
use crate::tensor::Tensor;

pub const FORWARD: usize = 0;
pub const TURN_LEFT: usize = 1;
pub const TURN_RIGHT: usize = 2;
pub const STAY: usize = 3;
pub const N_ACTIONS: usize = 4;

pub const REWARD_GOAL: f64 = 20.0;
pub const REWARD_COLLISION: f64 = -10.0;
pub const REWARD_STEP: f64 = -0.1;
pub const DISCOUNT: f64 = 0.99;

// ── Grid map ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub n: usize,
    walls: Vec<bool>,
    furniture: Vec<bool>,
    pub goal: (usize, usize),
    pub seed: u64,
}

impl GridMap {
    /// Fully open map (no interior walls, no furniture) — scripted scenarios.
    pub fn open(n: usize, goal: (usize, usize), seed: u64) -> GridMap {
        GridMap { n, walls: vec![false; n * n], furniture: vec![false; n * n], goal, seed }
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.n + x
    }

    #[inline]
    pub fn wall(&self, x: usize, y: usize) -> bool {
        self.walls[self.cell(x, y)]
    }

    #[inline]
    pub fn furniture_at(&self, x: usize, y: usize) -> bool {
        self.furniture[self.cell(x, y)]
    }

    /// Occupancy including the grid boundary; `include_furniture` adds the
    /// furniture layer on top of the walls.
    #[inline]
    pub fn blocked(&self, x: i64, y: i64, include_furniture: bool) -> bool {
        if x < 0 || y < 0 || x >= self.n as i64 || y >= self.n as i64 {
            return true;
        }
        let c = self.cell(x as usize, y as usize);
        self.walls[c] || (include_furniture && self.furniture[c])
    }

    pub fn free_cells(&self, include_furniture: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.n {
            for x in 0..self.n {
                if !self.blocked(x as i64, y as i64, include_furniture) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Map with the furniture layer cleared (the robot's prior map).
    pub fn without_furniture(&self) -> GridMap {
        GridMap { furniture: vec![false; self.n * self.n], ..self.clone() }
    }

    /// Map with extra blocked cells merged into the furniture layer (used by
    /// the replanning variant as obstacles are discovered).
    pub fn with_extra_furniture(&self, extra: &[(usize, usize)]) -> GridMap {
        let mut m = self.clone();
        for &(x, y) in extra {
            if x < m.n && y < m.n {
                let c = m.cell(x, y);
                m.furniture[c] = true;
            }
        }
        m
    }
}

// ── States and dynamics ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub x: usize,
    pub y: usize,
    pub th: usize,
}

impl State {
    pub fn new(x: usize, y: usize, th: usize) -> Self {
        State { x, y, th }
    }

    /// Flat index `(y·N + x)·4 + θ`.
    #[inline]
    pub fn index(&self, n: usize) -> usize {
        (self.y * n + self.x) * 4 + self.th
    }

    pub fn from_index(i: usize, n: usize) -> Self {
        State { th: i % 4, x: (i / 4) % n, y: i / (4 * n) }
    }
}

pub fn validate_state(map: &GridMap, s: State) -> Result<()> {
    if s.x >= map.n || s.y >= map.n || s.th >= 4 || map.wall(s.x, s.y) {
        return Err(DanError::InvalidState { x: s.x, y: s.y, th: s.th, n: map.n });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StepOut {
    pub state: State,
    pub reward: f64,
    pub collided: bool,
    pub done: bool,
}

/// Deterministic dynamics. Forward into an occupied or out-of-grid cell
/// leaves the state unchanged at a −10 collision penalty; stepping onto the
/// goal earns +20 and terminates; everything else costs −0.1.
pub fn step(map: &GridMap, s: State, a: usize, include_furniture: bool) -> Result<StepOut> {
    validate_state(map, s)?;
    let mut out = StepOut { state: s, reward: REWARD_STEP, collided: false, done: false };
    match a {
        FORWARD => {
            let (dx, dy) = HEADING[s.th];
            let (tx, ty) = (s.x as i64 + dx, s.y as i64 + dy);
            if map.blocked(tx, ty, include_furniture) {
                out.reward = REWARD_COLLISION;
                out.collided = true;
            } else {
                out.state = State::new(tx as usize, ty as usize, s.th);
                if (tx as usize, ty as usize) == map.goal {
                    out.reward = REWARD_GOAL;
                    out.done = true;
                }
            }
        }
        TURN_LEFT => out.state.th = (s.th + 3) % 4,
        TURN_RIGHT => out.state.th = (s.th + 1) % 4,
        STAY => {}
        _ => {
            return Err(DanError::Config(format!("unknown action {a}")));
        }
    }
    Ok(out)
}

/// Grid coordinates of the three observed cells in the row directly ahead,
/// heading-relative [front-left, front-center, front-right]; entries may lie
/// outside the grid.
pub fn observed_cells(s: State) -> [(i64, i64); 3] {
    let fwd = HEADING[s.th];
    let left = HEADING[(s.th + 3) % 4];
    let front = (s.x as i64 + fwd.0, s.y as i64 + fwd.1);
    [
        (front.0 + left.0, front.1 + left.1),
        front,
        (front.0 - left.0, front.1 - left.1),
    ]
}

/// Occupancy of the three cells in the row directly ahead, heading-relative
/// [front-left, front-center, front-right]; out-of-grid reports occupied.
pub fn observe(map: &GridMap, s: State, include_furniture: bool) -> [u8; 3] {
    let cells = observed_cells(s);
    [
        map.blocked(cells[0].0, cells[0].1, include_furniture) as u8,
        map.blocked(cells[1].0, cells[1].1, include_furniture) as u8,
        map.blocked(cells[2].0, cells[2].1, include_furniture) as u8,
    ]
}

/// Observation vector index in 0..8 (front-left·4 + front-center·2 + front-right).
pub fn obs_index(obs: [u8; 3]) -> usize {
    (obs[0] as usize) * 4 + (obs[1] as usize) * 2 + obs[2] as usize
}

// ── Maze generation ─────────────────────────────────────────────────────────

/// Fraction of dead ends opened up after carving, so mazes contain loops and
/// detours exist around furniture.
const BRAID_P: f64 = 0.35;
const FURNITURE_RETRIES: usize = 200;

/// Recursive-backtracker maze over odd cells, braided, with a random goal and
/// rejection-sampled furniture that keeps the free graph connected.
/// Deterministic given the seed.
pub fn generate_environment(seed: u64, n: usize, furniture_count: usize) -> Result<GridMap> {
    if n < 5 || n % 2 == 0 {
        return Err(DanError::MazeGen { seed, reason: format!("size {n} must be odd and ≥ 5") });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walls = vec![true; n * n];
    let rooms_per_side = (n - 1) / 2;
    let room = |rx: usize, ry: usize| (2 * rx + 1, 2 * ry + 1);

    // Depth-first carving over the room lattice.
    let mut visited = vec![false; rooms_per_side * rooms_per_side];
    let start = (rng.gen_range(0..rooms_per_side), rng.gen_range(0..rooms_per_side));
    let mut stack = vec![start];
    visited[start.1 * rooms_per_side + start.0] = true;
    let (sx, sy) = room(start.0, start.1);
    walls[sy * n + sx] = false;
    while let Some(&(rx, ry)) = stack.last() {
        let mut nbrs: Vec<(usize, usize)> = Vec::with_capacity(4);
        for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
            let (ax, ay) = (rx as i64 + dx, ry as i64 + dy);
            if ax >= 0
                && ay >= 0
                && (ax as usize) < rooms_per_side
                && (ay as usize) < rooms_per_side
                && !visited[ay as usize * rooms_per_side + ax as usize]
            {
                nbrs.push((ax as usize, ay as usize));
            }
        }
        match nbrs.choose(&mut rng) {
            None => {
                stack.pop();
            }
            Some(&(ax, ay)) => {
                visited[ay * rooms_per_side + ax] = true;
                let (cx1, cy1) = room(rx, ry);
                let (cx2, cy2) = room(ax, ay);
                walls[cy2 * n + cx2] = false;
                walls[((cy1 + cy2) / 2) * n + (cx1 + cx2) / 2] = false;
                stack.push((ax, ay));
            }
        }
    }

    // Braid: open a wall next to some dead-end rooms to create loops.
    for ry in 0..rooms_per_side {
        for rx in 0..rooms_per_side {
            let (cx, cy) = room(rx, ry);
            let open: Vec<(i64, i64)> = [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)]
                .into_iter()
                .filter(|&(dx, dy)| {
                    let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                    px >= 0 && py >= 0 && (px as usize) < n && (py as usize) < n
                        && !walls[py as usize * n + px as usize]
                })
                .collect();
            if open.len() == 1 && rng.gen_bool(BRAID_P) {
                // Candidate passages: walls whose far side is another room.
                let mut cands: Vec<(usize, usize)> = Vec::new();
                for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
                    if (dx, dy) == open[0] {
                        continue;
                    }
                    let (fx, fy) = (cx as i64 + 2 * dx, cy as i64 + 2 * dy);
                    if fx >= 1 && fy >= 1 && (fx as usize) < n - 1 && (fy as usize) < n - 1 {
                        cands.push(((cx as i64 + dx) as usize, (cy as i64 + dy) as usize));
                    }
                }
                if let Some(&(wx, wy)) = cands.choose(&mut rng) {
                    walls[wy * n + wx] = false;
                }
            }
        }
    }

    let mut map = GridMap { n, walls, furniture: vec![false; n * n], goal: (0, 0), seed };

    let free = map.free_cells(false);
    if free.is_empty() {
        return Err(DanError::MazeGen { seed, reason: "no free cells carved".into() });
    }
    map.goal = *free.choose(&mut rng).expect("free non-empty");

    // Furniture: uniform free non-goal cells, rejected unless the remaining
    // free graph stays connected.
    for piece in 0..furniture_count {
        let mut placed = false;
        for _ in 0..FURNITURE_RETRIES {
            let &(x, y) = free.choose(&mut rng).expect("free non-empty");
            if (x, y) == map.goal || map.furniture_at(x, y) {
                continue;
            }
            let c = map.cell(x, y);
            map.furniture[c] = true;
            if connected(&map, true) {
                placed = true;
                break;
            }
            map.furniture[c] = false;
        }
        if !placed {
            return Err(DanError::MazeGen {
                seed,
                reason: format!("furniture piece {piece} infeasible after {FURNITURE_RETRIES} tries"),
            });
        }
    }

    if !connected(&map, false) {
        return Err(DanError::MazeGen { seed, reason: "carved maze not connected".into() });
    }
    Ok(map)
}

/// Flood fill: every free cell (under the chosen occupancy) reachable from
/// every other; also requires the goal to be free.
pub fn connected(map: &GridMap, include_furniture: bool) -> bool {
    let free = map.free_cells(include_furniture);
    if free.is_empty() || map.blocked(map.goal.0 as i64, map.goal.1 as i64, include_furniture) {
        return false;
    }
    let mut seen = vec![false; map.n * map.n];
    let mut queue = vec![free[0]];
    seen[map.cell(free[0].0, free[0].1)] = true;
    let mut count = 1;
    while let Some((x, y)) = queue.pop() {
        for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
            let (ax, ay) = (x as i64 + dx, y as i64 + dy);
            if !map.blocked(ax, ay, include_furniture) && !seen[map.cell(ax as usize, ay as usize)] {
                seen[map.cell(ax as usize, ay as usize)] = true;
                count += 1;
                queue.push((ax as usize, ay as usize));
            }
        }
    }
    count == free.len()
}

// ── Initial beliefs ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeliefMode {
    AllStates,
    RandomSubset,
    Certain,
}

/// Fraction of free states kept in random-subset mode.
pub const SUBSET_FRACTION: f64 = 0.25;

/// Uniform belief over the chosen support of wall-free states. The support
/// always contains the true state; `certain` is a delta on it.
pub fn sample_initial_belief(
    rng: &mut ChaCha8Rng,
    mode: BeliefMode,
    map: &GridMap,
    true_state: State,
) -> Result<Tensor> {
    let n = map.n;
    let mut b = Tensor::zeros(vec![n, n, 4]);
    let support: Vec<usize> = match mode {
        BeliefMode::Certain => vec![true_state.index(n)],
        BeliefMode::AllStates => map
            .free_cells(false)
            .iter()
            .flat_map(|&(x, y)| (0..4).map(move |th| State::new(x, y, th).index(n)))
            .collect(),
        BeliefMode::RandomSubset => {
            let mut all: Vec<usize> = map
                .free_cells(false)
                .iter()
                .flat_map(|&(x, y)| (0..4).map(move |th| State::new(x, y, th).index(n)))
                .collect();
            let k = (SUBSET_FRACTION * all.len() as f64).ceil() as usize;
            all.shuffle(rng);
            let mut sub: Vec<usize> = all.into_iter().take(k.max(1)).collect();
            let t = true_state.index(n);
            if !sub.contains(&t) {
                let slot = rng.gen_range(0..sub.len());
                sub[slot] = t;
            }
            sub
        }
    };
    if support.is_empty() {
        return Err(DanError::Config("empty belief support".into()));
    }
    let p = 1.0 / support.len() as f64;
    for idx in support {
        b.data_mut()[idx] = p;
    }
    Ok(b)
}

// ── Puddle problems ─────────────────────────────────────────────────────────

/// Tabular (PO)MDP with explicit transition, reward, and observation tables.
#[derive(Debug, Clone)]
pub struct PuddleProblem {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_obs: usize,
    /// Row-major T[s][a][s'] distributions; rows for terminal states self-loop.
    pub transition: Vec<f64>,
    /// R[s][a][s'] transition rewards.
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
    /// O[s'][o] observation distributions (uniform/constant when n_obs = 1).
    pub observation: Vec<f64>,
    pub b0: Vec<f64>,
    pub discount: f64,
    pub state_names: Vec<&'static str>,
    pub action_names: Vec<&'static str>,
}

impl PuddleProblem {
    #[inline]
    pub fn t(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.reward[(s * self.n_actions + a) * self.n_states + s2]
    }

    /// Expected immediate reward R(s, a) = Σ_s' T·R.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        (0..self.n_states).map(|s2| self.t(s, a, s2) * self.r(s, a, s2)).sum()
    }
}

pub const PUDDLE_UP: usize = 0;
pub const PUDDLE_DOWN: usize = 1;
pub const PUDDLE_LEFT: usize = 2;
pub const PUDDLE_RIGHT: usize = 3;

/// 3×3 deterministic MDP [A B C / D E F / G H I]: G is the terminal +20 goal,
/// D and E are sticky −10 puddles, off-grid moves stay in place, step cost
/// −0.1, discount 0.99.
pub fn make_puddle_mdp() -> PuddleProblem {
    let n_states = 9;
    let n_actions = 4;
    let goal = 6; // G
    let puddles = [3usize, 4]; // D, E
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions * n_states];
    let mut terminal = vec![false; n_states];
    terminal[goal] = true;
    let deltas = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)]; // up, down, left, right
    for s in 0..n_states {
        let (x, y) = ((s % 3) as i64, (s / 3) as i64);
        for a in 0..n_actions {
            let s2 = if terminal[s] || puddles.contains(&s) {
                s // absorbing: goal row is terminal, puddles are sticky
            } else {
                let (tx, ty) = (x + deltas[a].0, y + deltas[a].1);
                if tx < 0 || ty < 0 || tx > 2 || ty > 2 { s } else { (ty * 3 + tx) as usize }
            };
            transition[(s * n_actions + a) * n_states + s2] = 1.0;
            reward[(s * n_actions + a) * n_states + s2] = if terminal[s] {
                0.0
            } else if s2 == goal {
                REWARD_GOAL
            } else if puddles.contains(&s2) {
                REWARD_COLLISION
            } else {
                REWARD_STEP
            };
        }
    }
    PuddleProblem {
        n_states,
        n_actions,
        n_obs: 1,
        transition,
        reward,
        terminal,
        observation: vec![1.0; n_states],
        b0: {
            let mut b = vec![0.0; n_states];
            b[0] = 1.0;
            b
        },
        discount: DISCOUNT,
        state_names: vec!["A", "B", "C", "D", "E", "F", "G", "H", "I"],
        action_names: vec!["up", "down", "left", "right"],
    }
}

pub const PP_A: usize = 0;
pub const PP_B: usize = 1;
pub const PP_PUDDLE: usize = 2;
pub const PP_GOAL: usize = 3;
pub const PP_RIGHT: usize = 0;
pub const PP_DOWN: usize = 1;
pub const PP_FAIL: f64 = 0.4;

/// Four-state POMDP: A–B on top, Puddle under A, Goal under B; actions
/// {right, down} fail (stay) with probability 0.4; off-grid moves stay; a
/// single constant observation; Goal +20 and Puddle −10 both terminal; step
/// cost −0.1; discount 0.99; initial belief certainly A.
pub fn make_puddle_pomdp() -> PuddleProblem {
    let n_states = 4;
    let n_actions = 2;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions * n_states];
    let terminal = vec![false, false, true, true];
    // Intended destination per (state, action); None = off-grid (stay).
    let dest = |s: usize, a: usize| -> Option<usize> {
        match (s, a) {
            (PP_A, PP_RIGHT) => Some(PP_B),
            (PP_A, PP_DOWN) => Some(PP_PUDDLE),
            (PP_B, PP_RIGHT) => None,
            (PP_B, PP_DOWN) => Some(PP_GOAL),
            _ => None,
        }
    };
    for s in 0..n_states {
        for a in 0..n_actions {
            if terminal[s] {
                transition[(s * n_actions + a) * n_states + s] = 1.0;
                continue;
            }
            match dest(s, a) {
                None => transition[(s * n_actions + a) * n_states + s] = 1.0,
                Some(d) => {
                    transition[(s * n_actions + a) * n_states + d] = 1.0 - PP_FAIL;
                    transition[(s * n_actions + a) * n_states + s] = PP_FAIL;
                }
            }
            for s2 in 0..n_states {
                if transition[(s * n_actions + a) * n_states + s2] == 0.0 {
                    continue;
                }
                reward[(s * n_actions + a) * n_states + s2] = if s2 == PP_GOAL {
                    REWARD_GOAL
                } else if s2 == PP_PUDDLE {
                    REWARD_COLLISION
                } else {
                    REWARD_STEP
                };
            }
        }
    }
    PuddleProblem {
        n_states,
        n_actions,
        n_obs: 1,
        transition,
        reward,
        terminal,
        observation: vec![1.0; n_states],
        b0: vec![1.0, 0.0, 0.0, 0.0],
        discount: DISCOUNT,
        state_names: vec!["A", "B", "Puddle", "Goal"],
        action_names: vec!["right", "down"],
    }
}

// ── File formats ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EnvFile {
    version: u32,
    n: usize,
    walls: Vec<String>,
    furniture: Vec<String>,
    goal: [usize; 2],
    seed: u64,
}

pub fn env_to_json(map: &GridMap) -> String {
    let rows = |layer: &dyn Fn(usize, usize) -> bool, on: char| -> Vec<String> {
        (0..map.n)
            .map(|y| (0..map.n).map(|x| if layer(x, y) { on } else { '.' }).collect())
            .collect()
    };
    let f = EnvFile {
        version: 1,
        n: map.n,
        walls: rows(&|x, y| map.wall(x, y), '#'),
        furniture: rows(&|x, y| map.furniture_at(x, y), 'F'),
        goal: [map.goal.0, map.goal.1],
        seed: map.seed,
    };
    serde_json::to_string(&f).expect("env serializes")
}

pub fn env_from_json(s: &str) -> Result<GridMap> {
    let f: EnvFile = serde_json::from_str(s)?;
    if f.version != 1 {
        return Err(DanError::Config(format!("unsupported environment file version {}", f.version)));
    }
    let n = f.n;
    let parse_layer = |rows: &[String], on: char| -> Result<Vec<bool>> {
        if rows.len() != n || rows.iter().any(|r| r.chars().count() != n) {
            return Err(DanError::Config("environment layer has wrong dimensions".into()));
        }
        Ok(rows.iter().flat_map(|r| r.chars().map(|c| c == on)).collect())
    };
    let map = GridMap {
        n,
        walls: parse_layer(&f.walls, '#')?,
        furniture: parse_layer(&f.furniture, 'F')?,
        goal: (f.goal[0], f.goal[1]),
        seed: f.seed,
    };
    if map.goal.0 >= n || map.goal.1 >= n || map.wall(map.goal.0, map.goal.1) {
        return Err(DanError::Config("environment goal not on a free cell".into()));
    }
    Ok(map)
}

pub fn save_env(map: &GridMap, path: &Path) -> Result<()> {
    std::fs::write(path, env_to_json(map))?;
    Ok(())
}

pub fn load_env(path: &Path) -> Result<GridMap> {
    env_from_json(&std::fs::read_to_string(path)?)
}

/// One step of a demonstration trajectory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DemoStep {
    pub env_id: usize,
    pub t: usize,
    pub obs: [u8; 3],
    pub action: usize,
    pub expert_action: usize,
    pub true_state: [usize; 3],
    pub avoid_flag: bool,
}

impl DemoStep {
    pub fn state(&self) -> State {
        State::new(self.true_state[0], self.true_state[1], self.true_state[2])
    }
}

pub fn save_demos(steps: &[DemoStep], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<Vec<DemoStep>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Index mapping env_id → environment file, stored next to the demos.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub env_files: Vec<String>,
}

pub fn save_index(index: &DatasetIndex, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(index)?)?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Group demo steps into per-(env, trajectory) runs, assuming steps of one
/// trajectory are contiguous and t resets to 0 at each new trajectory.
pub fn split_trajectories(steps: &[DemoStep]) -> Vec<Vec<DemoStep>> {
    let mut out: Vec<Vec<DemoStep>> = Vec::new();
    for s in steps {
        if s.t == 0 || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().expect("just pushed").push(s.clone());
    }
    out
}

/// Deterministic map from env position to train/val split by env seed.
pub fn is_validation_env(seed: u64) -> bool {
    seed % 10 == 9
}

#[allow(clippy::type_complexity)]
pub fn group_by_env(steps: &[DemoStep]) -> BTreeMap<usize, Vec<Vec<DemoStep>>> {
    let mut by_env: BTreeMap<usize, Vec<DemoStep>> = BTreeMap::new();
    for s in steps {
        by_env.entry(s.env_id).or_default().push(s.clone());
    }
    by_env.into_iter().map(|(k, v)| (k, split_trajectories(&v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_map() -> GridMap {
        // 5×5 with a plus-shaped free region.
        let mut walls = vec![true; 25];
        for (x, y) in [(1, 1), (2, 1), (3, 1), (2, 2), (1, 3), (2, 3), (3, 3)] {
            walls[y * 5 + x] = false;
        }
        GridMap { n: 5, walls, furniture: vec![false; 25], goal: (3, 3), seed: 0 }
    }

    #[test]
    fn forward_into_wall_collides_and_stays() {
        let m = simple_map();
        let s = State::new(1, 1, 0); // facing north into the border wall row
        let out = step(&m, s, FORWARD, true).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.reward, REWARD_COLLISION);
        assert!(out.collided && !out.done);
    }

    #[test]
    fn turn_left_from_north_faces_west() {
        let m = simple_map();
        let out = step(&m, State::new(2, 2, 0), TURN_LEFT, true).unwrap();
        assert_eq!(out.state, State::new(2, 2, 3));
        assert_eq!(out.reward, REWARD_STEP);
    }

    #[test]
    fn forward_onto_goal_terminates_with_plus_twenty() {
        let m = simple_map();
        let out = step(&m, State::new(2, 3, 1), FORWARD, true).unwrap();
        assert_eq!(out.state, State::new(3, 3, 1));
        assert_eq!(out.reward, REWARD_GOAL);
        assert!(out.done);
    }

    #[test]
    fn observe_open_row_boundary_and_furniture_masking() {
        let mut m = simple_map();
        // At (2,2) facing north: row ahead is (1,1),(2,1),(3,1) all free.
        assert_eq!(observe(&m, State::new(2, 2, 0), true), [0, 0, 0]);
        // At (2,1) facing north: the row ahead is the border wall row.
        assert_eq!(observe(&m, State::new(2, 1, 0), true), [1, 1, 1]);
        // Furniture at (2,3): from (2,2) facing south it sits front-center.
        let c = m.cell(2, 3);
        m.furniture[c] = true;
        assert_eq!(observe(&m, State::new(2, 2, 2), true), [0, 1, 0]);
        assert_eq!(observe(&m, State::new(2, 2, 2), false)[1], 0);
    }

    #[test]
    fn observation_is_heading_relative() {
        // Facing south, "front-left" is the cell to the east of the front row.
        let m = simple_map();
        let obs = observe(&m, State::new(2, 2, 2), true);
        // Front row at y=3: left(south)=east → (3,3) free, center (2,3) free, right (1,3) free.
        assert_eq!(obs, [0, 0, 0]);
    }

    #[test]
    fn generation_is_deterministic_and_respects_flags() {
        let a = generate_environment(42, 9, 3).unwrap();
        let b = generate_environment(42, 9, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_environment(42, 9, 0).unwrap();
        assert!(c.furniture.iter().all(|&f| !f));
    }

    #[test]
    fn five_hundred_seeds_all_connected() {
        for seed in 0..500u64 {
            let m = generate_environment(seed, 9, 3).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!(connected(&m, false), "walls-only graph disconnected at seed {seed}");
            assert!(connected(&m, true), "furnished graph disconnected at seed {seed}");
            assert!(!m.wall(m.goal.0, m.goal.1) && !m.furniture_at(m.goal.0, m.goal.1));
        }
    }

    #[test]
    fn puddle_mdp_layout_and_golden_path() {
        let p = make_puddle_mdp();
        // right,right,down,down,left,left from A visits B,C,F,I,H,G.
        let seq = [PUDDLE_RIGHT, PUDDLE_RIGHT, PUDDLE_DOWN, PUDDLE_DOWN, PUDDLE_LEFT, PUDDLE_LEFT];
        let mut s = 0usize;
        let mut visited = Vec::new();
        let mut ret = 0.0;
        for (t, &a) in seq.iter().enumerate() {
            let s2 = (0..9).find(|&j| p.t(s, a, j) == 1.0).unwrap();
            ret += p.discount.powi(t as i32) * p.r(s, a, s2);
            visited.push(p.state_names[s2]);
            s = s2;
        }
        assert_eq!(visited, ["B", "C", "F", "I", "H", "G"]);
        assert_abs_diff_eq!(ret, 18.529701496602797, epsilon = 1e-8);
        // down,down from A reaches D and then sticks.
        let s1 = (0..9).find(|&j| p.t(0, PUDDLE_DOWN, j) == 1.0).unwrap();
        assert_eq!(p.state_names[s1], "D");
        let s2 = (0..9).find(|&j| p.t(s1, PUDDLE_DOWN, j) == 1.0).unwrap();
        assert_eq!(p.state_names[s2], "D");
        assert_eq!(p.r(s1, PUDDLE_DOWN, s2), REWARD_COLLISION);
    }

    #[test]
    fn puddle_mdp_shortest_safe_path_is_six_actions() {
        // Breadth-first search over non-puddle states.
        let p = make_puddle_mdp();
        let mut dist = vec![usize::MAX; 9];
        dist[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(s) = queue.pop_front() {
            if s == 6 {
                continue;
            }
            for a in 0..4 {
                let s2 = (0..9).find(|&j| p.t(s, a, j) == 1.0).unwrap();
                if [3, 4].contains(&s2) || s2 == s {
                    continue;
                }
                if dist[s2] == usize::MAX {
                    dist[s2] = dist[s] + 1;
                    queue.push_back(s2);
                }
            }
        }
        assert_eq!(dist[6], 6);
    }

    #[test]
    fn puddle_mdp_rows_are_one_hot_distributions() {
        let p = make_puddle_mdp();
        for s in 0..p.n_states {
            for a in 0..p.n_actions {
                let row: Vec<f64> = (0..p.n_states).map(|j| p.t(s, a, j)).collect();
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            }
        }
    }

    #[test]
    fn puddle_pomdp_transition_probabilities() {
        let p = make_puddle_pomdp();
        assert_abs_diff_eq!(p.t(PP_A, PP_RIGHT, PP_A), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t(PP_A, PP_RIGHT, PP_B), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t(PP_A, PP_DOWN, PP_PUDDLE), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t(PP_B, PP_RIGHT, PP_B), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.t(PP_B, PP_DOWN, PP_GOAL), 0.6, epsilon = 1e-15);
        assert_eq!(p.b0, vec![1.0, 0.0, 0.0, 0.0]);
        for s in 0..4 {
            for a in 0..2 {
                let sum: f64 = (0..4).map(|j| p.t(s, a, j)).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn belief_modes_behave() {
        let m = generate_environment(7, 9, 2).unwrap();
        let free = m.free_cells(false);
        let truth = State::new(free[0].0, free[0].1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let certain = sample_initial_belief(&mut rng, BeliefMode::Certain, &m, truth).unwrap();
        assert_eq!(certain.data().iter().filter(|&&v| v > 0.0).count(), 1);
        assert_abs_diff_eq!(certain.data()[truth.index(9)], 1.0, epsilon = 1e-15);

        let all = sample_initial_belief(&mut rng, BeliefMode::AllStates, &m, truth).unwrap();
        let n_free = free.len() * 4;
        assert_abs_diff_eq!(all.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(all.data().iter().filter(|&&v| v > 0.0).count(), n_free);

        let mut rng1 = ChaCha8Rng::seed_from_u64(11);
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let s1 = sample_initial_belief(&mut rng1, BeliefMode::RandomSubset, &m, truth).unwrap();
        let s2 = sample_initial_belief(&mut rng2, BeliefMode::RandomSubset, &m, truth).unwrap();
        assert_eq!(s1.data(), s2.data());
        let k = (SUBSET_FRACTION * n_free as f64).ceil() as usize;
        assert_eq!(s1.data().iter().filter(|&&v| v > 0.0).count(), k);
        assert!(s1.data()[truth.index(9)] > 0.0);
        assert_abs_diff_eq!(s1.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn env_file_round_trip() {
        let m = generate_environment(123, 9, 3).unwrap();
        let m2 = env_from_json(&env_to_json(&m)).unwrap();
        // Seed survives, layers identical.
        assert_eq!(m, m2);
    }

    #[test]
    fn demo_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        let steps = vec![
            DemoStep {
                env_id: 3,
                t: 0,
                obs: [0, 1, 0],
                action: 2,
                expert_action: 2,
                true_state: [4, 5, 1],
                avoid_flag: false,
            },
            DemoStep {
                env_id: 3,
                t: 1,
                obs: [1, 0, 0],
                action: 0,
                expert_action: 0,
                true_state: [4, 5, 2],
                avoid_flag: true,
            },
        ];
        save_demos(&steps, &path).unwrap();
        assert_eq!(load_demos(&path).unwrap(), steps);
    }

    #[test]
    fn trajectory_splitting_resets_on_t_zero() {
        let mk = |t: usize| DemoStep {
            env_id: 0,
            t,
            obs: [0, 0, 0],
            action: 0,
            expert_action: 0,
            true_state: [1, 1, 0],
            avoid_flag: false,
        };
        let runs = split_trajectories(&[mk(0), mk(1), mk(2), mk(0), mk(1)]);
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].len(), 3);
        assert_eq!(runs[1].len(), 2);
    }
}
