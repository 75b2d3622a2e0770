//! Gridworlds, goal-task families, expert streams and exact evaluation.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, FiniteMdp, StartSpec};
use crate::meta::MetaTask;
use crate::policy::TabularPolicy;
use crate::reward::RewardModel;
use crate::rng::SeededRng;
use crate::soft::{self, SoftOptions};

/// Action indices of a gridworld: north is `+y`, east is `+x`.
pub const NORTH: usize = 0;
pub const SOUTH: usize = 1;
pub const EAST: usize = 2;
pub const WEST: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// One parameter per cell: `phi(s,a) = e_s`.
    OneHot,
    /// Gaussian bumps of the squared cell distance to `centers` cells laid
    /// out on a regular lattice over the grid.
    GoalDistanceRbf { centers: usize, bandwidth: f64 },
}

impl Default for FeatureKind {
    fn default() -> Self {
        FeatureKind::OneHot
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "cells", rename_all = "snake_case")]
pub enum StartCells {
    /// Uniform over all non-wall cells.
    #[default]
    Uniform,
    /// Uniform over the listed cells.
    Cells(Vec<(usize, usize)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub walls: Vec<(usize, usize)>,
    pub goal: (usize, usize),
    #[serde(default = "default_slip")]
    pub slip_prob: f64,
    #[serde(default)]
    pub step_cost: f64,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub feature_kind: FeatureKind,
    /// Multiplies every feature (see the README on regularization scale).
    #[serde(default = "default_scale")]
    pub feature_scale: f64,
    #[serde(default)]
    pub start: StartCells,
}

fn default_slip() -> f64 {
    0.1
}

fn default_goal_reward() -> f64 {
    1.0
}

fn default_discount() -> f64 {
    0.9
}

fn default_scale() -> f64 {
    1.0
}

impl GridworldSpec {
    pub fn open(width: usize, height: usize, goal: (usize, usize)) -> Self {
        GridworldSpec {
            width,
            height,
            walls: Vec::new(),
            goal,
            slip_prob: default_slip(),
            step_cost: 0.0,
            goal_reward: default_goal_reward(),
            discount: default_discount(),
            feature_kind: FeatureKind::OneHot,
            feature_scale: 1.0,
            start: StartCells::Uniform,
        }
    }

    /// 14 x 10 map with two interior walls: the first (x = 4) leaves a door
    /// in the bottom two rows, the second (x = 9) a door in the top two rows.
    /// Episodes start in the two leftmost columns.
    pub fn analog_map(goal: (usize, usize)) -> Self {
        let mut walls = Vec::new();
        for y in 2..10 {
            walls.push((4, y));
        }
        for y in 0..8 {
            walls.push((9, y));
        }
        let start = (0..10).flat_map(|y| [(0, y), (1, y)]).collect();
        GridworldSpec {
            width: 14,
            height: 10,
            walls,
            goal,
            slip_prob: default_slip(),
            step_cost: 0.0,
            goal_reward: default_goal_reward(),
            discount: default_discount(),
            feature_kind: FeatureKind::OneHot,
            feature_scale: 1.0,
            start: StartCells::Cells(start),
        }
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, s: usize) -> (usize, usize) {
        (s % self.width, s / self.width)
    }

    pub fn is_wall(&self, cell: (usize, usize)) -> bool {
        self.walls.contains(&cell)
    }

    fn in_bounds(&self, (x, y): (usize, usize)) -> bool {
        x < self.width && y < self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("grid must have positive width and height".into()));
        }
        if !self.in_bounds(self.goal) {
            return Err(Error::Validation(format!("goal {:?} outside the grid", self.goal)));
        }
        if let Some(w) = self.walls.iter().find(|&&w| !self.in_bounds(w)) {
            return Err(Error::Validation(format!("wall {w:?} outside the grid")));
        }
        if self.is_wall(self.goal) {
            return Err(Error::Validation("goal cell is a wall".into()));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(Error::Validation(format!("slip probability {} outside [0,1)", self.slip_prob)));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(Error::Validation("feature_scale must be positive".into()));
        }
        if let FeatureKind::GoalDistanceRbf { centers, bandwidth } = self.feature_kind {
            if centers == 0 || !(bandwidth > 0.0) {
                return Err(Error::Validation("rbf features need centers >= 1 and bandwidth > 0".into()));
            }
        }
        if let StartCells::Cells(cells) = &self.start {
            if cells.is_empty() {
                return Err(Error::Validation("start cell list is empty".into()));
            }
            if let Some(c) = cells.iter().find(|&&c| !self.in_bounds(c) || self.is_wall(c)) {
                return Err(Error::Validation(format!("start cell {c:?} is outside the grid or a wall")));
            }
        }
        Ok(())
    }

    /// Cell reached by an intended move; walls and borders reflect.
    fn move_from(&self, (x, y): (usize, usize), action: usize) -> (usize, usize) {
        let target = match action {
            NORTH if y + 1 < self.height => (x, y + 1),
            SOUTH if y > 0 => (x, y - 1),
            EAST if x + 1 < self.width => (x + 1, y),
            WEST if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        if self.is_wall(target) {
            (x, y)
        } else {
            target
        }
    }
}

fn lateral(action: usize) -> [usize; 2] {
    match action {
        NORTH | SOUTH => [EAST, WEST],
        _ => [NORTH, SOUTH],
    }
}

/// Built gridworld: dynamics, reward features and the true reward.
#[derive(Clone, Debug, PartialEq)]
pub struct Gridworld {
    pub spec: GridworldSpec,
    pub mdp: FiniteMdp,
    pub model: RewardModel,
    pub true_reward: DMatrix<f64>,
    pub goal_state: usize,
    /// No start state can reach the goal.
    pub goal_unreachable: bool,
}

pub fn build_gridworld(spec: &GridworldSpec) -> Result<Gridworld> {
    spec.validate()?;
    let ns = spec.n_states();
    let na = 4;
    let mut transition = vec![0.0; ns * na * ns];
    for s in 0..ns {
        let cell = spec.cell(s);
        for a in 0..na {
            let off = (s * na + a) * ns;
            let intended = spec.state_from(spec.move_from(cell, a));
            transition[off + intended] += 1.0 - spec.slip_prob;
            for l in lateral(a) {
                let j = spec.state_from(spec.move_from(cell, l));
                transition[off + j] += spec.slip_prob / 2.0;
            }
        }
    }
    let initial = start_distribution(spec);
    let mdp = FiniteMdp::new(ns, na, transition, initial, spec.discount)?;
    let model = features(spec)?;
    let goal_state = spec.state(spec.goal.0, spec.goal.1);
    let true_reward = goal_reward_table(spec, goal_state);
    let reach = reaches(&mdp, goal_state);
    let goal_unreachable = !(0..ns).any(|s| mdp.initial_dist()[s] > 0.0 && reach[s]);
    if goal_unreachable {
        log::warn!("goal {:?} is unreachable from every start cell", spec.goal);
    }
    Ok(Gridworld {
        spec: spec.clone(),
        mdp,
        model,
        true_reward,
        goal_state,
        goal_unreachable,
    })
}

impl GridworldSpec {
    fn state_from(&self, (x, y): (usize, usize)) -> usize {
        self.state(x, y)
    }
}

fn start_distribution(spec: &GridworldSpec) -> Vec<f64> {
    let ns = spec.n_states();
    let cells: Vec<usize> = match &spec.start {
        StartCells::Uniform => (0..ns).filter(|&s| !spec.is_wall(spec.cell(s))).collect(),
        StartCells::Cells(c) => {
            let mut v: Vec<usize> = c.iter().map(|&(x, y)| spec.state(x, y)).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    let mut p = vec![0.0; ns];
    for &s in &cells {
        p[s] = 1.0 / cells.len() as f64;
    }
    p
}

fn goal_reward_table(spec: &GridworldSpec, goal_state: usize) -> DMatrix<f64> {
    DMatrix::from_fn(spec.n_states(), 4, |s, _| {
        if s == goal_state {
            spec.goal_reward
        } else {
            spec.step_cost
        }
    })
}

fn features(spec: &GridworldSpec) -> Result<RewardModel> {
    let ns = spec.n_states();
    let c = spec.feature_scale;
    match spec.feature_kind {
        FeatureKind::OneHot => {
            let index = (0..ns * 4).map(|p| p / 4).collect();
            let model = RewardModel::tabular_with_index(ns, 4, index, ns)?;
            if c == 1.0 {
                Ok(model)
            } else {
                model.scaled(c)
            }
        }
        FeatureKind::GoalDistanceRbf { centers, bandwidth } => {
            let pts = lattice(spec.width, spec.height, centers);
            let mut f = Vec::with_capacity(ns * 4 * pts.len());
            for s in 0..ns {
                let (x, y) = spec.cell(s);
                let row: Vec<f64> = pts
                    .iter()
                    .map(|&(cx, cy)| {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        c * (-d2 / (2.0 * bandwidth * bandwidth)).exp()
                    })
                    .collect();
                for _ in 0..4 {
                    f.extend_from_slice(&row);
                }
            }
            RewardModel::linear(ns, 4, pts.len(), f)
        }
    }
}

/// `k` points on a near-square lattice covering the grid.
fn lattice(width: usize, height: usize, k: usize) -> Vec<(f64, f64)> {
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let mut pts = Vec::with_capacity(k);
    for i in 0..k {
        let (cx, cy) = (i % cols, i / cols);
        let x = (cx as f64 + 0.5) * width as f64 / cols as f64 - 0.5;
        let y = (cy as f64 + 0.5) * height as f64 / rows as f64 - 0.5;
        pts.push((x, y));
    }
    pts
}

/// States from which `target` is reachable with positive probability.
fn reaches(mdp: &FiniteMdp, target: usize) -> Vec<bool> {
    let ns = mdp.n_states();
    let mut preds = vec![Vec::new(); ns];
    for s in 0..ns {
        for a in 0..mdp.n_actions() {
            for &(j, _) in mdp.successors(s, a) {
                preds[j].push(s);
            }
        }
    }
    let mut seen = vec![false; ns];
    seen[target] = true;
    let mut queue = VecDeque::from([target]);
    while let Some(j) = queue.pop_front() {
        for &s in &preds[j] {
            if !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    seen
}

/// Random MDP with `branching` successors per pair and Dirichlet(1)-like
/// weights; `P0` is uniform.
pub fn random_mdp(n_states: usize, n_actions: usize, branching: usize, gamma: f64, rng: &mut SeededRng) -> Result<FiniteMdp> {
    if branching == 0 || branching > n_states {
        return Err(Error::Domain(format!("branching must be in 1..={n_states}")));
    }
    let mut t = vec![0.0; n_states * n_actions * n_states];
    for pair in 0..n_states * n_actions {
        let mut targets: Vec<usize> = (0..n_states).collect();
        for i in 0..branching {
            let j = i + rng.below(n_states - i);
            targets.swap(i, j);
        }
        let w: Vec<f64> = (0..branching).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let z: f64 = w.iter().sum();
        for (i, &s) in targets[..branching].iter().enumerate() {
            t[pair * n_states + s] = w[i] / z;
        }
        // renormalize against rounding so rows pass the 1e-12 check
        let row = &mut t[pair * n_states..(pair + 1) * n_states];
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
    FiniteMdp::new(n_states, n_actions, t, vec![1.0 / n_states as f64; n_states], gamma)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertKind {
    /// Soft-optimal policy of the true reward.
    #[default]
    Soft,
    /// `pi(a|s)` proportional to `exp(q_soft(s,a) / temperature)`.
    Boltzmann { temperature: f64 },
}

pub fn expert_policy(mdp: &FiniteMdp, true_reward: &DMatrix<f64>, kind: ExpertKind) -> Result<TabularPolicy> {
    let sol = soft::soft_value_iteration_with(mdp, true_reward, &SoftOptions::default())?;
    match kind {
        ExpertKind::Soft => Ok(sol.policy),
        ExpertKind::Boltzmann { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Config("expert temperature must be positive".into()));
            }
            Ok(soft::policy_improvement(&(sol.q / temperature)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub base: GridworldSpec,
    pub goals: Vec<(usize, usize)>,
    /// Sampling weights of `goals`; uniform when empty.
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Length of every demonstration.
    pub trajectory_len: usize,
    #[serde(default)]
    pub expert: ExpertKind,
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.goals.is_empty() {
            return Err(Error::Config("task distribution needs at least one goal".into()));
        }
        for &g in &self.goals {
            let mut spec = self.base.clone();
            spec.goal = g;
            spec.validate()?;
        }
        if !self.weights.is_empty()
            && (self.weights.len() != self.goals.len() || self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(Error::Config("goal weights must be nonnegative, one per goal, not all zero".into()));
        }
        if self.trajectory_len == 0 {
            return Err(Error::Config("trajectory_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn draw_goal(&self, rng: &mut SeededRng) -> (usize, usize) {
        if self.weights.is_empty() {
            self.goals[rng.below(self.goals.len())]
        } else {
            let z: f64 = self.weights.iter().sum();
            let p: Vec<f64> = self.weights.iter().map(|w| w / z).collect();
            self.goals[rng.categorical(&p)]
        }
    }

    /// Gridworld for a specific goal.
    pub fn world(&self, goal: (usize, usize)) -> Result<Gridworld> {
        let mut spec = self.base.clone();
        spec.goal = goal;
        build_gridworld(&spec)
    }

    /// Reward features shared by every task of the family.
    pub fn model(&self) -> Result<RewardModel> {
        Ok(build_gridworld(&self.base)?.model)
    }

    /// Task for a given goal with demonstrations drawn from `rng`.
    pub fn task_for_goal(&self, goal: (usize, usize), m_eval: usize, rng: &mut SeededRng) -> Result<MetaTask> {
        if m_eval == 0 {
            return Err(Error::Config("m_eval must be at least 1".into()));
        }
        let world = self.world(goal)?;
        let expert = expert_policy(&world.mdp, &world.true_reward, self.expert)?;
        let d_train = mdp::rollout(&world.mdp, &expert, StartSpec::Initial, self.trajectory_len, rng)?;
        let d_eval = (0..m_eval)
            .map(|_| mdp::rollout(&world.mdp, &expert, StartSpec::Initial, self.trajectory_len, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetaTask {
            mdp: Arc::new(world.mdp),
            true_reward: world.true_reward,
            expert,
            goal: Some(world.goal_state),
            d_train,
            d_eval,
        })
    }
}

/// Samples a goal, builds its soft-optimal expert and rolls one training and
/// `m_eval` evaluation demonstrations.
pub fn sample_meta_task(dist: &TaskDistribution, m_eval: usize, rng: &mut SeededRng) -> Result<MetaTask> {
    dist.validate()?;
    let goal = dist.draw_goal(rng);
    dist.task_for_goal(goal, m_eval, rng)
}

/// Lazily sampled expert demonstration. Each call to `next` draws exactly one
/// pair; nothing beyond the returned pairs is ever sampled.
#[derive(Clone, Debug)]
pub struct ExpertStream<'a> {
    mdp: &'a FiniteMdp,
    policy: &'a TabularPolicy,
    rng: SeededRng,
    remaining: usize,
    last: Option<(usize, usize)>,
}

pub fn expert_stream<'a>(mdp: &'a FiniteMdp, policy: &'a TabularPolicy, len: usize, rng: SeededRng) -> Result<ExpertStream<'a>> {
    if len == 0 {
        return Err(Error::Domain("stream length must be at least 1".into()));
    }
    mdp.check_policy(policy)?;
    Ok(ExpertStream {
        mdp,
        policy,
        rng,
        remaining: len,
        last: None,
    })
}

impl Iterator for ExpertStream<'_> {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let s = match self.last {
            None => self.mdp.sample_initial(&mut self.rng),
            Some((s, a)) => self.mdp.sample_next(s, a, &mut self.rng),
        };
        let a = mdp::sample_action(self.policy, s, &mut self.rng);
        self.last = Some((s, a));
        Some((s, a))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub j_true: f64,
    pub success_rate: Option<f64>,
}

/// Exact discounted true reward and, when `goal` is given, the probability
/// of visiting the goal at some time `0..horizon` from `P0`.
pub fn evaluate_policy(
    mdp: &FiniteMdp,
    true_reward: &DMatrix<f64>,
    policy: &TabularPolicy,
    goal: Option<usize>,
    horizon: usize,
) -> Result<Evaluation> {
    let j_true = soft::policy_performance(mdp, true_reward, policy)?.j;
    let success_rate = match goal {
        None => None,
        Some(g) => Some(success_probability(mdp, policy, g, horizon)?),
    };
    Ok(Evaluation { j_true, success_rate })
}

pub fn success_probability(mdp: &FiniteMdp, policy: &TabularPolicy, goal: usize, horizon: usize) -> Result<f64> {
    mdp.check_state(goal)?;
    mdp.check_policy(policy)?;
    let chain = mdp.policy_chain(policy);
    let mut p = DVector::from_column_slice(mdp.initial_dist());
    let mut hit = 0.0;
    for t in 0..horizon {
        hit += p[goal];
        p[goal] = 0.0;
        if t + 1 < horizon {
            p = chain.tr_mul(&p);
        }
    }
    Ok(hit.clamp(0.0, 1.0))
}

#[derive(Serialize)]
struct TaskFile<'a> {
    goal: Option<usize>,
    mdp: &'a FiniteMdp,
    true_reward: Vec<Vec<f64>>,
    expert_policy: &'a TabularPolicy,
    d_train: &'static str,
    d_eval: Vec<String>,
}

/// Writes `task.json`, `d_train.csv` and `d_eval_<i>.csv` into `dir`.
pub fn dump_task(task: &MetaTask, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let d_eval: Vec<String> = (0..task.d_eval.len()).map(|i| format!("d_eval_{i}.csv")).collect();
    let file = TaskFile {
        goal: task.goal,
        mdp: &task.mdp,
        true_reward: task.true_reward.row_iter().map(|r| r.iter().copied().collect()).collect(),
        expert_policy: &task.expert,
        d_train: "d_train.csv",
        d_eval: d_eval.clone(),
    };
    std::fs::write(dir.join("task.json"), serde_json::to_string_pretty(&file)?)?;
    std::fs::write(dir.join("d_train.csv"), task.d_train.to_csv())?;
    for (name, traj) in d_eval.iter().zip(&task.d_eval) {
        std::fs::write(dir.join(name), traj.to_csv())?;
    }
    Ok(())
}
