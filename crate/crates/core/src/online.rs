//! Online reward and policy learning from a growing expert prefix.
//!
//! At time `t` the learner has seen pairs `0..=t` and minimizes, one gradient
//! step at a time, the prefix objective
//! `sum_{i<=t} gamma^i [-ln pi_theta(a_i|s_i) + (lambda/2) ||theta - theta_bar||^2]`,
//! where `pi_theta` is the soft-optimal policy for the reward `r_theta`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, FiniteMdp, StartSpec, Trajectory};
use crate::optim;
use crate::policy::TabularPolicy;
use crate::reward::{norm, FeatureValues, ParamVector, RewardModel};
use crate::rng::SeededRng;
use crate::soft::{self, SoftOptions, SoftSolution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// One soft policy-iteration step per observation.
    OneStep,
    /// Solve the lower-level problem to optimality at every step.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Monte-Carlo rollouts of the current policy.
    Sampled,
    /// Exact expectations from linear solves.
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Merit,
    ItIrl,
    NaiveMerit,
    NaiveIt,
    Hindsight,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Merit,
        BaselineKind::ItIrl,
        BaselineKind::NaiveMerit,
        BaselineKind::NaiveIt,
        BaselineKind::Hindsight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Merit => "merit",
            BaselineKind::ItIrl => "it_irl",
            BaselineKind::NaiveMerit => "naive_merit",
            BaselineKind::NaiveIt => "naive_it",
            BaselineKind::Hindsight => "hindsight",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}'")))
    }

    pub fn regularized(self) -> bool {
        matches!(self, BaselineKind::Merit | BaselineKind::NaiveMerit | BaselineKind::Hindsight)
    }

    /// Starts at the prior rather than at a random point.
    pub fn starts_at_prior(self) -> bool {
        self.regularized()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    SqrtDecay,
    LinearRewardDecay,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub lambda: f64,
    pub gamma: f64,
    /// Step for the constant kind; ignored otherwise.
    #[serde(default)]
    pub value: f64,
}

impl StepSchedule {
    /// `alpha_t = (1 - gamma) / (lambda sqrt(t + 1))`. Note `alpha_0` equals
    /// `(1 - gamma) / lambda`, the closed end of the admissible range.
    pub fn sqrt_decay(lambda: f64, gamma: f64) -> Result<Self> {
        Self::checked(ScheduleKind::SqrtDecay, lambda, gamma, 0.0)
    }

    /// `alpha_t = (1 - gamma) / (lambda (t + 1) (1 - gamma^(t+1)))`.
    pub fn linear_reward_decay(lambda: f64, gamma: f64) -> Result<Self> {
        Self::checked(ScheduleKind::LinearRewardDecay, lambda, gamma, 0.0)
    }

    pub fn constant(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Config(format!("constant step must be positive, got {value}")));
        }
        Ok(StepSchedule {
            kind: ScheduleKind::Constant,
            lambda: 1.0,
            gamma: 0.0,
            value,
        })
    }

    fn checked(kind: ScheduleKind, lambda: f64, gamma: f64, value: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("discount {gamma} outside [0,1)")));
        }
        Ok(StepSchedule {
            kind,
            lambda,
            gamma,
            value,
        })
    }

    /// `sup_t alpha_t`.
    pub fn max_step(&self) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.value,
            _ => step_size(self, 0),
        }
    }
}

pub fn step_size(schedule: &StepSchedule, t: usize) -> f64 {
    let StepSchedule {
        kind,
        lambda,
        gamma,
        value,
    } = *schedule;
    let tp1 = (t + 1) as f64;
    match kind {
        ScheduleKind::SqrtDecay => (1.0 - gamma) / (lambda * tp1.sqrt()),
        ScheduleKind::LinearRewardDecay => (1.0 - gamma) / (lambda * tp1 * (1.0 - gamma.powi((t + 1) as i32))),
        ScheduleKind::Constant => value,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeritConfig {
    pub lambda: f64,
    pub meta_prior: ParamVector,
    pub schedule: StepSchedule,
    /// Total rollout length. `None` picks, at time `t`, the larger of the
    /// tail-tolerance horizon and `t + 1`.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
    /// Rollouts averaged per expectation in sampled mode.
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    pub policy_mode: PolicyMode,
    pub estimator_mode: EstimatorMode,
    /// Standard deviation of the random start used by the unregularized
    /// baselines.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(skip)]
    pub initial_policy: Option<TabularPolicy>,
    #[serde(skip)]
    pub soft: SoftOptions,
}

fn default_tail_tol() -> f64 {
    1e-8
}

fn default_rollouts() -> usize {
    1
}

fn default_init_scale() -> f64 {
    0.1
}

impl MeritConfig {
    pub fn new(lambda: f64, meta_prior: ParamVector, schedule: StepSchedule) -> Self {
        MeritConfig {
            lambda,
            meta_prior,
            schedule,
            horizon: None,
            tail_tol: default_tail_tol(),
            rollouts: default_rollouts(),
            policy_mode: PolicyMode::OneStep,
            estimator_mode: EstimatorMode::Sampled,
            init_scale: default_init_scale(),
            initial_policy: None,
            soft: SoftOptions::default(),
        }
    }

    pub fn validate(&self, model: &RewardModel) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.rollouts == 0 {
            return Err(Error::Config("rollouts must be at least 1".into()));
        }
        if !(self.tail_tol > 0.0) {
            return Err(Error::Config("tail_tol must be positive".into()));
        }
        self.check_prior(model)
    }

    fn check_prior(&self, model: &RewardModel) -> Result<()> {
        if self.meta_prior.len() != model.dim() {
            return Err(Error::Config(format!(
                "meta prior has dimension {}, reward model has {}",
                self.meta_prior.len(),
                model.dim()
            )));
        }
        if !self.meta_prior.is_finite() {
            return Err(Error::Config("meta prior has non-finite entries".into()));
        }
        Ok(())
    }

    /// Rollout length used at time `t`.
    pub fn rollout_horizon(&self, bound: f64, gamma: f64, t: usize) -> Result<usize> {
        match self.horizon {
            Some(h) if t + 1 > h => Err(Error::Config(format!(
                "rollout horizon {h} is shorter than the observed prefix ({} pairs)",
                t + 1
            ))),
            Some(h) => Ok(h),
            None => Ok(tail_horizon(gamma, bound, self.tail_tol).max(t + 1)),
        }
    }
}

/// Smallest `H >= 1` with `gamma^H bound / (1 - gamma) <= tol`.
pub fn tail_horizon(gamma: f64, bound: f64, tol: f64) -> usize {
    if gamma == 0.0 || bound == 0.0 {
        return 1;
    }
    let h = ((tol * (1.0 - gamma) / bound).ln() / gamma.ln()).ceil();
    if h.is_finite() {
        (h.max(1.0) as usize).max(1)
    } else {
        1
    }
}

/// Discount-weighted visit counts `W(s,a) = sum_i gamma^i 1[(s_i,a_i) = (s,a)]`
/// of an expert prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixStats {
    weights: DMatrix<f64>,
    next_weight: f64,
    total_weight: f64,
    len: usize,
    gamma: f64,
}

impl PrefixStats {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        PrefixStats {
            weights: DMatrix::zeros(n_states, n_actions),
            next_weight: 1.0,
            total_weight: 0.0,
            len: 0,
            gamma,
        }
    }

    pub fn from_trajectory(mdp: &FiniteMdp, traj: &Trajectory) -> Result<Self> {
        traj.check_bounds(mdp)?;
        let mut st = Self::new(mdp.n_states(), mdp.n_actions(), mdp.discount());
        for &(s, a) in &traj.steps {
            st.push(s, a);
        }
        Ok(st)
    }

    pub fn push(&mut self, s: usize, a: usize) {
        self.weights[(s, a)] += self.next_weight;
        self.total_weight += self.next_weight;
        self.next_weight *= self.gamma;
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `sum_i gamma^i`, i.e. `(1 - gamma^(t+1)) / (1 - gamma)`.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `sum_i gamma^i phi(s_i, a_i)`.
    pub fn feature_sum(&self, model: &RewardModel) -> Vec<f64> {
        weighted_features(model, &self.weights)
    }
}

fn weighted_features(model: &RewardModel, w: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; model.dim()];
    for s in 0..w.nrows() {
        for a in 0..w.ncols() {
            let x = w[(s, a)];
            if x != 0.0 {
                for (o, f) in out.iter_mut().zip(model.phi(s, a)) {
                    *o += x * f;
                }
            }
        }
    }
    out
}

/// Soft-optimal solution for `r_theta`.
pub fn lower_solution(model: &RewardModel, mdp: &FiniteMdp, theta: &[f64], opts: &SoftOptions) -> Result<SoftSolution> {
    model.check_compatible(mdp)?;
    let r = model.reward_table(theta)?;
    soft::soft_value_iteration_with(mdp, &r, opts)
}

/// Value and gradient of
/// `sum_{s,a} w(s,a) (-ln pi_theta(a|s)) + (lambda c / 2) ||theta - theta_bar||^2`.
pub(crate) fn weighted_objective(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    weights: &DMatrix<f64>,
    reg_weight: f64,
    lambda: f64,
    prior: &[f64],
    opts: &SoftOptions,
) -> Result<(f64, Vec<f64>, SoftSolution)> {
    let sol = lower_solution(model, mdp, theta, opts)?;
    let fv = FeatureValues::compute(model, mdp, &sol.policy)?;
    let (nll, mut grad) = likelihood_terms(model, mdp, &sol, &fv, weights);
    let diff: Vec<f64> = theta.iter().zip(prior).map(|(a, b)| a - b).collect();
    for (g, d) in grad.iter_mut().zip(&diff) {
        *g += lambda * reg_weight * d;
    }
    let value = nll + 0.5 * lambda * reg_weight * diff.iter().map(|d| d * d).sum::<f64>();
    Ok((value, grad, sol))
}

/// `sum w(s,a) (-ln pi(a|s))` and its gradient
/// `sum w(s,a) [m(s) - phi(s,a) - gamma n(s,a)]`.
fn likelihood_terms(
    model: &RewardModel,
    mdp: &FiniteMdp,
    sol: &SoftSolution,
    fv: &FeatureValues,
    weights: &DMatrix<f64>,
) -> (f64, Vec<f64>) {
    let gamma = mdp.discount();
    let na = mdp.n_actions();
    let mut nll = 0.0;
    let mut grad = vec![0.0; model.dim()];
    for s in 0..weights.nrows() {
        for a in 0..na {
            let w = weights[(s, a)];
            if w == 0.0 {
                continue;
            }
            nll -= w * (sol.q[(s, a)] - sol.v[s]);
            let phi = model.phi(s, a);
            for (k, g) in grad.iter_mut().enumerate() {
                *g += w * (fv.m[(s, k)] - phi[k] - gamma * fv.n[(s * na + a, k)]);
            }
        }
    }
    (nll, grad)
}

fn check_problem(model: &RewardModel, mdp: &FiniteMdp, theta: &[f64], prefix: &Trajectory, cfg: &MeritConfig) -> Result<()> {
    model.check_compatible(mdp)?;
    model.check_theta(theta)?;
    cfg.check_prior(model)?;
    if prefix.is_empty() {
        return Err(Error::Domain("prefix must contain at least one pair".into()));
    }
    prefix.check_bounds(mdp)
}

/// `sum_{i<=t} L_i(theta)` over the pairs of `prefix`.
pub fn prefix_loss(model: &RewardModel, mdp: &FiniteMdp, theta: &[f64], prefix: &Trajectory, cfg: &MeritConfig) -> Result<f64> {
    check_problem(model, mdp, theta, prefix, cfg)?;
    let st = PrefixStats::from_trajectory(mdp, prefix)?;
    let sol = lower_solution(model, mdp, theta, &cfg.soft)?;
    let mut nll = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = st.weights[(s, a)];
            if w != 0.0 {
                nll -= w * (sol.q[(s, a)] - sol.v[s]);
            }
        }
    }
    let d2: f64 = theta
        .iter()
        .zip(cfg.meta_prior.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(nll + 0.5 * cfg.lambda * st.total_weight() * d2)
}

/// Exact gradient of [`prefix_loss`], valid for any dynamics:
/// `sum_i gamma^i [grad V(s_i) - grad Q(s_i,a_i)] + lambda c_t (theta - theta_bar)`
/// with `c_t = (1 - gamma^(t+1)) / (1 - gamma)`.
pub fn exact_prefix_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    prefix: &Trajectory,
    cfg: &MeritConfig,
) -> Result<Vec<f64>> {
    check_problem(model, mdp, theta, prefix, cfg)?;
    let st = PrefixStats::from_trajectory(mdp, prefix)?;
    let (_, grad, _) = weighted_objective(
        model,
        mdp,
        theta,
        &st.weights,
        st.total_weight(),
        cfg.lambda,
        &cfg.meta_prior,
        &cfg.soft,
    )?;
    Ok(grad)
}

/// Telescoped form
/// `E[sum_i gamma^i phi | S_0 = s_0] - sum_{i<=t} gamma^i phi_i
///  - E[sum_{i>t} gamma^i phi | S_t = s_t, A_t = a_t] + lambda c_t (theta - theta_bar)`.
/// It equals [`exact_prefix_gradient`] when every prefix transition is
/// deterministic and is its expectation over the expert's transitions
/// otherwise.
pub fn lemma_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    prefix: &Trajectory,
    cfg: &MeritConfig,
) -> Result<Vec<f64>> {
    check_problem(model, mdp, theta, prefix, cfg)?;
    let st = PrefixStats::from_trajectory(mdp, prefix)?;
    let sol = lower_solution(model, mdp, theta, &cfg.soft)?;
    let fv = FeatureValues::compute(model, mdp, &sol.policy)?;
    let s0 = prefix.steps[0].0;
    let (st_, at) = *prefix.steps.last().unwrap();
    let tail = mdp.discount().powi(prefix.len() as i32);
    let expert = st.feature_sum(model);
    let next = fv.next(st_, at);
    Ok((0..model.dim())
        .map(|k| {
            fv.m[(s0, k)] - expert[k] - tail * next[k]
                + cfg.lambda * st.total_weight() * (theta[k] - cfg.meta_prior[k])
        })
        .collect())
}

/// Per-pair gradients `grad L_i(theta)`, each assembled from its own
/// occupancy solves.
pub fn per_term_gradients(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    prefix: &Trajectory,
    cfg: &MeritConfig,
) -> Result<Vec<Vec<f64>>> {
    check_problem(model, mdp, theta, prefix, cfg)?;
    let sol = lower_solution(model, mdp, theta, &cfg.soft)?;
    let dim = model.dim();
    let gamma = mdp.discount();
    let mut w = 1.0;
    let mut out = Vec::with_capacity(prefix.len());
    for &(s, a) in &prefix.steps {
        let from_s = mdp::discounted_occupancy(mdp, &sol.policy, StartSpec::State(s))?;
        let from_sa = mdp::discounted_occupancy(mdp, &sol.policy, StartSpec::StateAction(s, a))?;
        let g = (0..dim)
            .map(|k| {
                let dv = from_s.expectation(|x, y| model.phi(x, y)[k]);
                let dq = from_sa.expectation(|x, y| model.phi(x, y)[k]);
                w * (dv - dq) + cfg.lambda * w * (theta[k] - cfg.meta_prior[k])
            })
            .collect();
        out.push(g);
        w *= gamma;
    }
    Ok(out)
}

/// Central differences of [`prefix_loss`].
pub fn finite_difference_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    prefix: &Trajectory,
    cfg: &MeritConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {eps}")));
    }
    check_problem(model, mdp, theta, prefix, cfg)?;
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            x[k] = theta[k] + eps;
            let up = prefix_loss(model, mdp, &x, prefix, cfg)?;
            x[k] = theta[k] - eps;
            let down = prefix_loss(model, mdp, &x, prefix, cfg)?;
            x[k] = theta[k];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

/// `||(1/(t+1)) sum_{i<=t} grad L_i(theta)||^2` over the pairs of `prefix`,
/// from the aggregated exact gradient.
pub fn local_regret(model: &RewardModel, mdp: &FiniteMdp, theta: &[f64], prefix: &Trajectory, cfg: &MeritConfig) -> Result<f64> {
    let g = exact_prefix_gradient(model, mdp, theta, prefix, cfg)?;
    let n = prefix.len() as f64;
    Ok(g.iter().map(|x| x * x).sum::<f64>() / (n * n))
}

/// Same quantity as [`local_regret`], summing [`per_term_gradients`].
pub fn local_regret_per_term(
    model: &RewardModel,
    mdp: &FiniteMdp,
    theta: &[f64],
    prefix: &Trajectory,
    cfg: &MeritConfig,
) -> Result<f64> {
    let terms = per_term_gradients(model, mdp, theta, prefix, cfg)?;
    let mut sum = vec![0.0; model.dim()];
    for g in &terms {
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    let n = prefix.len() as f64;
    Ok(sum.iter().map(|x| x * x).sum::<f64>() / (n * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub alpha: f64,
    pub grad_norm: f64,
    /// `||theta_{t+1} - theta_bar||`.
    pub theta_dist_to_prior: f64,
    /// Local regret at `theta_t` over pairs `0..=t`.
    pub local_regret: Option<f64>,
    /// `L_t(theta_t)`.
    pub loss: Option<f64>,
    /// `L_t(theta*)` for the comparator, when one is supplied.
    pub comparator_loss: Option<f64>,
    /// Discounted true reward of the policy after the update.
    pub j_true: Option<f64>,
    /// Goal-reaching probability of the policy after the update.
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState {
    /// Number of pairs consumed so far.
    pub t: usize,
    pub theta: ParamVector,
    pub policy: TabularPolicy,
    pub prefix: Trajectory,
    pub stats: PrefixStats,
    pub history: Vec<StepRecord>,
}

impl OnlineState {
    /// Initial state: `theta_0 = theta_bar` for the regularized kinds and
    /// `init_scale * N(0, I)` otherwise; `pi_0` from the config or uniform.
    pub fn new(model: &RewardModel, mdp: &FiniteMdp, kind: BaselineKind, cfg: &MeritConfig, rng: &mut SeededRng) -> Result<Self> {
        model.check_compatible(mdp)?;
        cfg.validate(model)?;
        let theta = if kind.starts_at_prior() {
            cfg.meta_prior.clone()
        } else {
            ParamVector((0..model.dim()).map(|_| cfg.init_scale * rng.standard_normal()).collect())
        };
        let policy = match &cfg.initial_policy {
            Some(p) => {
                mdp.check_policy(p)?;
                p.clone()
            }
            None => TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
        };
        Ok(OnlineState {
            t: 0,
            theta,
            policy,
            prefix: Trajectory::default(),
            stats: PrefixStats::new(mdp.n_states(), mdp.n_actions(), mdp.discount()),
            history: Vec::new(),
        })
    }
}

/// `sum_k gamma^(offset+k) phi(s_k, a_k)` over a rollout, skipping the first
/// `skip` steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rollout_feature_sum(
    model: &RewardModel,
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
    horizon: usize,
    skip: usize,
    offset: usize,
    rng: &mut SeededRng,
    acc: &mut [f64],
    scale: f64,
) -> Result<()> {
    let gamma = mdp.discount();
    let mut w = gamma.powi(offset as i32);
    mdp::rollout_visit(mdp, policy, start, horizon, rng, |k, s, a| {
        if k >= skip {
            for (o, f) in acc.iter_mut().zip(model.phi(s, a)) {
                *o += scale * w * f;
            }
        }
        w *= gamma;
    })
}

/// `E[sum_{i<len} gamma^i phi(S_i, A_i) | S_0 = s0]` by forward propagation.
fn truncated_feature_sum(model: &RewardModel, mdp: &FiniteMdp, policy: &TabularPolicy, s0: usize, len: usize) -> Vec<f64> {
    let ns = mdp.n_states();
    let chain = mdp.policy_chain(policy);
    let mut p = nalgebra::DVector::zeros(ns);
    p[s0] = 1.0;
    let mut out = vec![0.0; model.dim()];
    let mut w = 1.0;
    for i in 0..len {
        for s in 0..ns {
            let ps = p[s];
            if ps == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let c = w * ps * policy.prob(s, a);
                if c != 0.0 {
                    for (o, f) in out.iter_mut().zip(model.phi(s, a)) {
                        *o += c * f;
                    }
                }
            }
        }
        w *= mdp.discount();
        if i + 1 < len {
            p = chain.tr_mul(&p);
        }
    }
    out
}

/// Update direction of `kind` at time `t = state.t`, after observing
/// `new_pair`, with learner policy `policy_next`.
///
/// - `merit`: learner rollout from `s_0` minus the expert prefix glued to a
///   learner rollout from `(s_t, a_t)`, plus the regularizer.
/// - `it_irl`: the same without the regularizer.
/// - `naive_merit` / `naive_it`: both sums truncated at `i <= t`.
/// - `hindsight`: learner rollout minus the complete expert trajectory
///   `full_expert`, plus the regularizer.
#[allow(clippy::too_many_arguments)]
pub fn baseline_gradient(
    kind: BaselineKind,
    model: &RewardModel,
    mdp: &FiniteMdp,
    state: &OnlineState,
    new_pair: (usize, usize),
    policy_next: &TabularPolicy,
    cfg: &MeritConfig,
    full_expert: Option<&Trajectory>,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    model.check_compatible(mdp)?;
    mdp.check_pair(new_pair.0, new_pair.1)?;
    mdp.check_policy(policy_next)?;
    cfg.check_prior(model)?;
    let t = state.t;
    let mut stats = state.stats.clone();
    stats.push(new_pair.0, new_pair.1);
    let s0 = state.prefix.steps.first().map_or(new_pair.0, |p| p.0);
    let (st, at) = new_pair;
    let dim = model.dim();
    let gamma = mdp.discount();
    let bound = model.grad_norm_bound();

    let mut g = vec![0.0; dim];
    match kind {
        BaselineKind::Merit | BaselineKind::ItIrl => {
            g_sub(&mut g, &stats.feature_sum(model));
            match cfg.estimator_mode {
                EstimatorMode::Exact => {
                    let fv = FeatureValues::compute(model, mdp, policy_next)?;
                    let tail = gamma.powi((t + 1) as i32);
                    let next = fv.next(st, at);
                    for k in 0..dim {
                        g[k] += fv.m[(s0, k)] - tail * next[k];
                    }
                }
                EstimatorMode::Sampled => {
                    let h = cfg.rollout_horizon(bound, gamma, t)?;
                    let scale = 1.0 / cfg.rollouts as f64;
                    for _ in 0..cfg.rollouts {
                        rollout_feature_sum(model, mdp, policy_next, StartSpec::State(s0), h, 0, 0, rng, &mut g, scale)?;
                        rollout_feature_sum(
                            model,
                            mdp,
                            policy_next,
                            StartSpec::StateAction(st, at),
                            h - t,
                            1,
                            t,
                            rng,
                            &mut g,
                            -scale,
                        )?;
                    }
                }
            }
        }
        BaselineKind::NaiveMerit | BaselineKind::NaiveIt => {
            g_sub(&mut g, &stats.feature_sum(model));
            match cfg.estimator_mode {
                EstimatorMode::Exact => {
                    let learner = truncated_feature_sum(model, mdp, policy_next, s0, t + 1);
                    g_add(&mut g, &learner);
                }
                EstimatorMode::Sampled => {
                    let scale = 1.0 / cfg.rollouts as f64;
                    for _ in 0..cfg.rollouts {
                        rollout_feature_sum(model, mdp, policy_next, StartSpec::State(s0), t + 1, 0, 0, rng, &mut g, scale)?;
                    }
                }
            }
        }
        BaselineKind::Hindsight => {
            let full = full_expert.ok_or_else(|| {
                Error::Config("hindsight needs the complete expert trajectory".into())
            })?;
            if full.is_empty() {
                return Err(Error::Config("hindsight needs a nonempty expert trajectory".into()));
            }
            let full_stats = PrefixStats::from_trajectory(mdp, full)?;
            let s0 = full.steps[0].0;
            g_sub(&mut g, &full_stats.feature_sum(model));
            match cfg.estimator_mode {
                EstimatorMode::Exact => {
                    let fv = FeatureValues::compute(model, mdp, policy_next)?;
                    for k in 0..dim {
                        g[k] += fv.m[(s0, k)];
                    }
                }
                EstimatorMode::Sampled => {
                    let h = cfg.rollout_horizon(bound, gamma, t)?;
                    let scale = 1.0 / cfg.rollouts as f64;
                    for _ in 0..cfg.rollouts {
                        rollout_feature_sum(model, mdp, policy_next, StartSpec::State(s0), h, 0, 0, rng, &mut g, scale)?;
                    }
                }
            }
        }
    }
    if kind.regularized() {
        let c = cfg.lambda * stats.total_weight();
        for k in 0..dim {
            g[k] += c * (state.theta[k] - cfg.meta_prior[k]);
        }
    }
    Ok(g)
}

fn g_add(g: &mut [f64], x: &[f64]) {
    for (a, b) in g.iter_mut().zip(x) {
        *a += b;
    }
}

fn g_sub(g: &mut [f64], x: &[f64]) {
    for (a, b) in g.iter_mut().zip(x) {
        *a -= b;
    }
}

/// Learner update direction `g_t` of the in-trajectory method.
pub fn estimate_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    state: &OnlineState,
    new_pair: (usize, usize),
    policy_next: &TabularPolicy,
    cfg: &MeritConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    baseline_gradient(BaselineKind::Merit, model, mdp, state, new_pair, policy_next, cfg, None, rng)
}

/// Policy update from `(theta_t, pi_t)`: one soft policy-iteration step or
/// the exact soft-optimal policy.
pub fn next_policy(
    model: &RewardModel,
    mdp: &FiniteMdp,
    state: &OnlineState,
    cfg: &MeritConfig,
    lower: Option<&SoftSolution>,
) -> Result<TabularPolicy> {
    match cfg.policy_mode {
        PolicyMode::OneStep => {
            let r = model.reward_table(&state.theta)?;
            let q = soft::soft_policy_evaluation_lenient(mdp, &r, &state.policy)?;
            Ok(soft::policy_improvement(&q))
        }
        PolicyMode::Exact => match lower {
            Some(sol) => Ok(sol.policy.clone()),
            None => Ok(lower_solution(model, mdp, &state.theta, &cfg.soft)?.policy),
        },
    }
}

/// One online update of `kind` after observing `new_pair`.
#[allow(clippy::too_many_arguments)]
pub fn online_step(
    kind: BaselineKind,
    model: &RewardModel,
    mdp: &FiniteMdp,
    mut state: OnlineState,
    new_pair: (usize, usize),
    cfg: &MeritConfig,
    full_expert: Option<&Trajectory>,
    lower: Option<&SoftSolution>,
    rng: &mut SeededRng,
) -> Result<OnlineState> {
    let t = state.t;
    let policy_next = next_policy(model, mdp, &state, cfg, lower)?;
    let g = baseline_gradient(kind, model, mdp, &state, new_pair, &policy_next, cfg, full_expert, rng)?;
    let alpha = step_size(&cfg.schedule, t);
    state.theta.axpy(-alpha, &g);
    if !state.theta.is_finite() {
        return Err(Error::numerical("irl-online", format!("non-finite reward parameter at step {t}")));
    }
    state.policy = policy_next;
    state.prefix.push(new_pair);
    state.stats.push(new_pair.0, new_pair.1);
    state.t += 1;
    state.history.push(StepRecord {
        t,
        alpha,
        grad_norm: norm(&g),
        theta_dist_to_prior: state.theta.dist(&cfg.meta_prior),
        local_regret: None,
        loss: None,
        comparator_loss: None,
        j_true: None,
        success_rate: None,
    });
    Ok(state)
}

/// One step of the in-trajectory method (policy update, gradient estimate,
/// reward update).
pub fn merit_step(
    model: &RewardModel,
    mdp: &FiniteMdp,
    state: OnlineState,
    new_pair: (usize, usize),
    cfg: &MeritConfig,
    rng: &mut SeededRng,
) -> Result<OnlineState> {
    online_step(BaselineKind::Merit, model, mdp, state, new_pair, cfg, None, None, rng)
}

/// Minimizer of the expert-visitation objective
/// `E_{mu_E}[-ln pi_theta(a|s)] + (lambda/2) ||theta - theta_bar||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparator {
    pub theta: ParamVector,
    pub policy: TabularPolicy,
    pub q: DMatrix<f64>,
    pub v: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
}

pub fn stationary_comparator(
    model: &RewardModel,
    mdp: &FiniteMdp,
    expert: &TabularPolicy,
    cfg: &MeritConfig,
    tol: f64,
) -> Result<Comparator> {
    model.check_compatible(mdp)?;
    cfg.validate(model)?;
    let mu = mdp::stationary_distribution(mdp, expert)?.state_action;
    let step0 = 1.0 / (cfg.lambda + model.grad_norm_bound().powi(2) / (1.0 - mdp.discount()).powi(2));
    let min = optim::minimize(
        |x| {
            let (v, g, _) = weighted_objective(model, mdp, x, &mu, 1.0, cfg.lambda, &cfg.meta_prior, &cfg.soft)?;
            Ok((v, g))
        },
        cfg.meta_prior.0.clone(),
        step0,
        tol,
        200_000,
    )?;
    let sol = lower_solution(model, mdp, &min.x, &cfg.soft)?;
    Ok(Comparator {
        theta: ParamVector(min.x),
        policy: sol.policy,
        q: sol.q,
        v: sol.v,
        grad_norm: min.grad_norm,
        iterations: min.iterations,
    })
}

/// Per-run instrumentation inputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Ground-truth reward table for `J_true`.
    pub true_reward: Option<&'a DMatrix<f64>>,
    /// Comparator for loss regret.
    pub comparator: Option<&'a Comparator>,
    /// Complete expert trajectory (required by hindsight).
    pub full_expert: Option<&'a Trajectory>,
    /// Record local regret and `L_t(theta_t)` at every step.
    pub instrument: bool,
    /// `(goal state, horizon)` for per-step success rates.
    pub success: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub local: Vec<f64>,
    pub cumulative_local: Vec<f64>,
    pub loss: Vec<f64>,
    pub comparator_loss: Vec<f64>,
}

impl RegretRecord {
    /// `sum_{t<T} l_t`.
    pub fn local_sum(&self, horizon: usize) -> f64 {
        self.local[..horizon.min(self.local.len())].iter().sum()
    }

    /// `sum_{from<=t<to} [L_t(theta_t) - L_t(theta*)]`, summed directly.
    pub fn loss_regret_between(&self, from: usize, to: usize) -> f64 {
        (from..to.min(self.loss.len()))
            .map(|t| self.loss[t] - self.comparator_loss[t])
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineRun {
    pub state: OnlineState,
    pub regret: RegretRecord,
    pub j_true: Vec<f64>,
    pub success_rate: Vec<f64>,
}

impl OnlineRun {
    /// CSV with header
    /// `t,alpha,grad_norm,local_regret,J_true,success_rate,theta_dist_to_prior`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("# schema: run/v1\nt,alpha,grad_norm,local_regret,J_true,success_rate,theta_dist_to_prior\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.state.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.t,
                r.alpha,
                r.grad_norm,
                opt(r.local_regret),
                opt(r.j_true),
                opt(r.success_rate),
                r.theta_dist_to_prior
            );
        }
        out
    }

    /// `max_t ||theta_t - theta_bar||` including `theta_0`.
    pub fn max_dist_to_prior(&self, initial: f64) -> f64 {
        self.state
            .history
            .iter()
            .map(|r| r.theta_dist_to_prior)
            .fold(initial, f64::max)
    }
}

/// Runs `horizon` online steps of `kind` on pairs drawn lazily from `expert`.
#[allow(clippy::too_many_arguments)]
pub fn run_online<I>(
    model: &RewardModel,
    mdp: &FiniteMdp,
    expert: I,
    horizon: usize,
    kind: BaselineKind,
    cfg: &MeritConfig,
    opts: &RunOptions<'_>,
    rng: &mut SeededRng,
) -> Result<OnlineRun>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut state = OnlineState::new(model, mdp, kind, cfg, rng)?;
    let gamma = mdp.discount();
    let mut stream = expert.into_iter();
    let mut regret = RegretRecord::default();
    let mut j_true = Vec::new();
    let mut success_rate = Vec::new();
    let mut cum = 0.0;
    for t in 0..horizon {
        let pair = stream.next().ok_or(Error::StreamExhausted {
            available: t,
            requested: horizon,
        })?;
        mdp.check_pair(pair.0, pair.1)?;
        let need_lower = opts.instrument || cfg.policy_mode == PolicyMode::Exact;
        let lower = if need_lower {
            Some(lower_solution(model, mdp, &state.theta, &cfg.soft)?)
        } else {
            None
        };
        let mut instrumented = None;
        if opts.instrument {
            let sol = lower.as_ref().unwrap();
            let mut stats = state.stats.clone();
            stats.push(pair.0, pair.1);
            let fv = FeatureValues::compute(model, mdp, &sol.policy)?;
            let (_, mut grad) = likelihood_terms(model, mdp, sol, &fv, &stats.weights);
            let c = cfg.lambda * stats.total_weight();
            for k in 0..model.dim() {
                grad[k] += c * (state.theta[k] - cfg.meta_prior[k]);
            }
            let n = (t + 1) as f64;
            let ell = grad.iter().map(|x| x * x).sum::<f64>() / (n * n);
            let wt = gamma.powi(t as i32);
            let reg = 0.5 * cfg.lambda * wt * state.theta.dist(&cfg.meta_prior).powi(2);
            let loss = -wt * (sol.q[(pair.0, pair.1)] - sol.v[pair.0]) + reg;
            let comp = opts.comparator.map(|c| {
                -wt * (c.q[(pair.0, pair.1)] - c.v[pair.0])
                    + 0.5 * cfg.lambda * wt * c.theta.dist(&cfg.meta_prior).powi(2)
            });
            instrumented = Some((ell, loss, comp));
        }
        state = online_step(kind, model, mdp, state, pair, cfg, opts.full_expert, lower.as_ref(), rng)?;
        let rec = state.history.last_mut().unwrap();
        if let Some((ell, loss, comp)) = instrumented {
            rec.local_regret = Some(ell);
            rec.loss = Some(loss);
            rec.comparator_loss = comp;
            cum += ell;
            regret.local.push(ell);
            regret.cumulative_local.push(cum);
            regret.loss.push(loss);
            if let Some(c) = comp {
                regret.comparator_loss.push(c);
            }
        }
        if let Some(r) = opts.true_reward {
            let j = soft::policy_performance(mdp, r, &state.policy)?.j;
            rec.j_true = Some(j);
            j_true.push(j);
        }
        if let Some((goal, h)) = opts.success {
            let p = crate::envs::success_probability(mdp, &state.policy, goal, h)?;
            state.history.last_mut().unwrap().success_rate = Some(p);
            success_rate.push(p);
        }
    }
    Ok(OnlineRun {
        state,
        regret,
        j_true,
        success_rate,
    })
}
