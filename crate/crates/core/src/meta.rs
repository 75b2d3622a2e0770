//! Meta-prior training: per-task regularized adaptation, implicit
//! hyper-gradients and the outer update of `theta_bar`.
//!
//! The inner problem of task `j` is
//! `min_phi L(phi, D_train) + lambda / (2 (1 - gamma)) ||phi - theta_bar||^2`
//! with `L(phi, D) = sum_t gamma^t (-ln pi_phi(a_t|s_t))` summed over `D`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{FiniteMdp, StartSpec, Trajectory};
use crate::online::{self, EstimatorMode, MeritConfig, PrefixStats};
use crate::optim;
use crate::par;
use crate::policy::TabularPolicy;
use crate::reward::{ParamVector, RewardModel};
use crate::rng::SeededRng;
use crate::soft::{SoftOptions, SoftSolution};

/// One task of the family: shared dynamics, its own expert data.
#[derive(Clone, Debug)]
pub struct MetaTask {
    pub mdp: Arc<FiniteMdp>,
    pub true_reward: DMatrix<f64>,
    pub expert: TabularPolicy,
    pub goal: Option<usize>,
    pub d_train: Trajectory,
    pub d_eval: Vec<Trajectory>,
}

impl MetaTask {
    pub fn validate(&self) -> Result<()> {
        if self.d_train.is_empty() {
            return Err(Error::Validation("training trajectory is empty".into()));
        }
        if self.d_eval.is_empty() {
            return Err(Error::Validation("task needs at least one evaluation trajectory".into()));
        }
        self.d_train.check_bounds(&self.mdp)?;
        for traj in &self.d_eval {
            if traj.is_empty() {
                return Err(Error::Validation("evaluation trajectory is empty".into()));
            }
            traj.check_bounds(&self.mdp)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub lambda: f64,
    /// Inner curvature constant; `0.4 C_L` when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    pub inner_steps: usize,
    pub outer_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_mode")]
    pub mode: EstimatorMode,
    /// Use each evaluation trajectory's own start state instead of `P0` in
    /// the sampled hyper-gradient.
    #[serde(default)]
    pub per_start: bool,
    /// Multiplier of the outer step `(n + 1)^(-1/2)`.
    #[serde(default = "one")]
    pub outer_scale: f64,
    #[serde(default)]
    pub initial_prior: Option<ParamVector>,
    #[serde(default = "default_tail_tol")]
    pub tail_tol: f64,
    #[serde(skip)]
    pub soft: SoftOptions,
}

fn default_mode() -> EstimatorMode {
    EstimatorMode::Exact
}

fn one() -> f64 {
    1.0
}

fn default_tail_tol() -> f64 {
    1e-8
}

/// Smoothness constant and the admissible range of `lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Admissibility {
    pub c_l: f64,
    pub eta: f64,
    pub lambda_min: f64,
    pub admissible: bool,
}

impl MetaConfig {
    pub fn new(lambda: f64, inner_steps: usize, outer_steps: usize, batch_size: usize) -> Self {
        MetaConfig {
            lambda,
            eta: None,
            inner_steps,
            outer_steps,
            batch_size,
            mode: default_mode(),
            per_start: false,
            outer_scale: 1.0,
            initial_prior: None,
            tail_tol: default_tail_tol(),
            soft: SoftOptions::default(),
        }
    }

    /// `C_L = 2 C~ / (1 - gamma) + 4 C^3 / (1 - gamma)^4 + lambda`, with
    /// `lambda >= C_L / 2 + eta` required.
    pub fn admissibility(&self, model: &RewardModel, gamma: f64) -> Admissibility {
        let g = 1.0 - gamma;
        let a = 2.0 * model.hessian_norm_bound() / g + 4.0 * model.grad_norm_bound().powi(3) / g.powi(4);
        let c_l = a + self.lambda;
        let (eta, lambda_min) = match self.eta {
            None => (0.4 * c_l, 9.0 * a),
            Some(eta) => (eta, a + 2.0 * eta),
        };
        let admissible = eta > 0.0 && eta < c_l / 2.0 && self.lambda >= lambda_min * (1.0 - 1e-12);
        Admissibility {
            c_l,
            eta,
            lambda_min,
            admissible,
        }
    }

    pub fn validate(&self, model: &RewardModel, gamma: f64) -> Result<Admissibility> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.outer_scale > 0.0 && self.outer_scale.is_finite()) {
            return Err(Error::Config("outer_scale must be positive".into()));
        }
        if let Some(p) = &self.initial_prior {
            if p.len() != model.dim() || !p.is_finite() {
                return Err(Error::Config("initial prior does not match the reward model".into()));
            }
        }
        if gamma >= 1.0 {
            return Err(Error::Config("meta training needs gamma < 1".into()));
        }
        let adm = self.admissibility(model, gamma);
        if !adm.admissible {
            return Err(Error::Config(format!(
                "lambda = {} is not admissible: need lambda >= {:.6e} (C_L = {:.6e}, eta = {:.6e}); \
                 increase lambda or shrink the features",
                self.lambda, adm.lambda_min, adm.c_l, adm.eta
            )));
        }
        Ok(adm)
    }

    pub fn inner_step(&self, eta: f64, gamma: f64, k: usize) -> f64 {
        (1.0 - gamma) / (eta * (k + 1) as f64)
    }

    pub fn outer_step(&self, n: usize) -> f64 {
        self.outer_scale / ((n + 1) as f64).sqrt()
    }

    /// Stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdaptationResult {
    pub phi: ParamVector,
    /// Inner objective at `phi_0 ..= phi_K`.
    pub inner_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HyperGradient {
    pub h: Vec<f64>,
    /// Spectral norm of `(1 - gamma) / lambda * H`, the perturbation of the
    /// identity in the solved system.
    pub conditioning: f64,
}

fn weight_sum<'a>(mdp: &FiniteMdp, trajs: impl IntoIterator<Item = &'a Trajectory>) -> Result<DMatrix<f64>> {
    let mut w = DMatrix::zeros(mdp.n_states(), mdp.n_actions());
    for traj in trajs {
        w += PrefixStats::from_trajectory(mdp, traj)?.weights();
    }
    Ok(w)
}

fn nll(sol: &SoftSolution, weights: &DMatrix<f64>) -> f64 {
    let mut out = 0.0;
    for s in 0..weights.nrows() {
        for a in 0..weights.ncols() {
            let w = weights[(s, a)];
            if w != 0.0 {
                out -= w * (sol.q[(s, a)] - sol.v[s]);
            }
        }
    }
    out
}

/// `L(phi, D)` for a set of trajectories.
pub fn data_loss(model: &RewardModel, mdp: &FiniteMdp, phi: &[f64], data: &[Trajectory], opts: &SoftOptions) -> Result<f64> {
    let w = weight_sum(mdp, data)?;
    let sol = online::lower_solution(model, mdp, phi, opts)?;
    Ok(nll(&sol, &w))
}

/// Inner objective at `phi`.
pub fn inner_objective(
    model: &RewardModel,
    mdp: &FiniteMdp,
    phi: &[f64],
    task: &MetaTask,
    meta_prior: &[f64],
    cfg: &MetaConfig,
) -> Result<f64> {
    let gamma = mdp.discount();
    let loss = data_loss(model, mdp, phi, std::slice::from_ref(&task.d_train), &cfg.soft)?;
    let d2: f64 = phi.iter().zip(meta_prior).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(loss + 0.5 * cfg.lambda / (1.0 - gamma) * d2)
}

/// Rollout estimate of `sum_t gamma^t [m(s_t) - phi(s_t,a_t) - gamma n(s_t,a_t)]`
/// over `traj`: a learner rollout from `start`, minus the data, minus a
/// learner rollout glued after the last pair.
fn sampled_trajectory_term(
    model: &RewardModel,
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    traj: &Trajectory,
    start: StartSpec,
    tail_tol: f64,
    rng: &mut SeededRng,
    acc: &mut [f64],
) -> Result<()> {
    let gamma = mdp.discount();
    let len = traj.len();
    let h = online::tail_horizon(gamma, model.grad_norm_bound(), tail_tol).max(len);
    online::rollout_feature_sum(model, mdp, policy, start, h, 0, 0, rng, acc, 1.0)?;
    let mut w = 1.0;
    for &(s, a) in &traj.steps {
        for (o, f) in acc.iter_mut().zip(model.phi(s, a)) {
            *o -= w * f;
        }
        w *= gamma;
    }
    let (s, a) = traj.steps[len - 1];
    online::rollout_feature_sum(model, mdp, policy, StartSpec::StateAction(s, a), h - len + 1, 1, len - 1, rng, acc, -1.0)
}

/// Gradient of the inner objective at `phi`. Exact mode differentiates the
/// finite-data loss through linear solves; sampled mode uses learner
/// rollouts from the training start state.
#[allow(clippy::too_many_arguments)]
pub fn lower_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    phi: &[f64],
    task: &MetaTask,
    meta_prior: &[f64],
    cfg: &MetaConfig,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    Ok(lower_step_terms(model, mdp, phi, task, meta_prior, cfg, mode, rng)?.1)
}

#[allow(clippy::too_many_arguments)]
fn lower_step_terms(
    model: &RewardModel,
    mdp: &FiniteMdp,
    phi: &[f64],
    task: &MetaTask,
    meta_prior: &[f64],
    cfg: &MetaConfig,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<f64>)> {
    model.check_compatible(mdp)?;
    model.check_theta(phi)?;
    model.check_theta(meta_prior)?;
    task.validate()?;
    let gamma = mdp.discount();
    let reg = 1.0 / (1.0 - gamma);
    let w = weight_sum(mdp, std::iter::once(&task.d_train))?;
    match mode {
        EstimatorMode::Exact => {
            let (value, grad, _) = online::weighted_objective(model, mdp, phi, &w, reg, cfg.lambda, meta_prior, &cfg.soft)?;
            Ok((value, grad))
        }
        EstimatorMode::Sampled => {
            let sol = online::lower_solution(model, mdp, phi, &cfg.soft)?;
            let mut g = vec![0.0; model.dim()];
            let s0 = task.d_train.steps[0].0;
            sampled_trajectory_term(model, mdp, &sol.policy, &task.d_train, StartSpec::State(s0), cfg.tail_tol, rng, &mut g)?;
            let mut d2 = 0.0;
            for ((gk, p), b) in g.iter_mut().zip(phi).zip(meta_prior) {
                *gk += cfg.lambda * reg * (p - b);
                d2 += (p - b) * (p - b);
            }
            Ok((nll(&sol, &w) + 0.5 * cfg.lambda * reg * d2, g))
        }
    }
}

/// `K` descent steps `phi <- phi - beta_k g` from `phi_0 = theta_bar`.
pub fn adapt_task(
    model: &RewardModel,
    mdp: &FiniteMdp,
    task: &MetaTask,
    meta_prior: &[f64],
    cfg: &MetaConfig,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<AdaptationResult> {
    let gamma = mdp.discount();
    let adm = cfg.validate(model, gamma)?;
    let mut phi = ParamVector(meta_prior.to_vec());
    let mut inner_loss = Vec::with_capacity(cfg.inner_steps + 1);
    for k in 0..cfg.inner_steps {
        let (value, g) = lower_step_terms(model, mdp, &phi, task, meta_prior, cfg, mode, rng)?;
        inner_loss.push(value);
        phi.axpy(-cfg.inner_step(adm.eta, gamma, k), &g);
        if !phi.is_finite() {
            return Err(Error::Numerical {
                module: "meta-reg",
                message: format!("non-finite inner iterate at step {k}"),
            });
        }
    }
    inner_loss.push(inner_objective(model, mdp, &phi, task, meta_prior, cfg)?);
    Ok(AdaptationResult { phi, inner_loss })
}

/// Exact minimizer of the inner objective, by descent to `||grad|| <= tol`.
pub fn adaptation_optimum(
    model: &RewardModel,
    mdp: &FiniteMdp,
    task: &MetaTask,
    meta_prior: &[f64],
    cfg: &MetaConfig,
    tol: f64,
) -> Result<ParamVector> {
    let gamma = mdp.discount();
    let w = weight_sum(mdp, std::iter::once(&task.d_train))?;
    let reg = 1.0 / (1.0 - gamma);
    let f = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g, _) = online::weighted_objective(model, mdp, x, &w, reg, cfg.lambda, meta_prior, &cfg.soft)?;
        Ok((v, g))
    };
    let step = (1.0 - gamma) / (cfg.lambda + 4.0 * model.grad_norm_bound().powi(2) / (1.0 - gamma).powi(2));
    let min = optim::minimize(f, meta_prior.to_vec(), step, tol, 100_000)?;
    Ok(ParamVector(min.x))
}

/// Gradient of `L(., D_eval)` at `phi`, in the requested mode.
pub fn eval_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    phi: &[f64],
    task: &MetaTask,
    cfg: &MetaConfig,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let w = weight_sum(mdp, &task.d_eval)?;
    match mode {
        EstimatorMode::Exact => {
            let (_, grad, _) = online::weighted_objective(model, mdp, phi, &w, 0.0, cfg.lambda, phi, &cfg.soft)?;
            Ok(grad)
        }
        EstimatorMode::Sampled => {
            let sol = online::lower_solution(model, mdp, phi, &cfg.soft)?;
            let mut g = vec![0.0; model.dim()];
            for traj in &task.d_eval {
                let start = if cfg.per_start {
                    StartSpec::State(traj.steps[0].0)
                } else {
                    StartSpec::Initial
                };
                sampled_trajectory_term(model, mdp, &sol.policy, traj, start, cfg.tail_tol, rng, &mut g)?;
            }
            Ok(g)
        }
    }
}

/// Hessian surrogate `E[sum gamma^t grad^2 r | s_0] - sum_t gamma^t grad^2 r`
/// over the training data; zero for linear and tabular rewards.
fn hessian_surrogate(model: &RewardModel, mdp: &FiniteMdp, phi: &[f64], task: &MetaTask, cfg: &MetaConfig) -> Result<DMatrix<f64>> {
    let n = model.dim();
    if model.hessian_norm_bound() == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let sol = online::lower_solution(model, mdp, phi, &cfg.soft)?;
    let s0 = task.d_train.steps[0].0;
    let occ = crate::mdp::discounted_occupancy(mdp, &sol.policy, StartSpec::State(s0))?;
    let mut h = DMatrix::zeros(n, n);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let d = occ.d[(s, a)];
            if d != 0.0 {
                h += model.reward_hessian(phi, s, a)? * d;
            }
        }
    }
    let gamma = mdp.discount();
    let mut w = 1.0;
    for &(s, a) in &task.d_train.steps {
        h -= model.reward_hessian(phi, s, a)? * w;
        w *= gamma;
    }
    Ok(h)
}

/// `h = [I + (1 - gamma)/lambda H]^(-1) grad L(phi_K, D_eval)`.
pub fn hyper_gradient(
    model: &RewardModel,
    mdp: &FiniteMdp,
    task: &MetaTask,
    result: &AdaptationResult,
    cfg: &MetaConfig,
    mode: EstimatorMode,
    rng: &mut SeededRng,
) -> Result<HyperGradient> {
    let gamma = mdp.discount();
    let g = eval_gradient(model, mdp, &result.phi, task, cfg, mode, rng)?;
    let hbar = hessian_surrogate(model, mdp, &result.phi, task, cfg)? * ((1.0 - gamma) / cfg.lambda);
    let conditioning = if hbar.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        hbar.clone().svd(false, false).singular_values.max()
    };
    if conditioning >= 1.0 {
        return Err(Error::Numerical {
            module: "meta-reg",
            message: format!("hyper-gradient system is not diagonally dominant (norm {conditioning:.3}); increase lambda"),
        });
    }
    let n = g.len();
    let system = DMatrix::identity(n, n) + hbar;
    let h = linalg::solve_vec(system, &DVector::from_vec(g), "meta-reg")?;
    let h: Vec<f64> = h.iter().copied().collect();
    if !linalg::all_finite(&h) {
        return Err(Error::Numerical {
            module: "meta-reg",
            message: "non-finite hyper-gradient".into(),
        });
    }
    Ok(HyperGradient { h, conditioning })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetaTrainResult {
    pub theta_bar: ParamVector,
    /// Batch mean of `L(phi_K, D_eval)` per outer iteration.
    pub outer_loss: Vec<f64>,
    pub admissibility: Admissibility,
}

/// Outer loop: `theta_bar <- theta_bar - tau_n / B sum_j h_j`. Tasks are
/// drawn in order from `sampler`; adaptation within a batch runs in
/// parallel with per-task random streams.
pub fn meta_train<F>(model: &RewardModel, mut sampler: F, cfg: &MetaConfig, rng: &mut SeededRng) -> Result<MetaTrainResult>
where
    F: FnMut(&mut SeededRng) -> Result<MetaTask>,
{
    let mut theta_bar = cfg.initial_prior.clone().unwrap_or_else(|| ParamVector::zeros(model.dim()));
    let mut outer_loss = Vec::with_capacity(cfg.outer_steps);
    let mut admissibility = None;
    for n in 0..cfg.outer_steps {
        let tasks = (0..cfg.batch_size).map(|_| sampler(rng)).collect::<Result<Vec<_>>>()?;
        if admissibility.is_none() {
            admissibility = Some(cfg.validate(model, tasks[0].mdp.discount())?);
        }
        let base = rng.derive(n as u64);
        let out = par::map_range(tasks.len(), |j| -> Result<(Vec<f64>, f64)> {
            let task = &tasks[j];
            let mut r = base.derive(j as u64);
            let res = adapt_task(model, &task.mdp, task, &theta_bar, cfg, cfg.mode, &mut r)?;
            let hg = hyper_gradient(model, &task.mdp, task, &res, cfg, cfg.mode, &mut r)?;
            let loss = data_loss(model, &task.mdp, &res.phi, &task.d_eval, &cfg.soft)?;
            Ok((hg.h, loss))
        });
        let out = par::collect_results(out)?;
        let tau = cfg.outer_step(n) / cfg.batch_size as f64;
        let mut mean_loss = 0.0;
        for (h, loss) in &out {
            theta_bar.axpy(-tau, h);
            mean_loss += loss / out.len() as f64;
        }
        if !theta_bar.is_finite() {
            return Err(Error::Numerical {
                module: "meta-reg",
                message: format!("non-finite meta-prior at outer iteration {n}"),
            });
        }
        outer_loss.push(mean_loss);
    }
    let admissibility = match admissibility {
        Some(a) => a,
        None => cfg.admissibility(model, 0.0),
    };
    Ok(MetaTrainResult {
        theta_bar,
        outer_loss,
        admissibility,
    })
}

/// Meta-prior on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaCheckpoint {
    pub dim: usize,
    pub theta_bar: ParamVector,
    pub lambda: f64,
    pub config_hash: String,
}

impl MetaCheckpoint {
    pub fn new(theta_bar: ParamVector, cfg: &MetaConfig) -> Self {
        MetaCheckpoint {
            dim: theta_bar.len(),
            theta_bar,
            lambda: cfg.lambda,
            config_hash: cfg.hash(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: MetaCheckpoint = serde_json::from_str(&text)?;
        if ck.dim != ck.theta_bar.len() {
            return Err(Error::Validation(format!(
                "checkpoint dim {} does not match theta_bar length {}",
                ck.dim,
                ck.theta_bar.len()
            )));
        }
        Ok(ck)
    }

    /// Installs the prior into an online config.
    pub fn apply(&self, cfg: &mut MeritConfig) -> Result<()> {
        if !self.theta_bar.is_finite() {
            return Err(Error::Validation("checkpoint prior has non-finite entries".into()));
        }
        cfg.meta_prior = self.theta_bar.clone();
        Ok(())
    }
}
