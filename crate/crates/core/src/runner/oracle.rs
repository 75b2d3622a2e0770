use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::envs::{self, GridworldSpec};
use crate::error::Result;
use crate::linalg;
use crate::mdp::{self, FiniteMdp, StartSpec, Trajectory};
use crate::meta::{self, MetaConfig, MetaTask};
use crate::online::{self, BaselineKind, EstimatorMode, MeritConfig, PolicyMode, RunOptions, StepSchedule};
use crate::par;
use crate::policy::TabularPolicy;
use crate::reward::{ParamVector, RewardModel};
use crate::rng::SeededRng;
use crate::soft;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub name: String,
    pub passed: bool,
    pub discrepancy: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<OracleEntry>,
}

impl OracleReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Knobs of the suite. `gamma_shift` perturbs the discount the contraction
/// check hands to the operator under test while the bound keeps the true
/// discount.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    pub seed: u64,
    pub gamma_shift: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            seed: 0,
            gamma_shift: 0.0,
        }
    }
}

/// Errors reported in place of a measured discrepancy.
const FAILED: f64 = f64::MAX;

fn entry(name: &str, tolerance: f64, measured: Result<f64>) -> OracleEntry {
    match measured {
        Ok(d) => OracleEntry {
            name: name.into(),
            passed: d.is_finite() && d <= tolerance,
            discrepancy: if d.is_finite() { d } else { FAILED },
            tolerance,
            error: None,
        },
        Err(e) => OracleEntry {
            name: name.into(),
            passed: false,
            discrepancy: FAILED,
            tolerance,
            error: Some(e.to_string()),
        },
    }
}

pub fn oracle_check_suite(opts: &OracleOptions) -> OracleReport {
    let seed = opts.seed;
    type Check = (&'static str, f64, Box<dyn Fn() -> Result<f64> + Sync + Send>);
    let gamma_shift = opts.gamma_shift;
    let checks: Vec<Check> = vec![
        ("prefix_gradient_vs_finite_difference", 1e-5, Box::new(move || prefix_gradient_fd(seed, 5))),
        ("telescoped_gradient_deterministic", 1e-8, Box::new(move || telescoped_vs_exact(seed))),
        ("meta_inner_gradient_vs_finite_difference", 1e-5, Box::new(move || meta_inner_fd(seed))),
        ("meta_eval_gradient_vs_finite_difference", 1e-5, Box::new(move || meta_eval_fd(seed))),
        ("hyper_gradient_identity", 1e-12, Box::new(move || hyper_identity(seed))),
        ("soft_bellman_contraction", 1e-12, Box::new(move || contraction(seed, gamma_shift))),
        ("policy_improvement", 1e-8, Box::new(move || improvement(seed))),
        ("iterate_bound", 1e-9, Box::new(move || iterate_bound(seed))),
        ("occupancy_vs_rollouts", 4.5, Box::new(move || occupancy_vs_rollouts(seed))),
        ("regret_identity", 1e-9, Box::new(move || regret_identity(seed))),
    ];
    let measured = par::map_slice(&checks, |(_, _, f)| f());
    let checks: Vec<OracleEntry> = checks
        .iter()
        .zip(measured)
        .map(|((name, tol, _), m)| entry(name, *tol, m))
        .collect();
    OracleReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::sup_norm(&diff) / (1.0 + linalg::sup_norm(a))
}

/// 5 x 5 gridworld dynamics with random linear features of dimension `dim`.
pub fn random_linear_grid(slip: f64, dim: usize, rng: &mut SeededRng) -> Result<(FiniteMdp, RewardModel)> {
    let mut spec = GridworldSpec::open(5, 5, (4, 4));
    spec.slip_prob = slip;
    let world = envs::build_gridworld(&spec)?;
    let f: Vec<f64> = (0..world.mdp.n_states() * 4 * dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let model = RewardModel::linear(world.mdp.n_states(), 4, dim, f)?;
    Ok((world.mdp, model))
}

fn random_theta(dim: usize, scale: f64, rng: &mut SeededRng) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.standard_normal()).collect()
}

fn plain_config(lambda: f64, prior: Vec<f64>, gamma: f64) -> Result<MeritConfig> {
    let mut cfg = MeritConfig::new(lambda, ParamVector(prior), StepSchedule::sqrt_decay(lambda, gamma)?);
    cfg.tail_tol = 1e-12;
    Ok(cfg)
}

fn prefix_gradient_fd(seed: u64, instances: usize) -> Result<f64> {
    let errs = par::map_range(instances, |i| -> Result<f64> {
        let mut rng = SeededRng::new(seed).derive(100).derive(i as u64);
        let dim = 2 + rng.below(29);
        let (mdp, model) = random_linear_grid(0.1, dim, &mut rng)?;
        let theta = random_theta(dim, 0.5, &mut rng);
        let len = 3 + rng.below(8);
        let pi = TabularPolicy::uniform(mdp.n_states(), 4);
        let prefix = mdp::rollout(&mdp, &pi, StartSpec::Initial, len, &mut rng)?;
        let cfg = plain_config(0.3, random_theta(dim, 0.2, &mut rng), mdp.discount())?;
        let exact = online::exact_prefix_gradient(&model, &mdp, &theta, &prefix, &cfg)?;
        let fd = online::finite_difference_gradient(&model, &mdp, &theta, &prefix, &cfg, 1e-5)?;
        Ok(rel_inf(&exact, &fd))
    });
    Ok(par::collect_results(errs)?.into_iter().fold(0.0, f64::max))
}

fn telescoped_vs_exact(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).derive(200);
    let (mdp, model) = random_linear_grid(0.0, 6, &mut rng)?;
    let theta = random_theta(6, 0.5, &mut rng);
    let pi = TabularPolicy::uniform(mdp.n_states(), 4);
    let prefix = mdp::rollout(&mdp, &pi, StartSpec::Initial, 7, &mut rng)?;
    let cfg = plain_config(0.5, vec![0.0; 6], mdp.discount())?;
    let exact = online::exact_prefix_gradient(&model, &mdp, &theta, &prefix, &cfg)?;
    let lemma = online::lemma_gradient(&model, &mdp, &theta, &prefix, &cfg)?;
    Ok(rel_inf(&exact, &lemma))
}

fn meta_task(seed: u64) -> Result<(RewardModel, MetaTask)> {
    let mut rng = SeededRng::new(seed).derive(300);
    let mdp = envs::random_mdp(6, 3, 3, 0.7, &mut rng)?;
    let dim = 4;
    let f: Vec<f64> = (0..18 * dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let model = RewardModel::linear(6, 3, dim, f)?;
    let true_reward = DMatrix::from_fn(6, 3, |_, _| rng.uniform());
    let expert = envs::expert_policy(&mdp, &true_reward, envs::ExpertKind::Soft)?;
    let d_train = mdp::rollout(&mdp, &expert, StartSpec::Initial, 8, &mut rng)?;
    let d_eval = (0..3)
        .map(|_| mdp::rollout(&mdp, &expert, StartSpec::Initial, 8, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let task = MetaTask {
        mdp: Arc::new(mdp),
        true_reward,
        expert,
        goal: None,
        d_train,
        d_eval,
    };
    Ok((model, task))
}

fn central_fd(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + eps;
            let up = f(&p)?;
            p[k] = x[k] - eps;
            let down = f(&p)?;
            p[k] = x[k];
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

fn meta_inner_fd(seed: u64) -> Result<f64> {
    let (model, task) = meta_task(seed)?;
    let mut rng = SeededRng::new(seed).derive(301);
    let phi = random_theta(model.dim(), 0.5, &mut rng);
    let prior = random_theta(model.dim(), 0.5, &mut rng);
    let cfg = MetaConfig::new(0.4, 1, 1, 1);
    let g = meta::lower_gradient(&model, &task.mdp, &phi, &task, &prior, &cfg, EstimatorMode::Exact, &mut rng)?;
    let fd = central_fd(|p| meta::inner_objective(&model, &task.mdp, p, &task, &prior, &cfg), &phi, 1e-5)?;
    Ok(rel_inf(&g, &fd))
}

fn meta_eval_fd(seed: u64) -> Result<f64> {
    let (model, task) = meta_task(seed)?;
    let mut rng = SeededRng::new(seed).derive(302);
    let phi = random_theta(model.dim(), 0.5, &mut rng);
    let cfg = MetaConfig::new(0.4, 1, 1, 1);
    let g = meta::eval_gradient(&model, &task.mdp, &phi, &task, &cfg, EstimatorMode::Exact, &mut rng)?;
    let fd = central_fd(|p| meta::data_loss(&model, &task.mdp, p, &task.d_eval, &cfg.soft), &phi, 1e-5)?;
    Ok(rel_inf(&g, &fd))
}

fn hyper_identity(seed: u64) -> Result<f64> {
    let (model, task) = meta_task(seed)?;
    let gamma = task.mdp.discount();
    let model = model.scaled(0.02)?;
    let mut cfg = MetaConfig::new(1.0, 10, 1, 1);
    cfg.lambda = cfg.admissibility(&model, gamma).lambda_min;
    let mut rng = SeededRng::new(seed).derive(303);
    let prior = random_theta(model.dim(), 0.5, &mut rng);
    let res = meta::adapt_task(&model, &task.mdp, &task, &prior, &cfg, EstimatorMode::Exact, &mut rng)?;
    let hg = meta::hyper_gradient(&model, &task.mdp, &task, &res, &cfg, EstimatorMode::Exact, &mut rng)?;
    let g = meta::eval_gradient(&model, &task.mdp, &res.phi, &task, &cfg, EstimatorMode::Exact, &mut rng)?;
    Ok(rel_inf(&g, &hg.h))
}

/// Largest `||T v1 - T v2|| / (gamma ||v1 - v2||) - 1` over random pairs;
/// half the pairs differ by a constant, where the bound is tight.
pub fn contraction(seed: u64, gamma_shift: f64) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for m in 0..10u64 {
        let mut rng = SeededRng::new(seed).derive(400).derive(m);
        let gamma = 0.5 + 0.45 * rng.uniform();
        let mdp = envs::random_mdp(6, 3, 3, gamma, &mut rng)?;
        let operator_mdp = mdp.with_discount((gamma + gamma_shift).clamp(0.0, 0.999))?;
        let r = DMatrix::from_fn(6, 3, |_, _| 2.0 * rng.uniform() - 1.0);
        for p in 0..10 {
            let v1: Vec<f64> = (0..6).map(|_| 5.0 * rng.standard_normal()).collect();
            let v2: Vec<f64> = if p % 2 == 0 {
                let c = 3.0 * rng.standard_normal();
                v1.iter().map(|x| x + c).collect()
            } else {
                (0..6).map(|_| 5.0 * rng.standard_normal()).collect()
            };
            let t1 = soft::soft_bellman_operator(&operator_mdp, &r, &v1)?;
            let t2 = soft::soft_bellman_operator(&operator_mdp, &r, &v2)?;
            let dt: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a - b).collect();
            let dv: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
            let ratio = linalg::sup_norm(&dt) / (gamma * linalg::sup_norm(&dv));
            worst = worst.max(ratio - 1.0);
        }
    }
    Ok(worst.max(0.0))
}

/// Largest violation of `Q^{pi_{t+1}} >= T(Q^{pi_t})` along online steps.
fn improvement(seed: u64) -> Result<f64> {
    let per_task = par::map_range(5, |j| -> Result<f64> {
        let mut rng = SeededRng::new(seed).derive(500).derive(j as u64);
        let mdp = envs::random_mdp(6, 3, 3, 0.8, &mut rng)?;
        let f: Vec<f64> = (0..18 * 4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let model = RewardModel::linear(6, 3, 4, f)?;
        let true_r = DMatrix::from_fn(6, 3, |_, _| rng.uniform());
        let expert = envs::expert_policy(&mdp, &true_r, envs::ExpertKind::Soft)?;
        let stream: Vec<(usize, usize)> = envs::expert_stream(&mdp, &expert, 10, rng.derive(1))?.collect();
        let cfg = plain_config(0.5, vec![0.0; 4], 0.8)?;
        let mut state = online::OnlineState::new(&model, &mdp, BaselineKind::Merit, &cfg, &mut rng)?;
        let mut worst = 0.0f64;
        for &pair in &stream {
            let r = model.reward_table(&state.theta)?;
            let q = soft::soft_policy_evaluation(&mdp, &r, &state.policy)?;
            let backup = soft::soft_q_backup(&mdp, &r, &q)?;
            state = online::merit_step(&model, &mdp, state, pair, &cfg, &mut rng)?;
            let q_next = soft::soft_policy_evaluation(&mdp, &r, &state.policy)?;
            let gap = (&backup - &q_next).max();
            worst = worst.max(gap);
        }
        Ok(worst)
    });
    Ok(par::collect_results(per_task)?.into_iter().fold(0.0, f64::max))
}

/// Excess of `max_t ||theta_t - theta_bar||` over `2 C / lambda`.
fn iterate_bound(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).derive(600);
    let (mdp, model) = random_linear_grid(0.1, 5, &mut rng)?;
    let true_r = DMatrix::from_fn(25, 4, |_, _| rng.uniform());
    let expert = envs::expert_policy(&mdp, &true_r, envs::ExpertKind::Soft)?;
    let lambda = 0.5;
    let prior = random_theta(5, 0.3, &mut rng);
    let cfg = plain_config(lambda, prior, mdp.discount())?;
    let stream = envs::expert_stream(&mdp, &expert, 100, rng.derive(1))?;
    let run = online::run_online(&model, &mdp, stream, 100, BaselineKind::Merit, &cfg, &RunOptions::default(), &mut rng)?;
    let bound = 2.0 * model.grad_norm_bound() / lambda;
    Ok((run.max_dist_to_prior(0.0) - bound).max(0.0))
}

/// Largest per-entry z-score between Monte-Carlo discounted visit counts
/// and the exact occupancy.
fn occupancy_vs_rollouts(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).derive(700);
    let gamma = 0.8;
    let mdp = envs::random_mdp(4, 2, 2, gamma, &mut rng)?;
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let p = 0.2 + 0.6 * rng.uniform();
            vec![p, 1.0 - p]
        })
        .collect();
    let policy = TabularPolicy::from_rows(&rows)?;
    let exact = mdp::discounted_occupancy(&mdp, &policy, StartSpec::Initial)?;
    let horizon = online::tail_horizon(gamma, 1.0, 1e-12);
    let n = 20_000;
    let base = rng.derive(1);
    let samples = par::map_range(n, |i| -> Result<DMatrix<f64>> {
        let mut r = base.derive(i as u64);
        let traj = mdp::rollout(&mdp, &policy, StartSpec::Initial, horizon, &mut r)?;
        let mut x = DMatrix::zeros(4, 2);
        let mut w = 1.0;
        for &(s, a) in &traj.steps {
            x[(s, a)] += w;
            w *= gamma;
        }
        Ok(x)
    });
    let samples = par::collect_results(samples)?;
    let mut worst = 0.0f64;
    for s in 0..4 {
        for a in 0..2 {
            let xs: Vec<f64> = samples.iter().map(|x| x[(s, a)]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            let diff = (mean - exact.d[(s, a)]).abs();
            worst = worst.max(if se > 0.0 { diff / se } else { diff * 1e12 });
        }
    }
    Ok(worst)
}

/// Recorded local regret against recomputation from the aggregated and the
/// per-term gradients, and the cumulative sum against its increments.
fn regret_identity(seed: u64) -> Result<f64> {
    let mut rng = SeededRng::new(seed).derive(800);
    let (mdp, model) = random_linear_grid(0.1, 4, &mut rng)?;
    let true_r = DMatrix::from_fn(25, 4, |_, _| rng.uniform());
    let expert = envs::expert_policy(&mdp, &true_r, envs::ExpertKind::Soft)?;
    let mut cfg = plain_config(0.5, vec![0.0; 4], mdp.discount())?;
    cfg.estimator_mode = EstimatorMode::Exact;
    cfg.policy_mode = PolicyMode::Exact;
    let steps = 8;
    let pairs: Vec<(usize, usize)> = envs::expert_stream(&mdp, &expert, steps, rng.derive(1))?.collect();
    let opts = RunOptions {
        instrument: true,
        ..Default::default()
    };
    let run = online::run_online(&model, &mdp, pairs.clone(), steps, BaselineKind::Merit, &cfg, &opts, &mut rng.derive(2))?;
    let mut learner = rng.derive(2);
    let mut state = online::OnlineState::new(&model, &mdp, BaselineKind::Merit, &cfg, &mut learner)?;
    let mut worst = 0.0f64;
    let mut cum = 0.0;
    for (t, &pair) in pairs.iter().enumerate() {
        let mut prefix: Trajectory = state.prefix.clone();
        prefix.push(pair);
        let a = online::local_regret(&model, &mdp, &state.theta, &prefix, &cfg)?;
        let b = online::local_regret_per_term(&model, &mdp, &state.theta, &prefix, &cfg)?;
        cum += run.regret.local[t];
        let scale = 1.0 + a.abs();
        worst = worst
            .max((a - b).abs() / scale)
            .max((a - run.regret.local[t]).abs() / scale)
            .max((cum - run.regret.cumulative_local[t]).abs() / (1.0 + cum));
        state = online::merit_step(&model, &mdp, state, pair, &cfg, &mut learner)?;
    }
    Ok(worst)
}
