//! Entropy-regularized (temperature 1) dynamic programming on finite MDPs.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{self, FiniteMdp, StartSpec};
use crate::policy::TabularPolicy;

/// Max-shifted `ln sum_i exp(x_i)`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_reward(mdp: &FiniteMdp, reward: &DMatrix<f64>) -> Result<()> {
    if reward.nrows() != mdp.n_states() || reward.ncols() != mdp.n_actions() {
        return Err(Error::Domain(format!(
            "reward table is {}x{}, MDP is {}x{}",
            reward.nrows(),
            reward.ncols(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    if !linalg::all_finite(reward.as_slice()) {
        return Err(Error::Domain("reward table has non-finite entries".into()));
    }
    Ok(())
}

/// `q(s,a) = r(s,a) + gamma sum_{s'} P(s'|s,a) v(s')`.
pub fn q_from_values(mdp: &FiniteMdp, reward: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let g = mdp.discount();
    DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        reward[(s, a)] + g * mdp.expected_next(s, a, v)
    })
}

fn row_lse(q: &DMatrix<f64>) -> Vec<f64> {
    let mut buf = vec![0.0; q.ncols()];
    (0..q.nrows())
        .map(|s| {
            for (a, b) in buf.iter_mut().enumerate() {
                *b = q[(s, a)];
            }
            logsumexp(&buf)
        })
        .collect()
}

/// `(T v)(s) = ln sum_a exp(r(s,a) + gamma E[v(s') | s,a])`.
pub fn soft_bellman_operator(mdp: &FiniteMdp, reward: &DMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    check_reward(mdp, reward)?;
    if v.len() != mdp.n_states() {
        return Err(Error::Domain(format!(
            "value vector has length {}, expected {}",
            v.len(),
            mdp.n_states()
        )));
    }
    if !linalg::all_finite(v) {
        return Err(Error::Domain("value vector has non-finite entries".into()));
    }
    Ok(row_lse(&q_from_values(mdp, reward, v)))
}

/// Q-form of the soft Bellman operator:
/// `(T q)(s,a) = r(s,a) + gamma E[ln sum_{a'} exp q(s',a')]`.
pub fn soft_q_backup(mdp: &FiniteMdp, reward: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_reward(mdp, reward)?;
    if q.shape() != reward.shape() {
        return Err(Error::Domain("q table shape differs from reward table".into()));
    }
    Ok(q_from_values(mdp, reward, &row_lse(q)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftOptions {
    pub tol: f64,
    /// `None` selects `100 * ceil(ln(1/tol) / ln(1/gamma))` (at least 2).
    pub max_iter: Option<usize>,
    /// Refine the value-iteration result with exact soft policy-iteration
    /// steps, which converge quadratically and drive the residual to
    /// rounding level.
    pub polish: bool,
}

impl Default for SoftOptions {
    fn default() -> Self {
        SoftOptions {
            tol: 1e-10,
            max_iter: None,
            polish: true,
        }
    }
}

impl SoftOptions {
    pub fn resolved_max_iter(&self, gamma: f64) -> usize {
        self.max_iter
            .unwrap_or_else(|| default_max_iter(self.tol, gamma))
    }
}

pub fn default_max_iter(tol: f64, gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 2;
    }
    let k = ((1.0 / tol).ln() / (1.0 / gamma).ln()).ceil().max(0.0);
    (100.0 * k).min(1e9) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftSolution {
    pub q: DMatrix<f64>,
    pub v: Vec<f64>,
    pub policy: TabularPolicy,
    /// `||T v - v||_inf` of the returned values.
    pub residual: f64,
    pub iterations: usize,
}

impl SoftSolution {
    fn assemble(mdp: &FiniteMdp, reward: &DMatrix<f64>, v: Vec<f64>, iterations: usize) -> Self {
        let q = q_from_values(mdp, reward, &v);
        let v = row_lse(&q);
        let residual = {
            let tv = row_lse(&q_from_values(mdp, reward, &v));
            linalg::sup_dist(&tv, &v)
        };
        let policy = softmax_rows(&q, &v);
        SoftSolution {
            q,
            v,
            policy,
            residual,
            iterations,
        }
    }

    /// CSV with header `state,action,q,v,pi`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: soft_solution/v1\nstate,action,q,v,pi\n");
        for s in 0..self.q.nrows() {
            for a in 0..self.q.ncols() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    s,
                    a,
                    self.q[(s, a)],
                    self.v[s],
                    self.policy.prob(s, a)
                );
            }
        }
        out
    }
}

fn softmax_rows(q: &DMatrix<f64>, v: &[f64]) -> TabularPolicy {
    let mut p = DMatrix::from_fn(q.nrows(), q.ncols(), |s, a| (q[(s, a)] - v[s]).exp());
    for mut row in p.row_iter_mut() {
        let z: f64 = row.sum();
        row /= z;
    }
    TabularPolicy::from_matrix_unchecked(p)
}

/// Soft value iteration with default options and explicit tolerance and
/// iteration cap.
pub fn soft_value_iteration(
    mdp: &FiniteMdp,
    reward: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    soft_value_iteration_with(
        mdp,
        reward,
        &SoftOptions {
            tol,
            max_iter: Some(max_iter),
            polish: true,
        },
    )
}

/// Soft-optimal values, Q-function and policy for `reward`.
pub fn soft_value_iteration_with(mdp: &FiniteMdp, reward: &DMatrix<f64>, opts: &SoftOptions) -> Result<SoftSolution> {
    check_reward(mdp, reward)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {}", opts.tol)));
    }
    let max_iter = opts.resolved_max_iter(mdp.discount());
    let mut v = vec![0.0; mdp.n_states()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = row_lse(&q_from_values(mdp, reward, &v));
        residual = linalg::sup_dist(&next, &v);
        v = next;
        iterations += 1;
        if !residual.is_finite() {
            return Err(Error::numerical("soft-rl", "soft value iteration diverged"));
        }
        if residual <= opts.tol {
            break;
        }
    }
    if residual > opts.tol {
        return Err(Error::NotConverged {
            iterations,
            residual,
        });
    }
    let mut sol = SoftSolution::assemble(mdp, reward, v, iterations);
    if opts.polish {
        for _ in 0..4 {
            if sol.residual == 0.0 || sol.policy.matrix().iter().any(|&p| p <= 0.0) {
                break;
            }
            let (_, v_pi) = evaluate(mdp, reward, &sol.policy)?;
            let cand = SoftSolution::assemble(mdp, reward, v_pi, sol.iterations);
            if !(cand.residual < sol.residual) {
                break;
            }
            sol = cand;
        }
    }
    Ok(sol)
}

/// Returns `(Q^pi, V^pi)` from the state-space system
/// `(I - gamma P_pi) V = sum_a pi(a|s) [r(s,a) - ln pi(a|s)]`.
fn evaluate(mdp: &FiniteMdp, reward: &DMatrix<f64>, policy: &TabularPolicy) -> Result<(DMatrix<f64>, Vec<f64>)> {
    evaluate_with(mdp, reward, policy, true)
}

fn evaluate_with(
    mdp: &FiniteMdp,
    reward: &DMatrix<f64>,
    policy: &TabularPolicy,
    strict: bool,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = mdp.n_states();
    let mut c = DVector::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let p = policy.prob(s, a);
            if p <= 0.0 && !strict {
                continue;
            }
            if p <= 0.0 {
                return Err(Error::Domain(format!(
                    "policy has zero probability at (s={s}, a={a}); its log is undefined"
                )));
            }
            c[s] += p * (reward[(s, a)] - p.ln());
        }
    }
    let chain = mdp.policy_chain(policy);
    let a = DMatrix::identity(n, n) - chain * mdp.discount();
    let v: Vec<f64> = linalg::solve_vec(a, &c, "soft-rl")?.iter().copied().collect();
    Ok((q_from_values(mdp, reward, &v), v))
}

/// Exact soft Q-function of a fixed policy:
/// `Q(s,a) = r(s,a) + gamma E[sum_{a'} pi(a'|s') (Q(s',a') - ln pi(a'|s'))]`.
pub fn soft_policy_evaluation(mdp: &FiniteMdp, reward: &DMatrix<f64>, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    check_reward(mdp, reward)?;
    mdp.check_policy(policy)?;
    Ok(evaluate(mdp, reward, policy)?.0)
}

/// Soft policy evaluation for softmax policies whose entries may have
/// underflowed to zero; such actions contribute `0 ln 0 = 0`.
pub(crate) fn soft_policy_evaluation_lenient(
    mdp: &FiniteMdp,
    reward: &DMatrix<f64>,
    policy: &TabularPolicy,
) -> Result<DMatrix<f64>> {
    check_reward(mdp, reward)?;
    mdp.check_policy(policy)?;
    Ok(evaluate_with(mdp, reward, policy, false)?.0)
}

/// Row-wise softmax `pi(a|s) proportional to exp q(s,a)`.
pub fn policy_improvement(q: &DMatrix<f64>) -> TabularPolicy {
    softmax_rows(q, &row_lse(q))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyPerformance {
    /// `sum d(s,a) r(s,a)`.
    pub j: f64,
    /// Causal entropy `-sum d(s,a) ln pi(a|s)`.
    pub h: f64,
    pub j_plus_h: f64,
}

/// Discounted reward and causal entropy of `policy` from `P0`. Pairs with
/// zero probability contribute nothing (`0 ln 0 = 0`).
pub fn policy_performance(mdp: &FiniteMdp, reward: &DMatrix<f64>, policy: &TabularPolicy) -> Result<PolicyPerformance> {
    check_reward(mdp, reward)?;
    let occ = mdp::discounted_occupancy(mdp, policy, StartSpec::Initial)?;
    let j = occ.expectation(|s, a| reward[(s, a)]);
    let h = occ.expectation(|s, a| {
        let p = policy.prob(s, a);
        if p > 0.0 {
            -p.ln()
        } else {
            0.0
        }
    });
    Ok(PolicyPerformance { j, h, j_plus_h: j + h })
}
