//! Differentiable reward families `r_theta(s,a)`.
//!
//! Both provided families are linear in `theta`, so gradients do not depend
//! on `theta` and Hessians vanish identically.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::FiniteMdp;
use crate::policy::TabularPolicy;

/// Real parameter vector, serialized as a plain JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn dist(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(x) {
            *a += alpha * b;
        }
    }

    pub fn sub(&self, other: &[f64]) -> Vec<f64> {
        self.0.iter().zip(other).map(|(a, b)| a - b).collect()
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.0)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Tabular,
    Linear,
}

/// Reward model `r_theta(s,a) = theta . phi(s,a)`. For the tabular kind
/// `phi(s,a)` is the indicator of coordinate `index(s,a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    kind: RewardKind,
    n_states: usize,
    n_actions: usize,
    dim: usize,
    index: Option<Vec<usize>>,
    // row-major, (s * n_actions + a) * dim + k
    features: Vec<f64>,
    grad_norm_bound: f64,
}

impl RewardModel {
    /// One parameter per state-action pair.
    pub fn tabular(n_states: usize, n_actions: usize) -> Result<Self> {
        Self::tabular_with_index(n_states, n_actions, (0..n_states * n_actions).collect(), n_states * n_actions)
    }

    /// Tabular model with an explicit `(s,a) -> coordinate` map, e.g. one
    /// parameter per state when `index[s * n_actions + a] = s`.
    pub fn tabular_with_index(n_states: usize, n_actions: usize, index: Vec<usize>, dim: usize) -> Result<Self> {
        if index.len() != n_states * n_actions {
            return Err(Error::Validation("index map must have one entry per state-action pair".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= dim) {
            return Err(Error::Validation(format!("index {bad} out of range for dimension {dim}")));
        }
        let mut features = vec![0.0; n_states * n_actions * dim];
        for (pair, &i) in index.iter().enumerate() {
            features[pair * dim + i] = 1.0;
        }
        Self::build(RewardKind::Tabular, n_states, n_actions, dim, Some(index), features)
    }

    /// Linear model from row-major features, `features[(s * n_actions + a) * dim + k]`.
    pub fn linear(n_states: usize, n_actions: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != n_states * n_actions * dim {
            return Err(Error::Validation(format!(
                "expected {} feature values, got {}",
                n_states * n_actions * dim,
                features.len()
            )));
        }
        if !linalg::all_finite(&features) {
            return Err(Error::Validation("features must be finite".into()));
        }
        Self::build(RewardKind::Linear, n_states, n_actions, dim, None, features)
    }

    fn build(
        kind: RewardKind,
        n_states: usize,
        n_actions: usize,
        dim: usize,
        index: Option<Vec<usize>>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dim == 0 {
            return Err(Error::Validation("reward model needs states, actions and parameters".into()));
        }
        let grad_norm_bound = features
            .chunks(dim)
            .map(norm)
            .fold(0.0f64, f64::max);
        let model = RewardModel {
            kind,
            n_states,
            n_actions,
            dim,
            index,
            features,
            grad_norm_bound,
        };
        for s in 0..n_states {
            for a in 0..n_actions {
                if norm(model.phi(s, a)) > model.grad_norm_bound {
                    return Err(Error::Validation("gradient bound check failed".into()));
                }
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Tabular coordinate of `(s,a)`.
    pub fn index(&self, s: usize, a: usize) -> Option<usize> {
        self.index.as_ref().map(|ix| ix[s * self.n_actions + a])
    }

    /// `max_{s,a} ||grad r(s,a)||`, exact.
    pub fn grad_norm_bound(&self) -> f64 {
        self.grad_norm_bound
    }

    /// Lipschitz constant of the gradient; zero for both kinds.
    pub fn hessian_norm_bound(&self) -> f64 {
        0.0
    }

    /// Feature vector `phi(s,a) = grad r(s,a)` without bounds checks.
    #[inline]
    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.dim;
        &self.features[off..off + self.dim]
    }

    /// Same model with every feature multiplied by `c`; a tabular model
    /// becomes a linear one.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Validation(format!("feature scale must be positive, got {c}")));
        }
        let features = self.features.iter().map(|x| x * c).collect();
        Self::linear(self.n_states, self.n_actions, self.dim, features)
    }

    pub fn check_compatible(&self, mdp: &FiniteMdp) -> Result<()> {
        if mdp.n_states() != self.n_states || mdp.n_actions() != self.n_actions {
            return Err(Error::Domain(format!(
                "reward model is {}x{}, MDP is {}x{}",
                self.n_states,
                self.n_actions,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::Domain(format!(
                "parameter has length {}, model dimension is {}",
                theta.len(),
                self.dim
            )));
        }
        if !linalg::all_finite(theta) {
            return Err(Error::Domain("parameter has non-finite entries".into()));
        }
        Ok(())
    }

    fn check_pair(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(Error::Domain(format!("pair ({s},{a}) out of range")));
        }
        Ok(())
    }

    pub fn reward_table(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        Ok(self.reward_table_unchecked(theta))
    }

    pub(crate) fn reward_table_unchecked(&self, theta: &[f64]) -> DMatrix<f64> {
        match &self.index {
            Some(ix) => DMatrix::from_fn(self.n_states, self.n_actions, |s, a| theta[ix[s * self.n_actions + a]]),
            None => DMatrix::from_fn(self.n_states, self.n_actions, |s, a| {
                self.phi(s, a).iter().zip(theta).map(|(f, t)| f * t).sum()
            }),
        }
    }

    pub fn reward_grad(&self, theta: &[f64], s: usize, a: usize) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_pair(s, a)?;
        Ok(self.phi(s, a).to_vec())
    }

    pub fn reward_hessian(&self, theta: &[f64], s: usize, a: usize) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        self.check_pair(s, a)?;
        Ok(DMatrix::zeros(self.dim, self.dim))
    }

    /// CSV with header `state,action,f0,...`.
    pub fn features_csv(&self) -> String {
        let mut out = String::from("# schema: features/v1\nstate,action");
        for k in 0..self.dim {
            let _ = write!(out, ",f{k}");
        }
        out.push('\n');
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let _ = write!(out, "{s},{a}");
                for x in self.phi(s, a) {
                    let _ = write!(out, ",{x}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Loads a linear model from `state,action,f0,...` rows. Every pair must
    /// appear exactly once.
    pub fn linear_from_csv(text: &str, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut dim = None;
        let mut features: Vec<f64> = Vec::new();
        let mut seen = vec![false; n_states * n_actions];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols[0] == "state" {
                dim = Some(cols.len().saturating_sub(2));
                continue;
            }
            let d = *dim.get_or_insert(cols.len().saturating_sub(2));
            if d == 0 || cols.len() != d + 2 {
                return Err(Error::Validation(format!("bad feature row '{line}'")));
            }
            if features.is_empty() {
                features = vec![f64::NAN; n_states * n_actions * d];
            }
            let idx = |x: &str| {
                x.parse::<usize>()
                    .map_err(|e| Error::Validation(format!("bad index '{x}': {e}")))
            };
            let (s, a) = (idx(cols[0])?, idx(cols[1])?);
            if s >= n_states || a >= n_actions {
                return Err(Error::Validation(format!("pair ({s},{a}) out of range")));
            }
            let pair = s * n_actions + a;
            if std::mem::replace(&mut seen[pair], true) {
                return Err(Error::Validation(format!("pair ({s},{a}) listed twice")));
            }
            for (k, x) in cols[2..].iter().enumerate() {
                features[pair * d + k] = x
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad feature '{x}': {e}")))?;
            }
        }
        if seen.iter().any(|x| !x) {
            return Err(Error::Validation("feature CSV does not cover every state-action pair".into()));
        }
        Self::linear(n_states, n_actions, dim.unwrap_or(0), features)
    }
}

/// Discounted feature expectations under a fixed policy.
///
/// `m` row `s` is `E[sum_t gamma^t phi(S_t,A_t) | S_0 = s]`; `n` row
/// `s * n_actions + a` is `sum_{s'} P(s'|s,a) m(s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureValues {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    n_actions: usize,
    discount: f64,
}

impl FeatureValues {
    pub fn compute(model: &RewardModel, mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<Self> {
        model.check_compatible(mdp)?;
        mdp.check_policy(policy)?;
        let chain = mdp.policy_chain(policy);
        Self::with_chain(model, mdp, policy, &chain)
    }

    pub(crate) fn with_chain(
        model: &RewardModel,
        mdp: &FiniteMdp,
        policy: &TabularPolicy,
        chain: &DMatrix<f64>,
    ) -> Result<Self> {
        let ns = mdp.n_states();
        let na = mdp.n_actions();
        let dim = model.dim();
        let mut phi_pi = DMatrix::zeros(ns, dim);
        for s in 0..ns {
            for a in 0..na {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                for (k, f) in model.phi(s, a).iter().enumerate() {
                    phi_pi[(s, k)] += p * f;
                }
            }
        }
        let lhs = DMatrix::identity(ns, ns) - chain * mdp.discount();
        let m = linalg::solve(lhs, &phi_pi, "reward-models")?;
        let mut n = DMatrix::zeros(ns * na, dim);
        for s in 0..ns {
            for a in 0..na {
                for &(j, p) in mdp.successors(s, a) {
                    for k in 0..dim {
                        n[(s * na + a, k)] += p * m[(j, k)];
                    }
                }
            }
        }
        Ok(FeatureValues {
            m,
            n,
            n_actions: na,
            discount: mdp.discount(),
        })
    }

    pub fn from_state(&self, s: usize) -> DVector<f64> {
        self.m.row(s).transpose()
    }

    /// `sum_{s'} P(s'|s,a) m(s')`.
    pub fn next(&self, s: usize, a: usize) -> DVector<f64> {
        self.n.row(s * self.n_actions + a).transpose()
    }

    /// `E[sum_t gamma^t phi | S_0 ~ rho]`.
    pub fn from_distribution(&self, rho: &[f64]) -> DVector<f64> {
        self.m.tr_mul(&DVector::from_column_slice(rho))
    }

    /// `E[sum_t gamma^t phi | S_0 = s, A_0 = a]`.
    pub fn from_pair(&self, model: &RewardModel, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(model.phi(s, a)) + self.next(s, a) * self.discount
    }
}
