use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Stochastic tabular policy `pi(a|s)` stored as an `n_states x n_actions`
/// matrix whose rows are distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    pub fn from_matrix(probs: DMatrix<f64>) -> Result<Self> {
        let p = TabularPolicy { probs };
        p.validate()?;
        Ok(p)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map(|r| r.len()).unwrap_or(0);
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Validation("policy must have at least one state and action".into()));
        }
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::Validation("ragged policy rows".into()));
        }
        Self::from_matrix(DMatrix::from_fn(n_states, n_actions, |s, a| rows[s][a]))
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        if actions.iter().any(|&a| a >= n_actions) {
            return Err(Error::Domain("action index out of range".into()));
        }
        Ok(TabularPolicy {
            probs: DMatrix::from_fn(actions.len(), n_actions, |s, a| {
                if actions[s] == a {
                    1.0
                } else {
                    0.0
                }
            }),
        })
    }

    pub(crate) fn from_matrix_unchecked(probs: DMatrix<f64>) -> Self {
        TabularPolicy { probs }
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states() {
            let mut sum = 0.0;
            for a in 0..self.n_actions() {
                let p = self.probs[(s, a)];
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::Validation(format!(
                        "policy entry ({s},{a}) = {p} is not a probability"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::Validation(format!(
                    "policy row {s} sums to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        (0..self.n_actions()).map(|a| self.probs[(s, a)]).collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Largest absolute difference between two policies of equal shape.
    pub fn sup_distance(&self, other: &TabularPolicy) -> f64 {
        (&self.probs - &other.probs).amax()
    }
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        TabularPolicy::from_rows(&rows)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        (0..p.n_states()).map(|s| p.row(s)).collect()
    }
}
