//! Finite MDPs, trajectory sampling and exact distributional quantities.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::policy::TabularPolicy;
use crate::rng::SeededRng;

const PROB_TOL: f64 = 1e-12;

/// Finite discounted MDP without a reward: states, actions, transition
/// kernel `P(s'|s,a)`, initial distribution and discount.
///
/// The kernel is kept both densely (for serialization and exact linear
/// algebra) and as per-pair successor lists (for sampling and sparse
/// expectations).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    initial: Vec<f64>,
    discount: f64,
    successors: Vec<Vec<(usize, f64)>>,
}

/// On-disk JSON layout. `transition[s][a][s']` is `P(s'|s,a)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<MdpFile> for FiniteMdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        if f.transition.len() != f.n_states
            || f.transition.iter().any(|row| {
                row.len() != f.n_actions || row.iter().any(|p| p.len() != f.n_states)
            })
        {
            return Err(Error::Validation("transition array shape does not match n_states/n_actions".into()));
        }
        let flat = f.transition.into_iter().flatten().flatten().collect();
        FiniteMdp::new(f.n_states, f.n_actions, flat, f.initial_dist, f.discount)
    }
}

impl From<FiniteMdp> for MdpFile {
    fn from(m: FiniteMdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| m.transition[m.row_offset(s, a)..m.row_offset(s, a) + m.n_states].to_vec())
                    .collect()
            })
            .collect();
        MdpFile {
            n_states: m.n_states,
            n_actions: m.n_actions,
            discount: m.discount,
            initial_dist: m.initial,
            transition,
        }
    }
}

impl FiniteMdp {
    /// `transition` is flat in `[s][a][s']` order.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        initial: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Validation("an MDP needs at least one state and one action".into()));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Validation(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if initial.len() != n_states {
            return Err(Error::Validation("initial distribution length differs from n_states".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Validation(format!("discount {discount} outside [0,1)")));
        }
        check_distribution(&initial, "initial distribution")?;
        let mut successors = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let off = (s * n_actions + a) * n_states;
                let row = &transition[off..off + n_states];
                check_distribution(row, &format!("transition row ({s},{a})"))?;
                successors.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(j, &p)| (j, p))
                        .collect(),
                );
            }
        }
        Ok(FiniteMdp {
            n_states,
            n_actions,
            transition,
            initial,
            discount,
            successors,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    #[inline]
    fn row_offset(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.row_offset(s, a) + next]
    }

    /// Nonzero entries of `P(.|s,a)`.
    #[inline]
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    /// `sum_{s'} P(s'|s,a) v(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.successors(s, a).iter().map(|&(j, p)| p * v[j]).sum()
    }

    /// Same MDP with a different discount (and everything else untouched).
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Validation(format!("discount {discount} outside [0,1)")));
        }
        let mut m = self.clone();
        m.discount = discount;
        Ok(m)
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_initial(&self, initial: Vec<f64>) -> Result<Self> {
        if initial.len() != self.n_states {
            return Err(Error::Validation("initial distribution length differs from n_states".into()));
        }
        check_distribution(&initial, "initial distribution")?;
        let mut m = self.clone();
        m.initial = initial;
        Ok(m)
    }

    pub fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::Domain(format!("state {s} out of range (n_states = {})", self.n_states)));
        }
        Ok(())
    }

    pub fn check_pair(&self, s: usize, a: usize) -> Result<()> {
        self.check_state(s)?;
        if a >= self.n_actions {
            return Err(Error::Domain(format!("action {a} out of range (n_actions = {})", self.n_actions)));
        }
        Ok(())
    }

    pub fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::Domain(format!(
                "policy shape {}x{} does not match MDP {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        policy.validate()
    }

    /// State-to-state kernel of the chain induced by `policy`:
    /// `P_pi(s, s') = sum_a pi(a|s) P(s'|s,a)`.
    pub fn policy_chain(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_states, self.n_states);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(j, p) in self.successors(s, a) {
                    m[(s, j)] += pa * p;
                }
            }
        }
        m
    }

    pub(crate) fn sample_initial(&self, rng: &mut SeededRng) -> usize {
        rng.categorical(&self.initial)
    }

    pub(crate) fn sample_next(&self, s: usize, a: usize, rng: &mut SeededRng) -> usize {
        rng.categorical_sparse(self.successors(s, a))
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::Validation(format!("{what} has invalid entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Validation(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// How a rollout or an occupancy computation is started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartSpec {
    /// `S_0 ~ P0`.
    Initial,
    /// `S_0 = s`.
    State(usize),
    /// `(S_0, A_0) = (s, a)`; the action is taken verbatim.
    StateAction(usize, usize),
}

/// Ordered `(state, action)` pairs starting at MDP time `start_time`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub start_time: usize,
}

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Trajectory {
            steps,
            start_time: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, pair: (usize, usize)) {
        self.steps.push(pair);
    }

    pub fn check_bounds(&self, mdp: &FiniteMdp) -> Result<()> {
        for &(s, a) in &self.steps {
            mdp.check_pair(s, a)?;
        }
        Ok(())
    }

    /// `sum_i gamma^i f(s_i, a_i)` with `i` counted from the first step.
    pub fn discounted_sum(&self, gamma: f64, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut w = 1.0;
        let mut total = 0.0;
        for &(s, a) in &self.steps {
            total += w * f(s, a);
            w *= gamma;
        }
        total
    }

    /// CSV with header `t,state,action`, where `t` is MDP time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: trajectory/v1\nt,state,action\n");
        for (i, (s, a)) in self.steps.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", self.start_time + i, s, a);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        let mut start_time = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Validation(format!("bad trajectory row '{line}'")));
            }
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Validation(format!("bad integer '{x}': {e}")))
            };
            let t = parse(cols[0])?;
            start_time.get_or_insert(t);
            steps.push((parse(cols[1])?, parse(cols[2])?));
        }
        Ok(Trajectory {
            steps,
            start_time: start_time.unwrap_or(0),
        })
    }
}

#[inline]
pub(crate) fn sample_action(policy: &TabularPolicy, s: usize, rng: &mut SeededRng) -> usize {
    let u = rng.uniform();
    let n = policy.n_actions();
    let mut acc = 0.0;
    let mut last = 0;
    for a in 0..n {
        let p = policy.prob(s, a);
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

fn resolve_start(mdp: &FiniteMdp, start: StartSpec, rng: &mut SeededRng) -> Result<(usize, Option<usize>)> {
    match start {
        StartSpec::Initial => Ok((mdp.sample_initial(rng), None)),
        StartSpec::State(s) => {
            mdp.check_state(s)?;
            Ok((s, None))
        }
        StartSpec::StateAction(s, a) => {
            mdp.check_pair(s, a)?;
            Ok((s, Some(a)))
        }
    }
}

/// Samples exactly `horizon` pairs. The state following the final pair is
/// never drawn, so a rollout consumes the same random numbers as the first
/// `horizon` items of an [`crate::envs::ExpertStream`] with the same seed.
pub fn rollout(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
    horizon: usize,
    rng: &mut SeededRng,
) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::Domain("rollout horizon must be at least 1".into()));
    }
    Ok(Trajectory::new(rollout_unchecked(mdp, policy, start, horizon, rng)?))
}

/// Rollout that visits each pair through a callback instead of allocating.
/// Policy validation is the caller's job.
pub(crate) fn rollout_visit(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
    horizon: usize,
    rng: &mut SeededRng,
    mut visit: impl FnMut(usize, usize, usize),
) -> Result<()> {
    let (mut s, first_action) = resolve_start(mdp, start, rng)?;
    for k in 0..horizon {
        let a = match (k, first_action) {
            (0, Some(a)) => a,
            _ => sample_action(policy, s, rng),
        };
        visit(k, s, a);
        if k + 1 < horizon {
            s = mdp.sample_next(s, a, rng);
        }
    }
    Ok(())
}

fn rollout_unchecked(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
    horizon: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(usize, usize)>> {
    let mut steps = Vec::with_capacity(horizon);
    rollout_visit(mdp, policy, start, horizon, rng, |_, s, a| steps.push((s, a)))?;
    Ok(steps)
}

/// Exact discounted visitation `d(s,a) = sum_t gamma^t P_t(s,a)` and its
/// normalized form `mu = (1 - gamma) d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscountedOccupancy {
    pub d: DMatrix<f64>,
    pub discount: f64,
}

impl DiscountedOccupancy {
    pub fn mu(&self) -> DMatrix<f64> {
        &self.d * (1.0 - self.discount)
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        (0..self.d.nrows()).map(|s| self.d.row(s).sum()).collect()
    }

    /// `sum_{s,a} d(s,a) f(s,a)`.
    pub fn expectation(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut total = 0.0;
        for s in 0..self.d.nrows() {
            for a in 0..self.d.ncols() {
                let w = self.d[(s, a)];
                if w != 0.0 {
                    total += w * f(s, a);
                }
            }
        }
        total
    }

    /// CSV with header `state,action,mu,d`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: occupancy/v1\nstate,action,mu,d\n");
        for s in 0..self.d.nrows() {
            for a in 0..self.d.ncols() {
                let d = self.d[(s, a)];
                let _ = writeln!(out, "{},{},{},{}", s, a, (1.0 - self.discount) * d, d);
            }
        }
        out
    }
}

/// State occupancy `x(s) = sum_t gamma^t P_t(s)` of the chain started from
/// the state distribution `rho`, solved from `(I - gamma P_pi^T) x = rho`.
pub(crate) fn state_occupancy(mdp: &FiniteMdp, chain: &DMatrix<f64>, rho: &[f64]) -> Result<DVector<f64>> {
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - chain.transpose() * mdp.discount();
    linalg::solve_vec(a, &DVector::from_column_slice(rho), "mdp-core")
}

/// Exact discounted occupancy under `policy` from `start`. Fails with a
/// numerical error if the flow identity residual exceeds `1e-9`.
pub fn discounted_occupancy(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
) -> Result<DiscountedOccupancy> {
    mdp.check_policy(policy)?;
    let chain = mdp.policy_chain(policy);
    let occ = occupancy_with_chain(mdp, policy, &chain, start)?;
    let residual = flow_residual(mdp, policy, start, &occ)?;
    if residual > 1e-9 {
        return Err(Error::numerical(
            "mdp-core",
            format!("occupancy flow residual {residual:e} exceeds 1e-9"),
        ));
    }
    Ok(occ)
}

pub(crate) fn occupancy_with_chain(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    chain: &DMatrix<f64>,
    start: StartSpec,
) -> Result<DiscountedOccupancy> {
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let (rho, scale, pinned) = match start {
        StartSpec::Initial => (mdp.initial_dist().to_vec(), 1.0, None),
        StartSpec::State(s) => {
            mdp.check_state(s)?;
            let mut rho = vec![0.0; n];
            rho[s] = 1.0;
            (rho, 1.0, None)
        }
        StartSpec::StateAction(s, a) => {
            mdp.check_pair(s, a)?;
            let mut rho = vec![0.0; n];
            for &(j, p) in mdp.successors(s, a) {
                rho[j] = p;
            }
            (rho, gamma, Some((s, a)))
        }
    };
    let x = state_occupancy(mdp, chain, &rho)?;
    let mut d = DMatrix::from_fn(n, mdp.n_actions(), |s, a| scale * x[s] * policy.prob(s, a));
    if let Some((s, a)) = pinned {
        d[(s, a)] += 1.0;
    }
    Ok(DiscountedOccupancy { d, discount: gamma })
}

/// Sup-norm residual of the flow identity
/// `d(s,a) = start(s,a) + pi(a|s) gamma sum_{s',a'} d(s',a') P(s|s',a')`.
pub fn flow_residual(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    start: StartSpec,
    occ: &DiscountedOccupancy,
) -> Result<f64> {
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let gamma = mdp.discount();
    let mut inflow = vec![0.0; n];
    for s in 0..n {
        for a in 0..na {
            let w = occ.d[(s, a)];
            if w == 0.0 {
                continue;
            }
            for &(j, p) in mdp.successors(s, a) {
                inflow[j] += w * p;
            }
        }
    }
    let mut worst = 0.0f64;
    for s in 0..n {
        for a in 0..na {
            let start_mass = match start {
                StartSpec::Initial => policy.prob(s, a) * mdp.initial_dist()[s],
                StartSpec::State(s0) => {
                    if s == s0 {
                        policy.prob(s, a)
                    } else {
                        0.0
                    }
                }
                StartSpec::StateAction(s0, a0) => {
                    if (s, a) == (s0, a0) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let rhs = start_mass + policy.prob(s, a) * gamma * inflow[s];
            worst = worst.max((occ.d[(s, a)] - rhs).abs());
        }
    }
    Ok(worst)
}

/// Discounted visitation distributions `mu(s)` and `mu(s,a)` from `P0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryDistribution {
    pub state: Vec<f64>,
    pub state_action: DMatrix<f64>,
}

pub fn stationary_distribution(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<StationaryDistribution> {
    let occ = discounted_occupancy(mdp, policy, StartSpec::Initial)?;
    let state_action = occ.mu();
    let state = (0..mdp.n_states()).map(|s| state_action.row(s).sum()).collect();
    Ok(StationaryDistribution {
        state,
        state_action,
    })
}

/// `(1/2) sum_i |p_i - q_i|` between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "distributions have different lengths ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Domain(format!("{name} is not a probability vector (sum {sum})")));
        }
    }
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.clamp(0.0, 1.0))
}

/// Time-indexed total-variation distances between the state distribution
/// at time `t` and the discounted visitation distribution, plus a fitted
/// geometric decay rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ErgodicityRecord {
    pub tv: Vec<f64>,
    /// Least-squares slope of `ln d_TV` against `t` over entries above
    /// `1e-12`.
    pub log_slope: f64,
    /// `exp(log_slope)`, the per-step contraction factor estimate; `0` when
    /// `degenerate`.
    pub rate: f64,
    /// Fewer than two entries exceeded `1e-12`, so no rate could be fitted.
    pub degenerate: bool,
}

pub fn ergodicity_probe(mdp: &FiniteMdp, policy: &TabularPolicy, horizon: usize) -> Result<ErgodicityRecord> {
    if horizon < 2 {
        return Err(Error::Domain("ergodicity probe needs at least two time steps".into()));
    }
    let stationary = stationary_distribution(mdp, policy)?;
    let chain = mdp.policy_chain(policy);
    let mut p = DVector::from_column_slice(mdp.initial_dist());
    let mut tv = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let pv: Vec<f64> = p.iter().copied().collect();
        // propagation drifts off the simplex by rounding only
        let sum: f64 = pv.iter().sum();
        let pv: Vec<f64> = pv.iter().map(|x| x.max(0.0) / sum).collect();
        tv.push(total_variation(&pv, &stationary.state)?);
        p = chain.tr_mul(&p);
    }
    let pts: Vec<(f64, f64)> = tv
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 1e-12)
        .map(|(t, &d)| (t as f64, d.ln()))
        .collect();
    if pts.len() < 2 {
        return Ok(ErgodicityRecord {
            tv,
            log_slope: 0.0,
            rate: 0.0,
            degenerate: true,
        });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(ErgodicityRecord {
        tv,
        log_slope: slope,
        rate: slope.exp(),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn self_loop(gamma: f64) -> FiniteMdp {
        FiniteMdp::new(1, 1, vec![1.0], vec![1.0], gamma).unwrap()
    }

    pub(crate) fn two_cycle(gamma: f64) -> FiniteMdp {
        // s0 -> s1 -> s0 under the single action
        FiniteMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 0.0], gamma).unwrap()
    }

    #[test]
    fn rejects_invalid_kernels() {
        assert!(FiniteMdp::new(1, 1, vec![0.9], vec![1.0], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.5], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![1.0], 1.0).is_err());
        assert!(FiniteMdp::new(2, 1, vec![1.5, -0.5, 0.0, 1.0], vec![1.0, 0.0], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![1.0], 0.0).is_ok());
    }

    #[test]
    fn json_round_trip_preserves_kernel() {
        let m = two_cycle(0.5);
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"initial_dist\""));
        let back: FiniteMdp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let bad = text.replace("[[[0.0,1.0]]", "[[[0.2,1.0]]");
        assert!(serde_json::from_str::<FiniteMdp>(&bad).is_err());
    }

    #[test]
    fn rollout_single_outcome() {
        let m = self_loop(0.9);
        let p = TabularPolicy::uniform(1, 1);
        let mut rng = SeededRng::new(1);
        let t = rollout(&m, &p, StartSpec::Initial, 3, &mut rng).unwrap();
        assert_eq!(t.steps, vec![(0, 0), (0, 0), (0, 0)]);
    }

    #[test]
    fn rollout_deterministic_cycle() {
        let m = two_cycle(0.9);
        let p = TabularPolicy::uniform(2, 1);
        let mut rng = SeededRng::new(1);
        let t = rollout(&m, &p, StartSpec::State(0), 4, &mut rng).unwrap();
        assert_eq!(t.steps, vec![(0, 0), (1, 0), (0, 0), (1, 0)]);
    }

    #[test]
    fn rollout_state_action_start_is_verbatim() {
        let m = FiniteMdp::new(1, 3, vec![1.0, 1.0, 1.0], vec![1.0], 0.5).unwrap();
        let p = TabularPolicy::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let mut rng = SeededRng::new(9);
        let t = rollout(&m, &p, StartSpec::StateAction(0, 2), 3, &mut rng).unwrap();
        assert_eq!(t.steps, vec![(0, 2), (0, 0), (0, 0)]);
    }

    #[test]
    fn rollout_errors() {
        let m = two_cycle(0.9);
        let p = TabularPolicy::uniform(2, 1);
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            rollout(&m, &p, StartSpec::State(5), 2, &mut rng),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            rollout(&m, &p, StartSpec::StateAction(0, 1), 2, &mut rng),
            Err(Error::Domain(_))
        ));
        let bad = TabularPolicy::from_matrix_unchecked(DMatrix::from_element(2, 1, 0.7));
        assert!(matches!(
            rollout(&m, &bad, StartSpec::Initial, 2, &mut rng),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn occupancy_self_loop() {
        let m = self_loop(0.9);
        let p = TabularPolicy::uniform(1, 1);
        let occ = discounted_occupancy(&m, &p, StartSpec::Initial).unwrap();
        assert_abs_diff_eq!(occ.d[(0, 0)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(occ.mu()[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn occupancy_two_cycle_geometric_series() {
        // mu(s0) = (1-g) * sum_k g^{2k} = (1-g)/(1-g^2) = 1/(1+g)
        let m = two_cycle(0.5);
        let p = TabularPolicy::uniform(2, 1);
        let occ = discounted_occupancy(&m, &p, StartSpec::State(0)).unwrap();
        let mu = occ.mu();
        assert_abs_diff_eq!(mu[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[(1, 0)], 1.0 / 3.0, epsilon = 1e-12);
        let st = stationary_distribution(&m, &p).unwrap();
        assert_abs_diff_eq!(st.state[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(st.state[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn occupancy_state_action_start() {
        // from (s0, a) the chain alternates; d(s0)=1+g^2+..., d(s1)=g+g^3+...
        let m = two_cycle(0.5);
        let p = TabularPolicy::uniform(2, 1);
        let occ = discounted_occupancy(&m, &p, StartSpec::StateAction(0, 0)).unwrap();
        assert_abs_diff_eq!(occ.d[(0, 0)], 1.0 / 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(occ.d[(1, 0)], 0.5 / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(total_variation(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(total_variation(&[1.0], &[0.5, 0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn ergodicity_single_state_is_degenerate() {
        let m = self_loop(0.9);
        let p = TabularPolicy::uniform(1, 1);
        let rec = ergodicity_probe(&m, &p, 10).unwrap();
        assert!(rec.tv.iter().all(|&x| x == 0.0));
        assert!(rec.degenerate);
        assert_eq!(rec.rate, 0.0);
    }

    #[test]
    fn ergodicity_uniform_rows() {
        let m = FiniteMdp::new(2, 1, vec![0.5; 4], vec![0.5, 0.5], 0.9).unwrap();
        let p = TabularPolicy::uniform(2, 1);
        let rec = ergodicity_probe(&m, &p, 5).unwrap();
        assert!(rec.tv.iter().all(|&x| x.abs() < 1e-15));

        // From a point mass the time-1 distribution is already the chain's
        // fixed point; the gap to the discounted visitation stays at the
        // weight (1 - gamma) the initial state carries.
        let m = m.with_initial(vec![1.0, 0.0]).unwrap();
        let rec = ergodicity_probe(&m, &p, 5).unwrap();
        for &x in &rec.tv[1..] {
            assert_abs_diff_eq!(x, 0.1 * 0.5, epsilon = 1e-12);
        }
    }
}
