use std::sync::Arc;

use merit_core::envs::{self, ExpertKind, GridworldSpec, TaskDistribution};
use merit_core::mdp::{self, FiniteMdp, StartSpec, Trajectory};
use merit_core::meta::{self, MetaConfig, MetaTask};
use merit_core::online::{self, BaselineKind, EstimatorMode, MeritConfig, OnlineState, StepSchedule};
use merit_core::soft;
use merit_core::{ParamVector, RewardModel, SeededRng, TabularPolicy};
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn random_policy(n: usize, na: usize, rng: &mut SeededRng) -> TabularPolicy {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let w: Vec<f64> = (0..na).map(|_| 0.05 + rng.uniform()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect();
    TabularPolicy::from_rows(&rows).unwrap()
}

fn random_problem(seed: u64) -> (FiniteMdp, DMatrix<f64>, SeededRng) {
    let mut rng = SeededRng::new(seed);
    let n = 2 + rng.below(7);
    let na = 1 + rng.below(4);
    let gamma = 0.99 * rng.uniform();
    let mdp = envs::random_mdp(n, na, 1 + rng.below(n), gamma, &mut rng).unwrap();
    let r = DMatrix::from_fn(n, na, |_, _| 4.0 * rng.uniform() - 2.0);
    (mdp, r, rng)
}

fn linear_model(n: usize, na: usize, dim: usize, rng: &mut SeededRng) -> RewardModel {
    let f: Vec<f64> = (0..n * na * dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    RewardModel::linear(n, na, dim, f).unwrap()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn total_variation_is_a_metric(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let mut draw = || {
            let w: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let z: f64 = w.iter().sum::<f64>().max(1e-300);
            w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let (p, q, r) = (draw(), draw(), draw());
        let pq = mdp::total_variation(&p, &q).unwrap();
        let qp = mdp::total_variation(&q, &p).unwrap();
        prop_assert_eq!(pq, qp);
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert!(mdp::total_variation(&p, &p).unwrap() == 0.0);
        let pr = mdp::total_variation(&p, &r).unwrap();
        let qr = mdp::total_variation(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-15);
    }

    #[test]
    fn occupancy_flow_residual_is_tiny(seed in any::<u64>()) {
        let (mdp, _, mut rng) = random_problem(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let s = rng.below(mdp.n_states());
        let a = rng.below(mdp.n_actions());
        for start in [StartSpec::Initial, StartSpec::State(s), StartSpec::StateAction(s, a)] {
            let occ = mdp::discounted_occupancy(&mdp, &pi, start).unwrap();
            prop_assert!(mdp::flow_residual(&mdp, &pi, start, &occ).unwrap() <= 1e-9);
            let total: f64 = occ.d.iter().sum();
            prop_assert!((total * (1.0 - mdp.discount()) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rollouts_are_reproducible(seed in any::<u64>(), h in 1usize..60) {
        let (mdp, _, mut rng) = random_problem(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let a = mdp::rollout(&mdp, &pi, StartSpec::Initial, h, &mut SeededRng::new(seed ^ 1)).unwrap();
        let b = mdp::rollout(&mdp, &pi, StartSpec::Initial, h, &mut SeededRng::new(seed ^ 1)).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn soft_operator_contracts(seed in any::<u64>()) {
        let (mdp, r, mut rng) = random_problem(seed);
        let n = mdp.n_states();
        let v1: Vec<f64> = (0..n).map(|_| 10.0 * rng.standard_normal()).collect();
        let v2: Vec<f64> = (0..n).map(|_| 10.0 * rng.standard_normal()).collect();
        let t1 = soft::soft_bellman_operator(&mdp, &r, &v1).unwrap();
        let t2 = soft::soft_bellman_operator(&mdp, &r, &v2).unwrap();
        prop_assert!(sup_diff(&t1, &t2) <= mdp.discount() * sup_diff(&v1, &v2) * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn one_step_improvement_dominates_backup(seed in any::<u64>()) {
        let (mdp, r, mut rng) = random_problem(seed);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let q = soft::soft_policy_evaluation(&mdp, &r, &pi).unwrap();
        let next = soft::policy_improvement(&q);
        let q_next = soft::soft_policy_evaluation(&mdp, &r, &next).unwrap();
        let backup = soft::soft_q_backup(&mdp, &r, &q).unwrap();
        for (a, b) in q_next.iter().zip(backup.iter()) {
            prop_assert!(*a >= b - 1e-8);
        }
    }

    #[test]
    fn soft_values_are_reward_lipschitz(seed in any::<u64>(), eps in 1e-3f64..1.0) {
        let (mdp, r, mut rng) = random_problem(seed);
        let r2 = r.map(|x| x + eps * (2.0 * rng.uniform() - 1.0));
        let a = soft::soft_value_iteration_with(&mdp, &r, &Default::default()).unwrap();
        let b = soft::soft_value_iteration_with(&mdp, &r2, &Default::default()).unwrap();
        prop_assert!(sup_diff(&a.v, &b.v) <= eps / (1.0 - mdp.discount()) + 1e-8);
    }

    #[test]
    fn soft_policy_consistency(seed in any::<u64>()) {
        let (mdp, r, _) = random_problem(seed);
        let sol = soft::soft_value_iteration_with(&mdp, &r, &Default::default()).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let lhs = sol.policy.prob(s, a) * sol.v[s].exp();
                let rhs = sol.q[(s, a)].exp();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
            }
        }
    }

    #[test]
    fn reward_is_lipschitz_in_theta(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let model = linear_model(5, 3, dim, &mut rng);
        let t1: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let t2: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let r1 = model.reward_table(&t1).unwrap();
        let r2 = model.reward_table(&t2).unwrap();
        let gap = (r1 - r2).abs().max();
        let d = ParamVector(t1.clone()).dist(&t2);
        prop_assert!(gap <= model.grad_norm_bound() * d * (1.0 + 1e-12));
        prop_assert_eq!(model.hessian_norm_bound(), 0.0);
    }

    #[test]
    fn gridworld_rows_are_distributions(
        w in 1usize..6, h in 1usize..6, slip in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let mut rng = SeededRng::new(seed);
        let mut spec = GridworldSpec::open(w, h, (w - 1, h - 1));
        spec.slip_prob = slip;
        for _ in 0..rng.below(w * h) {
            let c = (rng.below(w), rng.below(h));
            if c != spec.goal && !spec.walls.contains(&c) {
                spec.walls.push(c);
            }
        }
        let Ok(world) = envs::build_gridworld(&spec) else {
            // Every cell but the goal walled off leaves no start cell.
            return Ok(());
        };
        for s in 0..world.mdp.n_states() {
            for a in 0..4 {
                let row: f64 = (0..world.mdp.n_states()).map(|x| world.mdp.prob(s, a, x)).sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn prefix_gradient_matches_finite_differences(seed in any::<u64>(), dim in 1usize..31, len in 1usize..9) {
        let (mdp, _, mut rng) = random_problem(seed);
        let model = linear_model(mdp.n_states(), mdp.n_actions(), dim, &mut rng);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let prefix = mdp::rollout(&mdp, &pi, StartSpec::Initial, len, &mut rng).unwrap();
        let theta: Vec<f64> = (0..dim).map(|_| 0.5 * rng.standard_normal()).collect();
        let lambda = rng.uniform();
        let cfg = MeritConfig::new(lambda, ParamVector::zeros(dim), StepSchedule::constant(0.1).unwrap());
        let exact = online::exact_prefix_gradient(&model, &mdp, &theta, &prefix, &cfg).unwrap();
        let fd = online::finite_difference_gradient(&model, &mdp, &theta, &prefix, &cfg, 1e-5).unwrap();
        let scale = 1.0 + exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(sup_diff(&exact, &fd) <= 1e-5 * scale);
    }

    #[test]
    fn local_regret_identity(seed in any::<u64>(), len in 1usize..7) {
        let (mdp, _, mut rng) = random_problem(seed);
        let model = linear_model(mdp.n_states(), mdp.n_actions(), 3, &mut rng);
        let pi = random_policy(mdp.n_states(), mdp.n_actions(), &mut rng);
        let prefix = mdp::rollout(&mdp, &pi, StartSpec::Initial, len, &mut rng).unwrap();
        let theta: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        let cfg = MeritConfig::new(0.4, ParamVector(vec![0.1, 0.0, -0.1]), StepSchedule::constant(0.1).unwrap());
        let ell = online::local_regret(&model, &mdp, &theta, &prefix, &cfg).unwrap();
        let terms = online::per_term_gradients(&model, &mdp, &theta, &prefix, &cfg).unwrap();
        let sum: Vec<f64> = (0..3).map(|k| terms.iter().map(|g| g[k]).sum()).collect();
        let sq: f64 = sum.iter().map(|x| x * x).sum();
        let n = len as f64;
        prop_assert!((ell * n * n - sq).abs() <= 1e-9 * (1.0 + sq));
    }

    #[test]
    fn sqrt_decay_iterates_stay_bounded(seed in any::<u64>(), lambda in 0.05f64..3.0) {
        let (mdp, r, mut rng) = random_problem(seed);
        let gamma = mdp.discount();
        let model = linear_model(mdp.n_states(), mdp.n_actions(), 3, &mut rng);
        let expert = envs::expert_policy(&mdp, &r, ExpertKind::Soft).unwrap();
        let prior = ParamVector(vec![0.3, -0.2, 0.1]);
        let cfg = MeritConfig::new(lambda, prior, StepSchedule::sqrt_decay(lambda, gamma).unwrap());
        let stream = envs::expert_stream(&mdp, &expert, 40, rng.derive(1)).unwrap();
        let run = online::run_online(&model, &mdp, stream, 40, BaselineKind::Merit, &cfg, &Default::default(), &mut rng).unwrap();
        prop_assert!(run.max_dist_to_prior(0.0) <= 2.0 * model.grad_norm_bound() / lambda + 1e-9);
    }
}

#[test]
fn hindsight_and_merit_agree_at_completion_on_deterministic_dynamics() {
    let mut spec = GridworldSpec::open(4, 3, (3, 2));
    spec.slip_prob = 0.0;
    let world = envs::build_gridworld(&spec).unwrap();
    let mut rng = SeededRng::new(17);
    let model = linear_model(12, 4, 4, &mut rng);
    let expert = envs::expert_policy(&world.mdp, &world.true_reward, ExpertKind::Soft).unwrap();
    let len = 9;
    let full = Trajectory::new(envs::expert_stream(&world.mdp, &expert, len, rng.derive(1)).unwrap().collect());
    // A rollout horizon equal to the trajectory length leaves nothing to
    // glue after the final pair.
    let mut cfg = MeritConfig::new(0.5, ParamVector(vec![0.2; 4]), StepSchedule::constant(0.05).unwrap());
    cfg.horizon = Some(len);
    let mut state = OnlineState::new(&model, &world.mdp, BaselineKind::Merit, &cfg, &mut rng).unwrap();
    state.theta = ParamVector(vec![0.4, -0.3, 0.1, 0.0]);
    for &p in &full.steps[..len - 1] {
        state.prefix.push(p);
        state.stats.push(p.0, p.1);
        state.t += 1;
    }
    let last = full.steps[len - 1];
    let pi = online::lower_solution(&model, &world.mdp, &state.theta, &cfg.soft).unwrap().policy;
    for seed in 0..5 {
        let merit =
            online::baseline_gradient(BaselineKind::Merit, &model, &world.mdp, &state, last, &pi, &cfg, None, &mut SeededRng::new(seed))
                .unwrap();
        let hind = online::baseline_gradient(
            BaselineKind::Hindsight,
            &model,
            &world.mdp,
            &state,
            last,
            &pi,
            &cfg,
            Some(&full),
            &mut SeededRng::new(seed),
        )
        .unwrap();
        assert!(sup_diff(&merit, &hind) <= 1e-12, "{merit:?} vs {hind:?}");
    }
}

#[test]
fn linear_hyper_gradient_is_plain_eval_gradient() {
    let mut rng = SeededRng::new(23);
    let mdp = envs::random_mdp(5, 2, 2, 0.6, &mut rng).unwrap();
    let model = linear_model(5, 2, 3, &mut rng).scaled(0.01).unwrap();
    let expert = random_policy(5, 2, &mut rng);
    let d_train = mdp::rollout(&mdp, &expert, StartSpec::Initial, 6, &mut rng).unwrap();
    let d_eval = vec![mdp::rollout(&mdp, &expert, StartSpec::Initial, 6, &mut rng).unwrap()];
    let task = MetaTask {
        mdp: Arc::new(mdp),
        true_reward: DMatrix::zeros(5, 2),
        expert,
        goal: None,
        d_train,
        d_eval,
    };
    let mut cfg = MetaConfig::new(1.0, 5, 1, 1);
    cfg.lambda = cfg.admissibility(&model, 0.6).lambda_min;
    let prior = vec![1.0, -2.0, 0.5];
    let res = meta::adapt_task(&model, &task.mdp, &task, &prior, &cfg, EstimatorMode::Exact, &mut rng).unwrap();
    let h = meta::hyper_gradient(&model, &task.mdp, &task, &res, &cfg, EstimatorMode::Exact, &mut rng).unwrap();
    let g = meta::eval_gradient(&model, &task.mdp, &res.phi, &task, &cfg, EstimatorMode::Exact, &mut rng).unwrap();
    assert_eq!(h.h, g);
    assert_eq!(h.conditioning, 0.0);
}

#[test]
fn success_propagation_matches_monte_carlo() {
    let mut spec = GridworldSpec::open(4, 4, (3, 3));
    spec.slip_prob = 0.2;
    let world = envs::build_gridworld(&spec).unwrap();
    let pi = TabularPolicy::uniform(16, 4);
    let horizon = 12;
    let exact = envs::success_probability(&world.mdp, &pi, world.goal_state, horizon).unwrap();
    let n = 10_000;
    let mut hits = 0usize;
    for i in 0..n {
        let traj = mdp::rollout(&world.mdp, &pi, StartSpec::Initial, horizon, &mut SeededRng::new(9).derive(i)).unwrap();
        if traj.steps.iter().any(|&(s, _)| s == world.goal_state) {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((p - exact).abs() <= 3.0 * se, "mc {p} exact {exact} se {se}");
}

#[test]
fn first_stream_state_follows_initial_distribution() {
    let mut rng = SeededRng::new(31);
    let mdp = envs::random_mdp(5, 2, 3, 0.9, &mut rng).unwrap();
    let mdp = mdp.with_initial(vec![0.1, 0.3, 0.2, 0.25, 0.15]).unwrap();
    let pi = TabularPolicy::uniform(5, 2);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for i in 0..n {
        let mut stream = envs::expert_stream(&mdp, &pi, 1, SeededRng::new(77).derive(i)).unwrap();
        counts[stream.next().unwrap().0] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(mdp.initial_dist())
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    assert!(p_value > 0.01, "chi2 {chi2} p {p_value}");
}

#[test]
fn task_draws_are_reproducible() {
    let dist = TaskDistribution {
        base: GridworldSpec::open(4, 4, (3, 3)),
        goals: vec![(3, 3), (0, 3), (3, 0)],
        weights: Vec::new(),
        seed: 0,
        trajectory_len: 8,
        expert: ExpertKind::Soft,
    };
    let a = envs::sample_meta_task(&dist, 2, &mut SeededRng::new(4)).unwrap();
    let b = envs::sample_meta_task(&dist, 2, &mut SeededRng::new(4)).unwrap();
    assert_eq!(a.goal, b.goal);
    assert_eq!(a.d_train, b.d_train);
    assert_eq!(a.d_eval, b.d_eval);
}
