use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ResolvedEnvironment};
use crate::envs::{self, ExpertKind, TaskDistribution};
use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Trajectory};
use crate::meta::{self, Admissibility, MetaCheckpoint};
use crate::online::{self, BaselineKind, OnlineRun, RunOptions};
use crate::par;
use crate::policy::TabularPolicy;
use crate::reward::{ParamVector, RewardModel};
use crate::rng::SeededRng;

/// One evaluation task: dynamics, truth and expert.
#[derive(Clone, Debug)]
pub struct EvalTask {
    pub mdp: Arc<FiniteMdp>,
    pub true_reward: DMatrix<f64>,
    pub expert: TabularPolicy,
    pub goal_state: Option<usize>,
}

/// Shared reward features of an environment.
pub fn environment_model(env: &ResolvedEnvironment) -> Result<RewardModel> {
    match env {
        ResolvedEnvironment::Grid(spec) => Ok(envs::build_gridworld(spec)?.model),
        ResolvedEnvironment::Random { n_states, n_actions, .. } => RewardModel::tabular(*n_states, *n_actions),
    }
}

pub fn eval_task(env: &ResolvedEnvironment, goal: Option<(usize, usize)>, expert: ExpertKind) -> Result<EvalTask> {
    match env {
        ResolvedEnvironment::Grid(spec) => {
            let mut spec = spec.clone();
            if let Some(g) = goal {
                spec.goal = g;
            }
            let w = envs::build_gridworld(&spec)?;
            let pol = envs::expert_policy(&w.mdp, &w.true_reward, expert)?;
            Ok(EvalTask {
                mdp: Arc::new(w.mdp),
                true_reward: w.true_reward,
                expert: pol,
                goal_state: Some(w.goal_state),
            })
        }
        ResolvedEnvironment::Random {
            n_states,
            n_actions,
            branching,
            discount,
            seed,
        } => {
            let mut rng = SeededRng::new(*seed);
            let mdp = envs::random_mdp(*n_states, *n_actions, *branching, *discount, &mut rng)?;
            let true_reward = DMatrix::from_fn(*n_states, *n_actions, |_, _| rng.uniform());
            let pol = envs::expert_policy(&mdp, &true_reward, expert)?;
            Ok(EvalTask {
                mdp: Arc::new(mdp),
                true_reward,
                expert: pol,
                goal_state: None,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetaOutcome {
    pub theta_bar: ParamVector,
    pub outer_loss: Vec<f64>,
    pub admissibility: Option<Admissibility>,
    pub checkpoint: MetaCheckpoint,
}

/// Trains (or loads) the meta-prior described by the `[meta]` section.
pub fn meta_prior(cfg: &ExperimentConfig, env: &ResolvedEnvironment, model: &RewardModel) -> Result<Option<MetaOutcome>> {
    let Some(section) = &cfg.meta else {
        return Ok(None);
    };
    let mcfg = cfg.meta_config(model).expect("meta section present");
    if let Some(path) = &section.checkpoint {
        let ck = MetaCheckpoint::load(path)?;
        if ck.dim != model.dim() {
            return Err(Error::Config(format!(
                "checkpoint has dimension {}, reward model has {}",
                ck.dim,
                model.dim()
            )));
        }
        return Ok(Some(MetaOutcome {
            theta_bar: ck.theta_bar.clone(),
            outer_loss: Vec::new(),
            admissibility: None,
            checkpoint: ck,
        }));
    }
    let Some(base) = env.grid() else {
        return Err(Error::Config("meta training needs a gridworld environment".into()));
    };
    let dist = TaskDistribution {
        base: base.clone(),
        goals: section.train_goals.clone(),
        weights: Vec::new(),
        seed: section.seed,
        trajectory_len: cfg.stream_len,
        expert: cfg.expert,
    };
    dist.validate()?;
    let mut rng = SeededRng::new(section.seed);
    let res = meta::meta_train(model, |r| envs::sample_meta_task(&dist, section.m_eval, r), &mcfg, &mut rng)?;
    let checkpoint = MetaCheckpoint::new(res.theta_bar.clone(), &mcfg);
    Ok(Some(MetaOutcome {
        theta_bar: res.theta_bar,
        outer_loss: res.outer_loss,
        admissibility: Some(res.admissibility),
        checkpoint,
    }))
}

/// Final values of one (seed, baseline) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFinal {
    pub seed: u64,
    pub goal: Option<(usize, usize)>,
    pub j_true: f64,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub mean_final_j_true: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std_final_j_true: f64,
    pub mean_final_success_rate: Option<f64>,
    pub runs: Vec<RunFinal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stream_len: usize,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub baselines: BTreeMap<String, BaselineSummary>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Learner and stream generators of a seed. The expert stream and each
/// baseline draw from disjoint streams, so adding a baseline never changes
/// another's results.
pub fn seed_streams(seed: u64, kind: BaselineKind) -> (SeededRng, SeededRng) {
    let root = SeededRng::new(seed);
    let idx = BaselineKind::ALL.iter().position(|&k| k == kind).unwrap() as u64;
    (root.derive(0), root.derive(1 + idx))
}

/// Runs one baseline on one evaluation task.
#[allow(clippy::too_many_arguments)]
pub fn run_single(
    model: &RewardModel,
    task: &EvalTask,
    kind: BaselineKind,
    cfg: &online::MeritConfig,
    stream_len: usize,
    seed: u64,
    success_horizon: usize,
    instrument: bool,
    comparator: Option<&online::Comparator>,
) -> Result<OnlineRun> {
    let (stream_rng, mut learner_rng) = seed_streams(seed, kind);
    let stream = envs::expert_stream(&task.mdp, &task.expert, stream_len, stream_rng)?;
    let full: Option<Trajectory> = (kind == BaselineKind::Hindsight).then(|| Trajectory::new(stream.clone().collect()));
    let opts = RunOptions {
        true_reward: Some(&task.true_reward),
        comparator,
        full_expert: full.as_ref(),
        instrument,
        success: task.goal_state.map(|g| (g, success_horizon)),
    };
    online::run_online(model, &task.mdp, stream, stream_len, kind, cfg, &opts, &mut learner_rng)
}

#[derive(Serialize)]
struct ThetaFile<'a> {
    dim: usize,
    theta: &'a ParamVector,
}

/// Everything `run` produces, before it is written.
pub struct ExperimentOutput {
    pub summary: Summary,
    pub meta: Option<MetaOutcome>,
    pub runs: Vec<(u64, BaselineKind, OnlineRun)>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let env = cfg.resolve_environment()?;
    let model = environment_model(&env)?;
    let gamma = env.discount();
    let meta = meta_prior(cfg, &env, &model)?;
    let prior = meta
        .as_ref()
        .map(|m| m.theta_bar.clone())
        .unwrap_or_else(|| ParamVector::zeros(model.dim()));
    let goals = cfg.run_goals(&env);
    let tasks: Vec<EvalTask> = cfg
        .seeds
        .iter()
        .enumerate()
        .map(|(i, _)| eval_task(&env, goals[i % goals.len()], cfg.expert))
        .collect::<Result<_>>()?;
    let merit_regularized = cfg.merit_config(&model, gamma, prior)?;
    let merit_plain = cfg.merit_config(&model, gamma, ParamVector::zeros(model.dim()))?;
    let horizon = cfg.success_horizon.unwrap_or(cfg.stream_len);
    let jobs: Vec<(usize, BaselineKind)> = (0..cfg.seeds.len())
        .flat_map(|i| cfg.baselines.iter().map(move |&k| (i, k)))
        .collect();
    let results = par::map_range(jobs.len(), |j| {
        let (i, kind) = jobs[j];
        let mcfg = if kind.regularized() { &merit_regularized } else { &merit_plain };
        run_single(&model, &tasks[i], kind, mcfg, cfg.stream_len, cfg.seeds[i], horizon, cfg.instrument, None)
    });
    let results = par::collect_results(results)?;
    let mut baselines = BTreeMap::new();
    for &kind in &cfg.baselines {
        let runs: Vec<RunFinal> = jobs
            .iter()
            .zip(&results)
            .filter(|((_, k), _)| *k == kind)
            .map(|(&(i, _), run)| RunFinal {
                seed: cfg.seeds[i],
                goal: goals[i % goals.len()],
                j_true: *run.j_true.last().expect("stream_len >= 1"),
                success_rate: run.success_rate.last().copied(),
            })
            .collect();
        let js: Vec<f64> = runs.iter().map(|r| r.j_true).collect();
        let (mean, std) = mean_std(&js);
        let succ: Option<Vec<f64>> = runs.iter().map(|r| r.success_rate).collect();
        baselines.insert(
            kind.name().to_string(),
            BaselineSummary {
                mean_final_j_true: mean,
                std_final_j_true: std,
                mean_final_success_rate: succ.map(|s| mean_std(&s).0),
                runs,
            },
        );
    }
    let summary = Summary {
        stream_len: cfg.stream_len,
        seeds: cfg.seeds.clone(),
        lambda: merit_regularized.lambda,
        baselines,
    };
    let runs = jobs
        .into_iter()
        .zip(results)
        .map(|((i, k), r)| (cfg.seeds[i], k, r))
        .collect();
    Ok(ExperimentOutput { summary, meta, runs })
}

pub fn write_meta(meta: &MetaOutcome, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    meta.checkpoint.save(&out.join("meta_prior.json"))?;
    let mut csv = String::from("# schema: meta_loss/v1\niteration,outer_loss\n");
    for (n, l) in meta.outer_loss.iter().enumerate() {
        csv.push_str(&format!("{n},{l}\n"));
    }
    fs::write(out.join("meta_loss.csv"), csv)?;
    Ok(())
}

/// Writes per-run CSVs, final parameters and `summary.json`; returns the
/// written paths in order.
pub fn write_experiment(output: &ExperimentOutput, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    if let Some(meta) = &output.meta {
        write_meta(meta, out)?;
        written.push(out.join("meta_prior.json"));
        written.push(out.join("meta_loss.csv"));
    }
    for (seed, kind, run) in &output.runs {
        let dir = out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir)?;
        let csv = dir.join(format!("{}.csv", kind.name()));
        fs::write(&csv, run.to_csv())?;
        let theta = dir.join(format!("{}_theta.json", kind.name()));
        let file = ThetaFile {
            dim: run.state.theta.len(),
            theta: &run.state.theta,
        };
        fs::write(&theta, serde_json::to_string_pretty(&file)? + "\n")?;
        written.push(csv);
        written.push(theta);
    }
    let summary = out.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&output.summary)? + "\n")?;
    written.push(summary);
    Ok(written)
}

/// Reads a parameter vector from a run's `*_theta.json` or a meta-prior
/// checkpoint.
pub fn load_theta(path: &Path) -> Result<ParamVector> {
    #[derive(Deserialize)]
    struct AnyTheta {
        theta: Option<ParamVector>,
        theta_bar: Option<ParamVector>,
    }
    let text = fs::read_to_string(path)?;
    let any: AnyTheta = serde_json::from_str(&text)?;
    any.theta
        .or(any.theta_bar)
        .ok_or_else(|| Error::Config(format!("{} holds neither `theta` nor `theta_bar`", path.display())))
}
