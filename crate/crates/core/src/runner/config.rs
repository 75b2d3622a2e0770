//! Experiment configuration: a TOML file plus `MERIT__`-prefixed
//! environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{self, ExpertKind, GridworldSpec};
use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::online::{BaselineKind, EstimatorMode, MeritConfig, PolicyMode, StepSchedule};
use crate::reward::{ParamVector, RewardModel};

pub const ENV_PREFIX: &str = "MERIT__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Stream length `T`.
    pub stream_len: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineKind>,
    /// Goal cells of the evaluation tasks; seed `i` uses `goals[i % len]`.
    /// Defaults to the environment's own goal.
    #[serde(default)]
    pub goals: Vec<(usize, usize)>,
    /// Horizon of the success-rate evaluation; `stream_len` when absent.
    #[serde(default)]
    pub success_horizon: Option<usize>,
    /// Record local regret per step.
    #[serde(default)]
    pub instrument: bool,
    #[serde(default)]
    pub expert: ExpertKind,
    pub environment: EnvironmentConfig,
    pub merit: MeritSection,
    #[serde(default)]
    pub meta: Option<MetaSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_baselines() -> Vec<BaselineKind> {
    vec![BaselineKind::Merit, BaselineKind::ItIrl, BaselineKind::NaiveIt]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    /// Inline gridworld.
    Gridworld(GridworldSpec),
    /// Gridworld spec stored as JSON.
    GridworldFile { path: PathBuf },
    /// The 14 x 10 two-wall map with optional overrides.
    AnalogMap {
        goal: (usize, usize),
        #[serde(default)]
        discount: Option<f64>,
        #[serde(default)]
        goal_reward: Option<f64>,
        #[serde(default)]
        step_cost: Option<f64>,
        #[serde(default)]
        slip_prob: Option<f64>,
        #[serde(default)]
        feature_kind: Option<envs::FeatureKind>,
        #[serde(default)]
        feature_scale: Option<f64>,
    },
    /// Random MDP with one-hot features and a uniform random true reward.
    Random {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        discount: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeritSection {
    /// Regularization weight in parameter units.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Regularization weight in units of the squared feature bound:
    /// `lambda = effective_lambda * C^2`.
    #[serde(default)]
    pub effective_lambda: Option<f64>,
    #[serde(default = "default_schedule")]
    pub schedule: String,
    /// Step size of the `constant` schedule.
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default = "default_estimator")]
    pub estimator_mode: EstimatorMode,
    #[serde(default = "default_policy_mode")]
    pub policy_mode: PolicyMode,
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub tail_tol: Option<f64>,
    #[serde(default)]
    pub rollouts: Option<usize>,
    #[serde(default)]
    pub init_scale: Option<f64>,
}

fn default_schedule() -> String {
    "sqrt_decay".into()
}

fn default_estimator() -> EstimatorMode {
    EstimatorMode::Sampled
}

fn default_policy_mode() -> PolicyMode {
    PolicyMode::OneStep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    /// Load the prior from this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train_goals: Vec<(usize, usize)>,
    #[serde(default = "default_m_eval")]
    pub m_eval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_inner")]
    pub inner_steps: usize,
    #[serde(default = "default_outer")]
    pub outer_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mode: Option<EstimatorMode>,
    #[serde(default)]
    pub per_start: bool,
    #[serde(default)]
    pub outer_scale: Option<f64>,
    /// Outer step multiplier in units of `1 / C^2`.
    #[serde(default)]
    pub effective_outer_scale: Option<f64>,
    /// Rescale the features so the configured `effective_lambda` is
    /// admissible for the inner problem.
    #[serde(default)]
    pub auto_feature_scale: bool,
}

fn default_m_eval() -> usize {
    3
}

fn default_inner() -> usize {
    20
}

fn default_outer() -> usize {
    50
}

fn default_batch() -> usize {
    5
}

/// Margin applied to the largest admissible feature bound.
const SCALE_MARGIN: f64 = 0.9;

/// Environment after files and overrides are resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum ResolvedEnvironment {
    Grid(GridworldSpec),
    Random {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        discount: f64,
        seed: u64,
    },
}

impl ResolvedEnvironment {
    pub fn discount(&self) -> f64 {
        match self {
            ResolvedEnvironment::Grid(s) => s.discount,
            ResolvedEnvironment::Random { discount, .. } => *discount,
        }
    }

    pub fn grid(&self) -> Option<&GridworldSpec> {
        match self {
            ResolvedEnvironment::Grid(s) => Some(s),
            ResolvedEnvironment::Random { .. } => None,
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applying overrides from `vars` first.
    pub fn from_toml_with(text: &str, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (key, value) in vars {
            apply_override(&mut table, &key[ENV_PREFIX.len()..], &value)?;
        }
        let cfg: ExperimentConfig = table.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, std::env::vars())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase_paths(base);
        cfg.check_files()?;
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        if let EnvironmentConfig::GridworldFile { path } = &mut self.environment {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let Some(meta) = &mut self.meta {
            if let Some(p) = &mut meta.checkpoint {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    fn check_files(&self) -> Result<()> {
        if let EnvironmentConfig::GridworldFile { path } = &self.environment {
            if !path.is_file() {
                return Err(Error::Config(format!("environment file {} does not exist", path.display())));
            }
        }
        if let Some(p) = self.meta.as_ref().and_then(|m| m.checkpoint.as_ref()) {
            if !p.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.stream_len == 0 {
            return Err(Error::Config("stream_len must be at least 1".into()));
        }
        if self.baselines.is_empty() {
            return Err(Error::Config("baselines must be nonempty".into()));
        }
        if self.success_horizon == Some(0) {
            return Err(Error::Config("success_horizon must be at least 1".into()));
        }
        match (self.merit.lambda, self.merit.effective_lambda) {
            (Some(_), Some(_)) => return Err(Error::Config("set either lambda or effective_lambda, not both".into())),
            (None, None) => return Err(Error::Config("merit.lambda or merit.effective_lambda is required".into())),
            _ => {}
        }
        if let Some(meta) = &self.meta {
            if meta.checkpoint.is_none() && meta.train_goals.is_empty() {
                return Err(Error::Config("meta.train_goals must be nonempty when no checkpoint is given".into()));
            }
            if meta.outer_scale.is_some() && meta.effective_outer_scale.is_some() {
                return Err(Error::Config("set either outer_scale or effective_outer_scale, not both".into()));
            }
            if meta.auto_feature_scale && self.merit.effective_lambda.is_none() {
                return Err(Error::Config("auto_feature_scale needs merit.effective_lambda".into()));
            }
        }
        Ok(())
    }

    /// Environment with files loaded and the admissible feature scale applied.
    pub fn resolve_environment(&self) -> Result<ResolvedEnvironment> {
        let mut env = match &self.environment {
            EnvironmentConfig::Gridworld(spec) => ResolvedEnvironment::Grid(spec.clone()),
            EnvironmentConfig::GridworldFile { path } => {
                let text = std::fs::read_to_string(path)?;
                ResolvedEnvironment::Grid(serde_json::from_str(&text)?)
            }
            EnvironmentConfig::AnalogMap {
                goal,
                discount,
                goal_reward,
                step_cost,
                slip_prob,
                feature_kind,
                feature_scale,
            } => {
                let mut spec = GridworldSpec::analog_map(*goal);
                if let Some(v) = discount {
                    spec.discount = *v;
                }
                if let Some(v) = goal_reward {
                    spec.goal_reward = *v;
                }
                if let Some(v) = step_cost {
                    spec.step_cost = *v;
                }
                if let Some(v) = slip_prob {
                    spec.slip_prob = *v;
                }
                if let Some(v) = feature_kind {
                    spec.feature_kind = v.clone();
                }
                if let Some(v) = feature_scale {
                    spec.feature_scale = *v;
                }
                ResolvedEnvironment::Grid(spec)
            }
            EnvironmentConfig::Random {
                n_states,
                n_actions,
                branching,
                discount,
                seed,
            } => ResolvedEnvironment::Random {
                n_states: *n_states,
                n_actions: *n_actions,
                branching: *branching,
                discount: *discount,
                seed: *seed,
            },
        };
        let auto = self.meta.as_ref().is_some_and(|m| m.auto_feature_scale);
        if auto {
            let ResolvedEnvironment::Grid(spec) = &mut env else {
                return Err(Error::Config("auto_feature_scale needs a gridworld environment".into()));
            };
            let lam = self.merit.effective_lambda.unwrap_or_default();
            let unit = {
                let mut s = spec.clone();
                s.feature_scale = 1.0;
                envs::build_gridworld(&s)?.model.grad_norm_bound()
            };
            let target = SCALE_MARGIN * lam * (1.0 - spec.discount).powi(4) / 36.0;
            spec.feature_scale = target / unit;
        }
        if let ResolvedEnvironment::Grid(spec) = &env {
            spec.validate()?;
        }
        Ok(env)
    }

    /// `lambda` in parameter units for a model.
    pub fn lambda(&self, model: &RewardModel) -> f64 {
        match (self.merit.lambda, self.merit.effective_lambda) {
            (Some(l), _) => l,
            (None, Some(e)) => e * model.grad_norm_bound().powi(2),
            (None, None) => f64::NAN,
        }
    }

    pub fn schedule(&self, lambda: f64, gamma: f64) -> Result<StepSchedule> {
        match self.merit.schedule.as_str() {
            "sqrt_decay" => StepSchedule::sqrt_decay(lambda, gamma),
            "linear_reward_decay" => StepSchedule::linear_reward_decay(lambda, gamma),
            "constant" => StepSchedule::constant(
                self.merit.step.ok_or_else(|| Error::Config("constant schedule needs merit.step".into()))?,
            ),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn merit_config(&self, model: &RewardModel, gamma: f64, prior: ParamVector) -> Result<MeritConfig> {
        let lambda = self.lambda(model);
        let mut cfg = MeritConfig::new(lambda, prior, self.schedule(lambda, gamma)?);
        cfg.estimator_mode = self.merit.estimator_mode;
        cfg.policy_mode = self.merit.policy_mode;
        cfg.horizon = self.merit.horizon;
        if let Some(v) = self.merit.tail_tol {
            cfg.tail_tol = v;
        }
        if let Some(v) = self.merit.rollouts {
            cfg.rollouts = v;
        }
        if let Some(v) = self.merit.init_scale {
            cfg.init_scale = v;
        }
        cfg.validate(model)?;
        Ok(cfg)
    }

    pub fn meta_config(&self, model: &RewardModel) -> Option<MetaConfig> {
        let meta = self.meta.as_ref()?;
        let mut cfg = MetaConfig::new(self.lambda(model), meta.inner_steps, meta.outer_steps, meta.batch_size);
        cfg.eta = meta.eta;
        cfg.mode = meta.mode.unwrap_or(self.merit.estimator_mode);
        cfg.per_start = meta.per_start;
        cfg.outer_scale = match (meta.outer_scale, meta.effective_outer_scale) {
            (Some(v), _) => v,
            (None, Some(e)) => e / model.grad_norm_bound().powi(2),
            (None, None) => 1.0,
        };
        Some(cfg)
    }

    /// Goals of the evaluation runs.
    pub fn run_goals(&self, env: &ResolvedEnvironment) -> Vec<Option<(usize, usize)>> {
        match env {
            ResolvedEnvironment::Grid(spec) if self.goals.is_empty() => vec![Some(spec.goal)],
            ResolvedEnvironment::Grid(_) => self.goals.iter().copied().map(Some).collect(),
            ResolvedEnvironment::Random { .. } => vec![None],
        }
    }
}

/// Sets `a.b.c = value` for the override key `A__B__C`. Keys are matched
/// lowercase; values are parsed as TOML and fall back to strings.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {ENV_PREFIX}{key}")));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {ENV_PREFIX}{key}: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seeds = [1, 2]
stream_len = 10

[environment]
kind = "analog_map"
goal = [12, 5]

[merit]
lambda = 0.5
"#;

    fn parse(text: &str, vars: &[(&str, &str)]) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_with(text, vars.iter().map(|(k, v)| (k.to_string(), v.to_string())))
    }

    #[test]
    fn parses_minimal_config() {
        let cfg = parse(BASE, &[]).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.baselines.len(), 3);
        let env = cfg.resolve_environment().unwrap();
        assert_eq!(env.grid().unwrap().width, 14);
    }

    #[test]
    fn empty_seeds_rejected() {
        let err = parse(&BASE.replace("[1, 2]", "[]"), &[]).unwrap_err();
        assert!(err.to_string().contains("seeds must be nonempty"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn env_overrides_apply() {
        let cfg = parse(
            BASE,
            &[
                ("MERIT__SEEDS", "[7]"),
                ("MERIT__MERIT__LAMBDA", "2.5"),
                ("MERIT__ENVIRONMENT__DISCOUNT", "0.8"),
                ("MERIT__MERIT__SCHEDULE", "constant"),
                ("MERIT__MERIT__STEP", "0.01"),
                ("OTHER", "1"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.merit.lambda, Some(2.5));
        assert_eq!(cfg.merit.schedule, "constant");
        assert_eq!(cfg.resolve_environment().unwrap().discount(), 0.8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(&format!("{BASE}\nbogus = 1\n"), &[]).is_err());
        assert!(parse(BASE, &[("MERIT__MERIT__LAMBDAA", "1")]).is_err());
    }

    #[test]
    fn auto_scale_makes_lambda_admissible() {
        let text = BASE.replace("lambda = 0.5", "effective_lambda = 0.01")
            + "\n[meta]\ntrain_goals = [[11, 2]]\nauto_feature_scale = true\n";
        let cfg = parse(&text, &[]).unwrap();
        let env = cfg.resolve_environment().unwrap();
        let world = envs::build_gridworld(env.grid().unwrap()).unwrap();
        let meta = cfg.meta_config(&world.model).unwrap();
        assert!(meta.validate(&world.model, env.discount()).is_ok());
    }
}
