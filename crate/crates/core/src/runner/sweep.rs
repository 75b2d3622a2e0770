use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{environment_model, eval_task, run_single, EvalTask};
use crate::error::{Error, Result};
use crate::online::{self, BaselineKind, MeritConfig, OnlineRun};
use crate::par;
use crate::reward::{ParamVector, RewardModel};

pub const SWEEP_HORIZONS: [usize; 4] = [250, 500, 1000, 2000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    /// Cumulative local regret `R(T)` at each horizon.
    pub local: Vec<f64>,
    /// Cumulative loss regret against the comparator at each horizon.
    pub loss: Vec<f64>,
    /// `R(2T) / R(T)` for each consecutive doubling.
    pub local_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub horizons: Vec<usize>,
    pub baseline: String,
    pub comparator_grad_norm: f64,
    pub per_seed: Vec<SeedSweep>,
    /// Seed average of `R(2T) / R(T)`.
    pub mean_local_ratio: Vec<f64>,
    /// Seed average of `R(h_{i+1}) - R(h_i)` for the loss regret.
    pub mean_loss_increment: Vec<f64>,
}

fn is_doubling(h: &[usize]) -> bool {
    h.len() >= 2 && h[0] > 0 && h.windows(2).all(|w| w[1] == 2 * w[0])
}

/// One instrumented run of length `max(horizons)` per seed, read off at
/// every horizon.
pub fn regret_sweep(
    model: &RewardModel,
    task: &EvalTask,
    kind: BaselineKind,
    cfg: &MeritConfig,
    seeds: &[u64],
    horizons: &[usize],
) -> Result<SweepResult> {
    if !is_doubling(horizons) {
        return Err(Error::Config(format!("sweep horizons must double, got {horizons:?}")));
    }
    let longest = *horizons.last().unwrap();
    let comparator = online::stationary_comparator(model, &task.mdp, &task.expert, cfg, 1e-8)?;
    let runs = par::map_slice(seeds, |&seed| -> Result<OnlineRun> {
        run_single(model, task, kind, cfg, longest, seed, longest, true, Some(&comparator))
    });
    let runs = par::collect_results(runs)?;
    let per_seed: Vec<SeedSweep> = seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, run)| {
            let local: Vec<f64> = horizons.iter().map(|&h| run.regret.local_sum(h)).collect();
            let loss: Vec<f64> = horizons.iter().map(|&h| run.regret.loss_regret_between(0, h)).collect();
            let local_ratio = local.windows(2).map(|w| w[1] / w[0]).collect();
            SeedSweep {
                seed,
                local,
                loss,
                local_ratio,
            }
        })
        .collect();
    let n = seeds.len() as f64;
    let mean_local_ratio = (0..horizons.len() - 1)
        .map(|i| per_seed.iter().map(|s| s.local_ratio[i]).sum::<f64>() / n)
        .collect();
    let mean_loss_increment = (0..horizons.len() - 1)
        .map(|i| {
            seeds
                .iter()
                .zip(&runs)
                .map(|(_, r)| r.regret.loss_regret_between(horizons[i], horizons[i + 1]))
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(SweepResult {
        horizons: horizons.to_vec(),
        baseline: kind.name().into(),
        comparator_grad_norm: comparator.grad_norm,
        per_seed,
        mean_local_ratio,
        mean_loss_increment,
    })
}

/// Sweep on the first goal of a config, with a zero prior.
pub fn regret_sweep_from_config(cfg: &ExperimentConfig, kind: BaselineKind) -> Result<SweepResult> {
    let env = cfg.resolve_environment()?;
    let model = environment_model(&env)?;
    let task = eval_task(&env, cfg.run_goals(&env)[0], cfg.expert)?;
    let mcfg = cfg.merit_config(&model, env.discount(), ParamVector::zeros(model.dim()))?;
    regret_sweep(&model, &task, kind, &mcfg, &cfg.seeds, &SWEEP_HORIZONS)
}

pub fn sweep_csv(res: &SweepResult) -> String {
    let mut out = String::from("# schema: regret_sweep/v1\nseed,T,local_regret,loss_regret,growth_ratio\n");
    for s in &res.per_seed {
        for (i, &h) in res.horizons.iter().enumerate() {
            let ratio = if i + 1 < res.horizons.len() {
                s.local_ratio[i].to_string()
            } else {
                String::new()
            };
            out.push_str(&format!("{},{h},{},{},{ratio}\n", s.seed, s.local[i], s.loss[i]));
        }
    }
    out
}

pub fn write_sweep(res: &SweepResult, out: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out)?;
    let csv = out.join("regret_sweep.csv");
    let json = out.join("regret_sweep.json");
    fs::write(&csv, sweep_csv(res))?;
    fs::write(&json, serde_json::to_string_pretty(res)? + "\n")?;
    Ok((csv, json))
}
