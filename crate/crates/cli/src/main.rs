use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use merit_core::online::{BaselineKind, EstimatorMode};
use merit_core::runner::{self, ExperimentConfig, OracleOptions};
use merit_core::{Error, Result};

#[derive(Parser)]
#[command(name = "merit", version, about = "In-trajectory IRL experiments on finite MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the meta-prior of the config's `[meta]` section.
    MetaTrain(Common),
    /// Run every baseline on every seed and write curves plus a summary.
    Run(Common),
    /// Run the built-in correctness oracles; exits 1 if any fails.
    OracleCheck(OracleArgs),
    /// Cumulative regret at T = 250, 500, 1000, 2000 and its growth ratios.
    RegretSweep(Common),
    /// Normalized reward map of a learned parameter vector.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replace the seed list (or the meta seed) with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these baselines (repeatable).
    #[arg(long)]
    baseline: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out/oracle")]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    config: PathBuf,
    /// A run's `*_theta.json` or a `meta_prior.json` checkpoint.
    #[arg(long)]
    theta: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sampled,
    Exact,
}

fn load(args: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
        if let Some(meta) = &mut cfg.meta {
            meta.seed = seed;
        }
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if !args.baseline.is_empty() {
        cfg.baselines = args.baseline.iter().map(|b| BaselineKind::parse(b)).collect::<Result<_>>()?;
    }
    if let Some(mode) = args.mode {
        cfg.merit.estimator_mode = match mode {
            Mode::Sampled => EstimatorMode::Sampled,
            Mode::Exact => EstimatorMode::Exact,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn meta_train(args: &Common) -> Result<()> {
    let cfg = load(args)?;
    if cfg.meta.as_ref().is_none_or(|m| m.checkpoint.is_some()) {
        return Err(Error::Config("meta-train needs a [meta] section without `checkpoint`".into()));
    }
    let env = cfg.resolve_environment()?;
    let model = runner::environment_model(&env)?;
    let meta = runner::meta_prior(&cfg, &env, &model)?.expect("meta section checked");
    runner::write_meta(&meta, &cfg.out_dir)?;
    println!("wrote {}", cfg.out_dir.join("meta_prior.json").display());
    Ok(())
}

fn run(args: &Common) -> Result<()> {
    let cfg = load(args)?;
    let output = runner::run_experiment(&cfg)?;
    runner::write_experiment(&output, &cfg.out_dir)?;
    for (name, b) in &output.summary.baselines {
        let succ = b
            .mean_final_success_rate
            .map(|s| format!("  success {s:.3}"))
            .unwrap_or_default();
        println!("{name:<12} J_true {:.4} +- {:.4}{succ}", b.mean_final_j_true, b.std_final_j_true);
    }
    println!("wrote {}", cfg.out_dir.join("summary.json").display());
    Ok(())
}

fn regret_sweep(args: &Common) -> Result<()> {
    let cfg = load(args)?;
    let kind = cfg.baselines.first().copied().unwrap_or(BaselineKind::Merit);
    let res = runner::regret_sweep_from_config(&cfg, kind)?;
    let (csv, _) = runner::write_sweep(&res, &cfg.out_dir)?;
    for (i, r) in res.mean_local_ratio.iter().enumerate() {
        println!("R({})/R({}) = {r:.4}", res.horizons[i + 1], res.horizons[i]);
    }
    println!("wrote {}", csv.display());
    Ok(())
}

fn oracle_check(args: &OracleArgs) -> Result<bool> {
    let report = runner::oracle_check_suite(&OracleOptions {
        seed: args.seed,
        ..Default::default()
    });
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("oracle_report.json");
    std::fs::write(&path, report.to_json()?)?;
    for c in &report.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<44} {:.3e} (tol {:.1e})", c.name, c.discrepancy, c.tolerance);
    }
    println!("wrote {}", path.display());
    Ok(report.passed)
}

fn export_heatmap(args: &HeatmapArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let env = cfg.resolve_environment()?;
    let theta = runner::load_theta(&args.theta)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let (csv, pgm) = runner::export_heatmap(env.grid(), &theta, &out)?;
    println!("wrote {} and {}", csv.display(), pgm.display());
    Ok(())
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MetaTrain(a) => meta_train(a),
        Command::Run(a) => run(a),
        Command::RegretSweep(a) => regret_sweep(a),
        Command::ExportHeatmap(a) => export_heatmap(a),
        Command::OracleCheck(a) => {
            info!("oracle suite, seed {}", a.seed);
            return match oracle_check(a) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => fail(&e),
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
