//! Command line front end for the training laboratory.
//!
//! Configuration resolves in layers: built-in defaults, then an optional
//! `--config` file, then repeated `--set key=value` overrides, then the
//! dedicated flags (`--seed`, `--env`, `--steps`). The `MA2CL_THREADS`
//! environment variable caps rollout worker count last, so a machine-wide
//! limit wins over any config.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ma2cl_core::config::TrainConfig;
use ma2cl_core::envs::make_env;
use ma2cl_core::gradcheck;
use ma2cl_core::probe::{probe_train, Construction, ProbeConfig, ProbeSpec};
use ma2cl_core::trainer::{evaluate, load_policy, run_ablation, stream, train, STREAM_EVAL};

#[derive(Parser)]
#[command(name = "ma2cl", version, about = "Multi-agent RL with a masked-agent contrastive auxiliary task")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run; writes config.txt, metrics.csv, eval.csv, checkpoint/.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for this run.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run an ablation preset: one training run per variant and seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Preset name; pass an unknown name to see the list.
        #[arg(long)]
        preset: String,
        /// Seeds per variant, starting at the base seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Root directory for the preset/variant/seed tree.
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Replay a trained run's policy greedily and report its mean return.
    Eval {
        /// Run directory holding config.txt and checkpoint/.
        run_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check analytic gradients of every block against finite differences.
    Gradcheck {
        /// Randomized instances per block.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Max acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train only the auxiliary stack on closed-form data and report
    /// retrieval accuracy over time.
    Probe {
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[arg(long, default_value_t = 8)]
        obs_dim: usize,
        /// Dataset structure: cross_agent or temporal.
        #[arg(long, default_value = "cross_agent")]
        construction: String,
        #[arg(long, default_value_t = 2000)]
        train_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Shared configuration layering for `train` and `ablate`.
#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines with dotted keys; `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set ppo.lr_actor=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Environment: flock, leader_follower, or coop_gather (default flock).
    #[arg(long)]
    env: Option<String>,
    /// Total environment steps (default 10000).
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        for pair in &self.sets {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("--set {pair} is not of the form key=value"))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(env) = &self.env {
            cfg.env_name = env.clone();
        }
        if let Some(steps) = self.steps {
            cfg.total_steps = steps;
        }
        if let Ok(cap) = std::env::var("MA2CL_THREADS") {
            let cap: usize = cap
                .parse()
                .context("MA2CL_THREADS must be a positive integer")?;
            if cap == 0 {
                bail!("MA2CL_THREADS must be at least 1");
            }
            cfg.rollout_threads = cfg.rollout_threads.min(cap);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { cfg, out } => cmd_train(&cfg, &out),
        Cmd::Ablate {
            cfg,
            preset,
            seeds,
            out,
        } => cmd_ablate(&cfg, &preset, seeds, &out),
        Cmd::Eval {
            run_dir,
            episodes,
            seed,
        } => cmd_eval(&run_dir, episodes, seed),
        Cmd::Gradcheck {
            instances,
            seed,
            tol,
        } => cmd_gradcheck(instances, seed, tol),
        Cmd::Probe {
            agents,
            obs_dim,
            construction,
            train_steps,
            seed,
        } => cmd_probe(agents, obs_dim, &construction, train_steps, seed),
    }
}

fn cmd_train(args: &ConfigArgs, out: &PathBuf) -> Result<()> {
    let cfg = args.resolve()?;
    println!(
        "training {} on {} ({} agents, {} steps, seed {})",
        if cfg.ma2cl_enabled { "with auxiliary task" } else { "baseline" },
        cfg.env_name,
        cfg.n_agents,
        cfg.total_steps,
        cfg.seed
    );
    let result = train(&cfg, out)?;
    let last = result
        .rows
        .last()
        .context("training produced no metric rows")?;
    println!(
        "done: {} updates, last return {:.3} (std {:.3}), final eval {:.3} (std {:.3})",
        result.rows.len(),
        last.episode_return_mean,
        last.episode_return_std,
        result.final_eval_mean,
        result.final_eval_std
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, preset: &str, seeds: usize, out: &PathBuf) -> Result<()> {
    let base = args.resolve()?;
    println!(
        "ablation {preset} with {seeds} seed(s) from {} on {}",
        base.seed, base.env_name
    );
    let paths = run_ablation(preset, &base, out, seeds)?;
    for p in &paths {
        println!("  {}", p.display());
    }
    println!("{} runs complete", paths.len());
    Ok(())
}

fn cmd_eval(run_dir: &PathBuf, episodes: usize, seed: u64) -> Result<()> {
    let (cfg, ppo) = load_policy(run_dir)?;
    let mut env = make_env(&cfg.env_name, cfg.n_agents)?;
    let mut rng = stream(seed, STREAM_EVAL);
    let (mean, std) = evaluate(env.as_mut(), &ppo, episodes, &mut rng)?;
    println!(
        "{} on {}: mean return {mean:.3} (std {std:.3}) over {episodes} episodes",
        run_dir.display(),
        cfg.env_name
    );
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64, tol: f64) -> Result<()> {
    let report = gradcheck::run(instances, seed)?;
    for c in &report.components {
        println!(
            "{:<16} instances {:>3}  elements {:>6}  max rel err {:.3e}",
            c.component, c.instances, c.params_checked, c.max_rel_err
        );
    }
    if report.all_within(tol) {
        println!("gradcheck passed: max {:.3e} <= {tol:.1e}", report.max_rel_err());
        Ok(())
    } else {
        bail!(
            "gradcheck failed: max {:.3e} > {tol:.1e}",
            report.max_rel_err()
        );
    }
}

fn cmd_probe(
    agents: usize,
    obs_dim: usize,
    construction: &str,
    train_steps: usize,
    seed: u64,
) -> Result<()> {
    let construction = match construction {
        "cross_agent" => Construction::CrossAgent,
        "temporal" => Construction::Temporal,
        other => bail!("unknown construction {other}; expected cross_agent or temporal"),
    };
    let spec = ProbeSpec {
        n_agents: agents,
        obs_dim,
        construction,
        ..ProbeSpec::reference(seed)
    };
    let mut cfg = ProbeConfig::new(spec);
    cfg.train_steps = train_steps;
    let report = probe_train(&cfg)?;
    for (step, acc) in &report.trace {
        println!("step {step:>5}: accuracy {acc:.4}");
    }
    println!("final accuracy {:.4}", report.final_accuracy);
    Ok(())
}
