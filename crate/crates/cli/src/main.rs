use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hysrl_core::envs::{build_gridworld, GridWorldSpec};
use hysrl_core::harness::{
    evaluate_policy, gen_source_dataset, load_env, load_policy, render_svg, run_experiment,
    sweep_beta, EvalMode, ExperimentConfig, PlotKind,
};
use hysrl_core::mdp::rng_stream;
use hysrl_core::TabularMdp;

const EXIT_CONFIG: u8 = 2;
const EXIT_CAP_HIT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "hysrl",
    version,
    about = "Transfer RL under dynamics shift: shift identification and hybrid value iteration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a source dataset by reward-free exploration.
    GenSource {
        /// `gridworld-source`, `gridworld-target`, or a JSON environment file.
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100_000)]
        episodes: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 1e-6)]
        bonus_scale: f64,
    },
    /// Run every configured algorithm on every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; `HYSRL_THREADS` takes precedence.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Final percentage gap against the true shift magnitude.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Render metrics or sweep CSVs to SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimality gap of a policy.
    Eval {
        #[arg(long)]
        env: String,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Exact)]
        mode: Mode,
        /// Seed of the Monte-Carlo rollouts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gap,
    Percentage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Mc,
    Both,
}

fn environment(spec: &str) -> hysrl_core::Result<TabularMdp> {
    match spec {
        "gridworld-source" => build_gridworld(&GridWorldSpec::source()),
        "gridworld-target" => build_gridworld(&GridWorldSpec::target()),
        path => load_env(Path::new(path)),
    }
}

fn load_config(path: &Path, threads: Option<usize>) -> hysrl_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if threads.is_some() {
        cfg.threads = threads;
    }
    Ok(cfg)
}

/// Returns whether some run hit the shift-identification cap.
fn execute(command: Command) -> hysrl_core::Result<bool> {
    match command {
        Command::GenSource {
            env,
            episodes,
            out,
            seed,
            delta,
            bonus_scale,
        } => {
            let env = environment(&env)?;
            let data = gen_source_dataset(&env, episodes, delta, bonus_scale, seed)?;
            data.save(&out)?;
            eprintln!(
                "wrote {} ({} episodes, min count {})",
                out.display(),
                data.meta.episodes,
                data.model.min_count(None)?
            );
            Ok(false)
        }
        Command::Run { config, threads } => {
            let cfg = load_config(&config, threads)?;
            let report = run_experiment(&cfg)?;
            for path in report.csv_paths.iter().chain([&report.summary_path]) {
                eprintln!("wrote {}", path.display());
            }
            for alg in &report.summary.algorithms {
                let stopped = alg.runs.iter().filter(|r| r.stopped).count();
                let mean_gap =
                    alg.runs.iter().map(|r| r.final_exact_gap).sum::<f64>() / alg.runs.len() as f64;
                eprintln!(
                    "{}: {stopped}/{} stopped, mean final gap {mean_gap:.6}",
                    alg.algorithm.name(),
                    alg.runs.len()
                );
            }
            Ok(report.cap_hit)
        }
        Command::Sweep { config, threads } => {
            let cfg = load_config(&config, threads)?;
            let report = sweep_beta(&cfg)?;
            eprintln!(
                "wrote {} ({} runs)",
                report.csv_path.display(),
                report.rows.len()
            );
            Ok(report.cap_hit)
        }
        Command::Plot { input, kind, out } => {
            let kind = match kind {
                Kind::Gap => PlotKind::Gap,
                Kind::Percentage => PlotKind::Percentage,
            };
            render_svg(&input, kind, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(false)
        }
        Command::Eval {
            env,
            policy,
            mode,
            seed,
        } => {
            let env = environment(&env)?;
            let pi = load_policy(&policy)?;
            let mode = match mode {
                Mode::Exact => EvalMode::Exact,
                Mode::Mc => EvalMode::MonteCarlo100,
                Mode::Both => EvalMode::Both,
            };
            let eval = evaluate_policy(&env, &pi, mode, &mut rng_stream(seed))?;
            println!("{}", serde_json::to_string(&eval)?);
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("shift identification hit its episode cap; outputs are partial");
            ExitCode::from(EXIT_CAP_HIT)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
