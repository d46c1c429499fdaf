use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hysrl_core::envs::Generator;
use hysrl_core::harness::{evaluate_policy, load_env, EvalMode, METRICS_HEADER};
use hysrl_core::mdp::rng_stream;
use hysrl_core::Policy;

fn hysrl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hysrl"))
        .args(args)
        .current_dir(dir)
        .env("HYSRL_THREADS", "2")
        .output()
        .expect("binary runs")
}

const HARD_ENV: &str = r#"{"hard_instance": {"bandit_states": 2, "actions": 2, "horizon": 3,
    "gamma": 0.3333333333333333, "optimal_actions": [1, 0]}}"#;

const HARD_CONFIG: &str = r#"
name = "hard"
seeds = [2, 0]
eval_interval = 500
eval_mode = "both"
output_dir = "out"

[environment]
kind = "hard_instance"
bandit_states = 2
actions = 2
horizon = 3
gamma = 0.3333333333333333
optimal_actions = [1, 0]

[source]
episodes = 2000

[hysrl]
epsilon = 0.1
vi_max_episodes = 20000
"#;

#[test]
fn help_lists_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = hysrl(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen-source", "run", "sweep", "plot", "eval"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn gen_source_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.dataset", "b.dataset"] {
        let out = hysrl(
            &[
                "gen-source",
                "--env",
                "gridworld-source",
                "--episodes",
                "200",
                "--seed",
                "7",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = fs::read(dir.path().join("a.dataset")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.dataset")).unwrap());
    assert!(String::from_utf8(a).unwrap().contains("\"episodes\":200"));
}

#[test]
fn run_writes_reproducible_outputs_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("hard.toml"), HARD_CONFIG).unwrap();
    let out = hysrl(&["run", "--config", "hard.toml"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv_a = dir.path().join("out/hard_hysrl.csv");
    let csv_b = dir.path().join("out/hard_bpi_ucbvi.csv");
    let first = fs::read_to_string(&csv_a).unwrap();
    assert_eq!(first.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert!(dir.path().join("out/hard_summary.json").exists());

    let keys: Vec<(u64, u64)> = first
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert!(
        keys.windows(2).all(|w| w[0] < w[1]),
        "rows not ordered by (seed, episode)"
    );

    let out = hysrl(
        &["run", "--config", "hard.toml", "--threads", "1"],
        dir.path(),
    );
    assert!(out.status.success());
    assert_eq!(first, fs::read_to_string(&csv_a).unwrap());

    let svg = dir.path().join("gap.svg");
    let out = hysrl(
        &[
            "plot",
            "--input",
            csv_a.to_str().unwrap(),
            csv_b.to_str().unwrap(),
            "--kind",
            "gap",
            "--out",
            svg.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains("hard_hysrl") && text.contains("hard_bpi_ucbvi"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        format!("{HARD_CONFIG}\nunknown_key = 1\n"),
    )
    .unwrap();
    let out = hysrl(&["run", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let out = hysrl(&["run", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    fs::write(
        dir.path().join("seedless.toml"),
        HARD_CONFIG.replace("seeds = [2, 0]", "seeds = []"),
    )
    .unwrap();
    assert_eq!(
        hysrl(&["sweep", "--config", "seedless.toml"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn empty_csv_is_not_plotted() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("empty.csv"),
        format!("{}\n", METRICS_HEADER.join(",")),
    )
    .unwrap();
    let out = hysrl(
        &[
            "plot",
            "--input",
            "empty.csv",
            "--kind",
            "gap",
            "--out",
            "x.svg",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.svg").exists());

    fs::write(dir.path().join("cols.csv"), "seed,phase\n0,vi\n").unwrap();
    let out = hysrl(
        &[
            "plot", "--input", "cols.csv", "--kind", "gap", "--out", "x.svg",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing column"));
}

#[test]
fn cap_hit_exits_with_three_and_keeps_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
name = "capped"
seeds = [0]
algorithms = ["hysrl"]
eval_interval = 5
output_dir = "out"

[environment]
kind = "gridworld"

[source]
episodes = 300

[hysrl]
shift_max_episodes = 10
vi_max_episodes = 20
"#;
    fs::write(dir.path().join("capped.toml"), cfg).unwrap();
    let out = hysrl(&["run", "--config", "capped.toml"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("out/capped_hysrl.csv").exists());
    assert!(dir.path().join("out/capped_summary.json").exists());
}

#[test]
fn eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("env.json"), HARD_ENV).unwrap();
    let policy = r#"{"kind": "deterministic", "A": 2, "actions": [[0,0,0,0],[0,0,0,0],[0,0,0,0]]}"#;
    fs::write(dir.path().join("pi.json"), policy).unwrap();
    let out = hysrl(
        &[
            "eval", "--env", "env.json", "--policy", "pi.json", "--mode", "both", "--seed", "4",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let env = load_env(&dir.path().join("env.json")).unwrap();
    let generator: Generator = serde_json::from_str(HARD_ENV).unwrap();
    assert_eq!(env, generator.build().unwrap());
    let pi = Policy::deterministic(env.dims(), vec![0; 12]).unwrap();
    let expected = evaluate_policy(&env, &pi, EvalMode::Both, &mut rng_stream(4)).unwrap();
    assert_eq!(printed["exact_gap"].as_f64(), expected.exact_gap);
    assert_eq!(printed["mc_gap"].as_f64(), expected.mc_gap);
    assert!(expected.exact_gap.unwrap() > 0.0);

    let out = hysrl(
        &["eval", "--env", "env.json", "--policy", "missing.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
