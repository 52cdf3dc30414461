use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
n_trainers = 3
n_validators = 2
step_time = 1

[stop]
rounds = 3

[data]
kind = "synthetic"
samples = 1000
features = 6
classes = 3

[split]
test = 200
trainer_shard = 100
validator_shard = 100

[learner]
learning_rate = 0.05
batch_size = 10

[sync]
scheme = "BSP"
period = 30

[scoring]
enabled = true

[latency]
base = 1
jitter = 2
"#;

fn flobc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flobc")).args(args).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn run_small(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out_dir = dir.join("out");
    let out = flobc(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("rounds 3"), "{}", text(&out.stderr));
    out_dir
}

#[test]
fn run_writes_metrics_and_a_verifiable_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = run_small(dir.path());
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "round,virtual_time,version,accuracy,phi_0,phi_1,phi_2,msgs_sent");
    assert_eq!(lines.count(), 4);

    let chain = out_dir.join("chain.bin");
    let out = flobc(&["verify", chain.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout).trim(), "ok: 4 blocks verified");

    // Same config to stdout gives the same CSV.
    let out = flobc(&["run", dir.path().join("small.toml").to_str().unwrap()]);
    assert_eq!(text(&out.stdout), csv);
}

#[test]
fn verify_names_the_tampered_height() {
    let dir = tempfile::tempdir().unwrap();
    let chain = run_small(dir.path()).join("chain.bin");
    let mut bytes = std::fs::read(&chain).unwrap();
    let last = bytes.len() - 40;
    bytes[last] ^= 0x10;
    std::fs::write(&chain, &bytes).unwrap();
    let out = flobc(&["verify", chain.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("verification failed at height 3"), "{}", text(&out.stderr));
}

#[test]
fn inspect_lists_blocks_and_replays_one() {
    let dir = tempfile::tempdir().unwrap();
    let chain = run_small(dir.path()).join("chain.bin");
    let out = flobc(&["inspect", chain.to_str().unwrap()]);
    assert!(out.status.success());
    let listing = text(&out.stdout);
    assert_eq!(listing.lines().count(), 4);
    assert!(listing.lines().next().unwrap().contains("Genesisx1"), "{listing}");

    let out = flobc(&["inspect", chain.to_str().unwrap(), "--height", "2"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let detail = text(&out.stdout);
    assert!(detail.contains("ReleaseModel v2"), "{detail}");
    assert!(detail.contains("Open round 2"), "{detail}");
    assert!(detail.lines().any(|l| l.starts_with("trust")), "{detail}");

    let out = flobc(&["inspect", chain.to_str().unwrap(), "--height", "9"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no block at height 9"));
}

#[test]
fn bad_inputs_are_reported() {
    let out = flobc(&["experiment", "nonsense"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("nonsense"));

    let out = flobc(&["verify", "/nonexistent/chain.bin"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, SMALL.replace("n_validators = 2", "n_validators = 0")).unwrap();
    let out = flobc(&["run", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).starts_with("error:"), "{}", text(&out.stderr));
}

#[test]
fn template_round_trips_through_run_config_parsing() {
    let out = flobc(&["template", "benchmark"]);
    assert!(out.status.success());
    let toml = text(&out.stdout);
    assert!(toml.contains("n_trainers = 7"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.toml");
    std::fs::write(&cfg, toml.replace("rounds = 30", "rounds = 1")).unwrap();
    let out = flobc(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}

#[test]
fn experiment_writes_runs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let out = flobc(&["experiment", "benchmark", "--seeds", "1", "--rounds", "2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("seed,centralized_final,decentralized_final,gap"));
    let mut files: Vec<String> =
        std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    files.sort();
    assert!(files.contains(&"summary.csv".to_string()), "{files:?}");
    assert!(files.iter().any(|f| f.ends_with(".chain")), "{files:?}");
    let chain = files.iter().find(|f| f.ends_with(".chain")).unwrap();
    let out = flobc(&["verify", out_dir.join(chain).to_str().unwrap()]);
    assert!(out.status.success());
}
