use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use riskguard::config::RunConfig;
use riskguard::eval::{compute_metrics, EpisodeLog, MetricsReport};
use riskguard::risk::build_bias;

const TINY: &str = r#"
seed = 3
[sac]
hidden = [16, 16]
batch_size = 16
[risk]
dim = 8
heads = 2
ff_dim = 16
head_hidden = [8]
batch_size = 8
[train]
episodes = 2
steps_per_episode = 150
learning_starts = 64
risk_warmup_episodes = 1
risk_updates_per_episode = 2
probe_windows = 4
trace = true
[eval]
seeds = [5, 6]
steps = 120
"#;

fn riskguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskguard")).args(args).output().expect("spawn riskguard")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

struct Trained {
    _dir: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

/// One tiny training run shared by the tests that need checkpoints.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let run = dir.path().join("run");
        ok(&riskguard(&["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]));
        Trained { _dir: dir, config, run }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path, skip: usize) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(skip)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn training_writes_logs_checkpoints_and_config_echo() {
    let t = trained();
    let curves = std::fs::read_to_string(t.run.join("curves.csv")).unwrap();
    assert!(curves.lines().count() >= 2, "header plus at least one episode");
    for f in ["sac.json", "risk.json", "trainer_state.json", "trace.jsonl", "probe_windows.jsonl"] {
        assert!(t.run.join(f).is_file(), "{f} missing");
    }
    let echoed = RunConfig::load(&t.run.join("config.toml")).unwrap();
    let mut given = RunConfig::load(&t.config).unwrap();
    given.out_dir = t.run.clone();
    assert_eq!(echoed, given);
}

#[test]
fn fcfs_eval_needs_no_checkpoint_and_logs_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("fcfs");
    ok(&riskguard(&["eval", "--controller", "fcfs", "--config", s(&cfg), "--out", s(&out)]));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let per_seed: Vec<MetricsReport> = serde_json::from_value(summary["per_seed"].clone()).unwrap();
    assert_eq!(per_seed.len(), 2);
    for r in per_seed {
        let log = EpisodeLog::read_jsonl(&out.join(format!("fcfs_seed{}.jsonl", r.seed))).unwrap();
        let again = compute_metrics(&log);
        assert!((again.awt - r.awt).abs() < 1e-9 && (again.aql - r.aql).abs() < 1e-9);
        assert_eq!(again.collisions, r.collisions);
        assert_eq!(again.throughput, r.throughput);
    }
}

#[test]
fn policy_eval_without_usable_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskguard(&["eval", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let missing = dir.path().join("nope");
    let out = riskguard(&["eval", "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepisodez = 3\n").unwrap();
    let out = riskguard(&["eval", "--controller", "fcfs", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn policy_eval_is_deterministic() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&riskguard(&["eval", "--config", s(&t.config), "--checkpoint", s(&t.run), "--out", s(&out)]));
        std::fs::read(out.join("policy_seed5.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn probe_rows_follow_the_grid() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let windows = std::fs::read_to_string(t.run.join("probe_windows.jsonl")).unwrap().lines().count();
    ok(&riskguard(&["probe", "--checkpoint", s(&t.run), "--actions", "-1,0,1", "--out", s(dir.path())]));
    let rows = read_csv(&dir.path().join("probe.csv"), 1);
    assert_eq!(rows.len(), 3 * windows);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[2])));

    let repeat = dir.path().join("repeat");
    ok(&riskguard(&["probe", "--checkpoint", s(&t.run), "--actions", "0.5,0.5", "--out", s(&repeat)]));
    let rows = read_csv(&repeat.join("probe.csv"), 1);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0][2].to_bits(), pair[1][2].to_bits());
    }
}

#[test]
fn malformed_scenarios_are_skipped() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read_to_string(t.run.join("probe_windows.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    let mixed = dir.path().join("mixed.jsonl");
    std::fs::write(&mixed, format!("{first}\nnot json\n{{\"rows\":[1.0]}}\n{first}\n")).unwrap();
    ok(&riskguard(&[
        "probe",
        "--checkpoint",
        s(&t.run.join("risk.json")),
        "--scenarios",
        s(&mixed),
        "--actions",
        "0",
        "--out",
        s(dir.path()),
    ]));
    assert_eq!(read_csv(&dir.path().join("probe.csv"), 1).len(), 2);
}

#[test]
fn attention_dump_matches_the_bias_rule() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    ok(&riskguard(&["dump-attention", "--checkpoint", s(&t.run), "--out", s(dir.path())]));
    let bias = read_csv(&dir.path().join("bias.csv"), 0);
    let cfg = RunConfig::load(&t.config).unwrap();
    let expect = build_bias(cfg.risk.seq_len, cfg.risk.beta);
    let n = cfg.risk.seq_len;
    assert_eq!(bias.len(), n);
    for i in 0..n {
        assert_eq!(bias[i][n - 1], 0.0);
        for j in 0..n {
            assert_eq!(bias[i][j].to_bits(), expect.at2(i, j).to_bits());
        }
    }
    for l in 0..cfg.risk.layers {
        for h in 0..cfg.risk.heads {
            let raw = read_csv(&dir.path().join(format!("raw_l{l}_h{h}.csv")), 0);
            let biased = read_csv(&dir.path().join(format!("biased_l{l}_h{h}.csv")), 0);
            for i in 0..n {
                for j in 0..n {
                    assert!((biased[i][j] - raw[i][j] - bias[i][j]).abs() < 1e-12);
                }
            }
        }
    }
}
