//! The command-line verbs as library functions.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::ablation::{run_ablation, summarize, AblationRun};
use crate::config::{RunConfig, Variant};
use crate::eval::{average, compute_metrics, csv_row, evaluate_fcfs, evaluate_policy, MetricsReport, CSV_HEADER};
use crate::risk::{RiskModel, StateActionSequence};
use crate::sac::Sac;
use crate::train::{collect_collision_windows, TrainError, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Controller {
    Policy,
    Fcfs,
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Risk(#[from] crate::risk::RiskError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("{0}")]
    Usage(String),
}

/// A checkpoint argument may name the file itself or a training output directory.
fn resolve(path: &Path, file: &str) -> Result<PathBuf, CommandError> {
    let p = if path.is_dir() { path.join(file) } else { path.to_owned() };
    if p.exists() {
        Ok(p)
    } else {
        Err(CommandError::Usage(format!("checkpoint not found: {}", p.display())))
    }
}

fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<(), CommandError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Trains into `out`. With `resume`, continues from the checkpoints found there.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Trainer, CommandError> {
    write_config_echo(cfg, out)?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg.clone(), dir)?,
        None => Trainer::new(cfg.clone())?,
    };
    trainer.train(Some(out))?;
    if cfg.train.trace {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("trace.jsonl"))?);
        for e in trainer.trace() {
            serde_json::to_writer(&mut f, e).map_err(std::io::Error::from)?;
            writeln!(f)?;
        }
        f.flush()?;
    }
    if cfg.train.probe_windows > 0 {
        let windows =
            collect_collision_windows(cfg, trainer.sac(), cfg.train.probe_windows, cfg.train.probe_max_steps)?;
        write_sequences(&out.join("probe_windows.jsonl"), &windows)?;
    }
    Ok(trainer)
}

pub fn write_sequences(path: &Path, seqs: &[StateActionSequence]) -> Result<(), CommandError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut f, s).map_err(std::io::Error::from)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads sequences one per line, skipping (with a warning) lines that do
/// not parse or do not fit the model.
pub fn read_scenarios(path: &Path, seq_len: usize, row_dim: usize) -> Result<Vec<StateActionSequence>, CommandError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<StateActionSequence>(&line) {
            Ok(s) => match s.validate(seq_len, row_dim) {
                Ok(()) => out.push(s),
                Err(e) => log::warn!("{}:{}: skipped: {e}", path.display(), i + 1),
            },
            Err(e) => log::warn!("{}:{}: skipped: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Evaluates over every configured seed with the stall rule off. Writes one
/// raw log per seed, `metrics.csv` and `summary.json`.
pub fn cmd_eval(
    cfg: &RunConfig,
    controller: Controller,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<MetricsReport>, CommandError> {
    let sac = match controller {
        Controller::Policy => {
            let path = checkpoint.ok_or_else(|| CommandError::Usage("policy evaluation needs --checkpoint".into()))?;
            Some(Sac::load(&resolve(path, "sac.json")?)?)
        }
        Controller::Fcfs => None,
    };
    write_config_echo(cfg, out)?;
    let label = match controller {
        Controller::Policy => "policy",
        Controller::Fcfs => "fcfs",
    };
    let mut reports = Vec::new();
    for &seed in &cfg.eval.seeds {
        let log = match &sac {
            Some(s) => evaluate_policy(&cfg.sim, &cfg.env, s, seed, cfg.eval.steps)?,
            None => evaluate_fcfs(&cfg.sim, seed, cfg.eval.steps)?,
        };
        log.write_jsonl(&out.join(format!("{label}_seed{seed}.jsonl")))?;
        reports.push(compute_metrics(&log));
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&csv_row(label, r));
        csv.push('\n');
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    let summary = serde_json::json!({ "controller": label, "mean": average(&reports), "per_seed": reports });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(reports)
}

/// Trains and evaluates each variant on the configured ablation seeds.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationRun>, CommandError> {
    write_config_echo(cfg, out)?;
    let runs = run_ablation(cfg, variants, &cfg.eval.ablation_seeds, Some(out))?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &runs {
        for rep in &r.reports {
            csv.push_str(&csv_row(&format!("{}/seed{}", r.variant.name(), r.seed), rep));
            csv.push('\n');
        }
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    let summary: Vec<_> =
        summarize(&runs).into_iter().map(|(v, m)| serde_json::json!({ "variant": v.name(), "mean": m })).collect();
    std::fs::write(out.join("ablation_summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    Ok(runs)
}

/// `(scenario index, action, risk)` for every scenario and grid value.
pub fn cmd_probe(
    checkpoint: &Path,
    scenarios: &Path,
    grid: &[f64],
    out: &Path,
) -> Result<Vec<(usize, f64, f64)>, CommandError> {
    let model = RiskModel::load(&resolve(checkpoint, "risk.json")?)?;
    let c = model.config();
    let seqs = read_scenarios(scenarios, c.seq_len, c.row_dim())?;
    let mut rows = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        for (a, r) in model.sensitivity_probe(s, grid)? {
            rows.push((i, a, r));
        }
    }
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = String::from("scenario,action,risk\n");
    for (i, a, r) in &rows {
        csv.push_str(&format!("{i},{a},{r}\n"));
    }
    std::fs::write(out, csv)?;
    Ok(rows)
}

fn matrix_csv(t: &crate::nn::Tensor) -> String {
    let n = t.shape()[1];
    t.data().chunks(n).map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",") + "\n").collect()
}

/// Writes `bias.csv` plus `raw_l{layer}_h{head}.csv` and
/// `biased_l{layer}_h{head}.csv` for sequence `index` of `sequences`.
pub fn cmd_dump_attention(
    checkpoint: &Path,
    sequences: &Path,
    index: usize,
    out: &Path,
) -> Result<Vec<PathBuf>, CommandError> {
    let model = RiskModel::load(&resolve(checkpoint, "risk.json")?)?;
    let c = model.config();
    let seqs = read_scenarios(sequences, c.seq_len, c.row_dim())?;
    let seq = seqs.get(index).ok_or_else(|| CommandError::Usage(format!("no valid sequence at index {index}")))?;
    let maps = model.attention_maps(seq)?;
    std::fs::create_dir_all(out)?;
    let mut written = vec![out.join("bias.csv")];
    std::fs::write(&written[0], matrix_csv(&maps.bias))?;
    for (l, heads) in maps.raw.iter().enumerate() {
        for (h, raw) in heads.iter().enumerate() {
            let p = out.join(format!("raw_l{l}_h{h}.csv"));
            std::fs::write(&p, matrix_csv(raw))?;
            written.push(p);
            let p = out.join(format!("biased_l{l}_h{h}.csv"));
            std::fs::write(&p, matrix_csv(&maps.biased(l, h)))?;
            written.push(p);
        }
    }
    Ok(written)
}
