use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use riskguard::commands::{self, Controller};
use riskguard::config::{RunConfig, Variant};

#[derive(Parser)]
#[command(version, about = "Risk-aware reinforcement learning for unsignalized intersections")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML run configuration; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in settings when no --config is given: paper or desk.
    #[arg(long, global = true, default_value = "paper")]
    preset: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint file or training output directory.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "policy")]
    controller: Controller,
    #[arg(long, global = true, value_enum)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train the agent and the risk predictor.
    Train {
        /// Continue from the checkpoints in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained policy or the FCFS baseline.
    Eval,
    /// Train and evaluate the ablation variants.
    Ablate,
    /// Risk of stored windows with the newest action replaced by each grid value.
    Probe {
        /// JSON-lines sequences; defaults to probe_windows.jsonl beside the checkpoint.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Comma-separated action grid; defaults to the configured one.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        actions: Option<Vec<f64>>,
    },
    /// Write raw scores, biased scores and the bias matrix as CSV.
    DumpAttention {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::preset(&cli.preset).ok_or_else(|| format!("unknown preset {:?}", cli.preset))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let (Some(v), false) = (cli.variant, matches!(cli.verb, Verb::Ablate)) {
        cfg = cfg.with_variant(v);
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn default_scenarios(cli: &Cli, given: &Option<PathBuf>) -> Result<PathBuf, String> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    let ck = cli.checkpoint.as_ref().ok_or("--checkpoint is required")?;
    let dir = if ck.is_dir() { ck.clone() } else { ck.parent().map(|p| p.to_path_buf()).unwrap_or_default() };
    Ok(dir.join("probe_windows.jsonl"))
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir.clone();
    let e = |e: commands::CommandError| e.to_string();
    match &cli.verb {
        Verb::Train { resume } => {
            let t = commands::cmd_train(&cfg, &out, resume.as_deref()).map_err(e)?;
            println!("trained {} episodes into {}", t.episode(), out.display());
        }
        Verb::Eval => {
            let reports = commands::cmd_eval(&cfg, cli.controller, cli.checkpoint.as_deref(), &out).map_err(e)?;
            for r in reports {
                println!(
                    "seed {}: AWT {:.2} s, AQL {:.3}, CR {:?}, throughput {}",
                    r.seed, r.awt, r.aql, r.cr, r.throughput
                );
            }
        }
        Verb::Ablate => {
            let variants: Vec<Variant> = cli.variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
            let runs = commands::cmd_ablate(&cfg, &variants, &out).map_err(e)?;
            for (v, m) in riskguard::ablation::summarize(&runs) {
                println!("{}: AWT {:.2} s, AQL {:.3}, CR {:?}", v.name(), m.awt, m.aql, m.cr);
            }
        }
        Verb::Probe { scenarios, actions } => {
            let ck = cli.checkpoint.as_ref().ok_or("--checkpoint is required")?;
            let grid = actions.clone().unwrap_or_else(|| cfg.eval.probe_actions.clone());
            let path = out.join("probe.csv");
            let rows = commands::cmd_probe(ck, &default_scenarios(&cli, scenarios)?, &grid, &path).map_err(e)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
        Verb::DumpAttention { scenarios, index } => {
            let ck = cli.checkpoint.as_ref().ok_or("--checkpoint is required")?;
            let files =
                commands::cmd_dump_attention(ck, &default_scenarios(&cli, scenarios)?, *index, &out).map_err(e)?;
            println!("{} matrices written to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
