//! A short run of the full loop: agent, outcome labelling, predictor
//! training and risk-shaped reward. Pass an output directory to keep
//! checkpoints and curves.

use riskguard::commands::write_sequences;
use riskguard::config::RunConfig;
use riskguard::eval::{compute_metrics, evaluate_policy};
use riskguard::train::{collect_collision_windows, Trainer};

fn main() {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let mut cfg = RunConfig::desk();
    cfg.train.episodes = 30;
    cfg.train.risk_warmup_episodes = 10;
    let mut trainer = Trainer::new(cfg.clone()).expect("trainer");
    let curves = trainer.train(out.as_deref()).expect("training");
    for s in curves.iter().step_by(5) {
        println!(
            "episode {:>3}: reward {:+.3}, risk {:.3}, collision rate {:.3}, predictor loss {:?}",
            s.episode, s.mean_reward, s.mean_risk, s.collision_rate, s.predictor_loss
        );
    }
    let log = evaluate_policy(&cfg.sim, &cfg.env, trainer.sac(), 1001, 500).expect("evaluation");
    let m = compute_metrics(&log);
    println!("eval: AWT {:.3} s, AQL {:.3}, CR {:?}", m.awt, m.aql, m.cr);
    if let Some(dir) = out {
        let windows = collect_collision_windows(&cfg, trainer.sac(), 8, 3000).expect("rollouts");
        write_sequences(&dir.join("probe_windows.jsonl"), &windows).expect("write windows");
        println!("{} collision windows written to {}", windows.len(), dir.display());
    }
}
