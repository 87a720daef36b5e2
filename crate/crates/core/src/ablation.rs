//! Controlled comparisons: the full method, the method without the risk
//! term, and the method with unbiased attention, each trained and evaluated
//! on the same seeds.

use std::path::Path;

use crate::config::{RunConfig, Variant};
use crate::eval::{average, compute_metrics, evaluate_policy, MetricsReport};
use crate::risk::RiskModel;
use crate::sac::Sac;
use crate::train::{EpisodeStats, TrainError, Trainer};

/// One trained agent and how it evaluated.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub curves: Vec<EpisodeStats>,
    /// One report per evaluation seed.
    pub reports: Vec<MetricsReport>,
    pub sac: Sac,
    pub risk: RiskModel,
}

impl AblationRun {
    pub fn mean_report(&self) -> MetricsReport {
        average(&self.reports).expect("at least one evaluation seed")
    }
}

/// Trains `variant` of `base` with run seed `seed` and evaluates the
/// deterministic actor on every evaluation seed.
pub fn train_and_evaluate(
    base: &RunConfig,
    variant: Variant,
    seed: u64,
    out: Option<&Path>,
) -> Result<AblationRun, TrainError> {
    let mut cfg = base.clone().with_variant(variant);
    cfg.seed = seed;
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let curves = trainer.train(out)?;
    let reports = cfg
        .eval
        .seeds
        .iter()
        .map(|&s| Ok(compute_metrics(&evaluate_policy(&cfg.sim, &cfg.env, trainer.sac(), s, cfg.eval.steps)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok(AblationRun { variant, seed, curves, reports, sac: trainer.sac().clone(), risk: trainer.risk().clone() })
}

pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<AblationRun>, TrainError> {
    let mut runs = Vec::new();
    for &v in variants {
        for &s in seeds {
            log::info!("ablation: training {} with seed {s}", v.name());
            let dir = out.map(|d| d.join(v.name()).join(format!("seed{s}")));
            runs.push(train_and_evaluate(base, v, s, dir.as_deref())?);
        }
    }
    Ok(runs)
}

/// Per-variant average over its runs, in the order variants first appear.
pub fn summarize(runs: &[AblationRun]) -> Vec<(Variant, MetricsReport)> {
    let mut order: Vec<Variant> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let reps: Vec<MetricsReport> = runs.iter().filter(|r| r.variant == v).map(|r| r.mean_report()).collect();
            (v, average(&reps).expect("variant has runs"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_bias_variant_has_zero_bias() {
        let mut cfg = RunConfig::desk();
        cfg.risk.dim = 8;
        cfg.risk.heads = 2;
        cfg.risk.ff_dim = 8;
        cfg.risk.head_hidden = vec![4];
        cfg.train.episodes = 0;
        cfg.eval.steps = 5;
        let run = train_and_evaluate(&cfg, Variant::NoBias, 0, None).unwrap();
        assert!(run.risk.bias().data().iter().all(|&b| b == 0.0));
        let full = train_and_evaluate(&cfg, Variant::Full, 0, None).unwrap();
        assert!(full.risk.bias().data().iter().any(|&b| b < 0.0));
        assert_eq!(summarize(&[run, full]).len(), 2);
    }
}
