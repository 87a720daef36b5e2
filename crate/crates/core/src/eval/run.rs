use std::collections::BTreeMap;

use super::{EpisodeLog, FcfsState};
use crate::env::{Env, EnvConfig, EnvError};
use crate::sac::Sac;
use crate::sim::{SimConfig, World};

/// FCFS over `steps` steps from an empty intersection, stall rule off.
pub fn evaluate_fcfs(sim: &SimConfig, seed: u64, steps: usize) -> Result<EpisodeLog, EnvError> {
    let mut world = World::new(sim.clone(), seed)?;
    world.set_control_enabled(true);
    world.set_stall_rule(false);
    let mut fcfs = FcfsState::new(seed ^ 0xfcf5);
    let mut log = EpisodeLog::new(seed);
    for _ in 0..steps {
        let commands = fcfs.decide(&world);
        let report = world.advance(&commands);
        log.record(&world, &report);
    }
    Ok(log)
}

/// Deterministic actor over `steps` steps from an empty intersection, stall rule off.
pub fn evaluate_policy(
    sim: &SimConfig,
    env_cfg: &EnvConfig,
    sac: &Sac,
    seed: u64,
    steps: usize,
) -> Result<EpisodeLog, EnvError> {
    let mut env = Env::new(sim.clone(), *env_cfg, seed, false)?;
    let mut log = EpisodeLog::new(seed);
    for _ in 0..steps {
        let (ids, obs): (Vec<_>, Vec<_>) = env.active().map(|(id, o)| (id, o.as_slice())).unzip();
        let actions: BTreeMap<_, _> = ids.into_iter().zip(sac.deterministic_actions(&obs)).collect();
        env.step(&actions);
        log.record(env.world(), env.last_report());
    }
    Ok(log)
}
