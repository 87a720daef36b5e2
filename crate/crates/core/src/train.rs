//! The training loop: per-vehicle SAC control with a risk term in the reward
//! from the sequence predictor, which is itself trained on the windows that
//! ended in a collision or an arrival.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, UpdateCadence};
use crate::env::{Cause, Env};
use crate::replay::{OutcomeBuffers, Ring, TrajectoryWindows, Transition};
use crate::risk::{RiskModel, StateActionSequence};
use crate::sac::{Sac, UpdateStats};
use crate::sim::Collision;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Risk(#[from] crate::risk::RiskError),
    #[error(transparent)]
    Replay(#[from] crate::replay::ReplayError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint state: {0}")]
    State(String),
}

/// Independent stream seeds from one run seed.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ENV_STREAM: u64 = 1;
const AGENT_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Act,
    EnvStep,
    Window,
    PredictRisk,
    Reward,
    Store,
    Label,
    Update,
    TrainPredictor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub episode: usize,
    /// `None` for end-of-episode work.
    pub step: Option<usize>,
    pub phase: Phase,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub vehicle_steps: usize,
    pub mean_reward: f64,
    pub mean_r_eff: f64,
    pub mean_r_safe: f64,
    pub mean_risk: f64,
    pub risk_active: bool,
    pub collisions: usize,
    pub stalls: usize,
    pub arrivals: usize,
    pub truncated: usize,
    /// Collided vehicles over vehicles that collided or arrived.
    pub collision_rate: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub sac_updates: usize,
    pub predictor_loss: Option<f64>,
    pub risk_buffer: usize,
    pub safe_buffer: usize,
    pub transitions: usize,
}

pub const CURVE_HEADER: &str = "episode,vehicle_steps,mean_reward,mean_r_eff,mean_r_safe,mean_risk,risk_active,collisions,stalls,arrivals,truncated,collision_rate,critic_loss,actor_loss,alpha,sac_updates,predictor_loss,risk_buffer,safe_buffer,transitions";

impl EpisodeStats {
    pub fn csv_row(&self) -> String {
        let pl = self.predictor_loss.map(|l| l.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.vehicle_steps,
            self.mean_reward,
            self.mean_r_eff,
            self.mean_r_safe,
            self.mean_risk,
            u8::from(self.risk_active),
            self.collisions,
            self.stalls,
            self.arrivals,
            self.truncated,
            self.collision_rate,
            self.critic_loss,
            self.actor_loss,
            self.alpha,
            self.sac_updates,
            pl,
            self.risk_buffer,
            self.safe_buffer,
            self.transitions
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    episode: usize,
}

pub struct Trainer {
    config: RunConfig,
    sac: Sac,
    risk: RiskModel,
    replay: Ring<Transition>,
    outcomes: OutcomeBuffers,
    episode: usize,
    trace: Vec<TraceEvent>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let sac = Sac::new(config.sac.clone(), derive_seed(config.seed, AGENT_STREAM, u64::MAX));
        let risk = RiskModel::new(config.risk.clone(), derive_seed(config.seed, AGENT_STREAM, u64::MAX - 1));
        Ok(Self {
            replay: Ring::new(config.train.buffer_size),
            outcomes: OutcomeBuffers::new(config.train.risk_buffer_size),
            config,
            sac,
            risk,
            episode: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from checkpoints in `dir`. Replay buffers and optimizer
    /// moments start empty.
    pub fn resume(config: RunConfig, dir: &Path) -> Result<Self, TrainError> {
        let mut t = Self::new(config)?;
        t.sac = Sac::load(&dir.join("sac.json"))?;
        t.risk = RiskModel::load(&dir.join("risk.json"))?;
        let s = std::fs::read_to_string(dir.join("trainer_state.json"))?;
        let state: TrainerState = serde_json::from_str(&s).map_err(|e| TrainError::State(e.to_string()))?;
        t.episode = state.episode;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn sac(&self) -> &Sac {
        &self.sac
    }

    pub fn risk(&self) -> &RiskModel {
        &self.risk
    }

    pub fn outcomes(&self) -> &OutcomeBuffers {
        &self.outcomes
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn finished(&self) -> bool {
        self.episode >= self.config.train.episodes
    }

    fn mark(&mut self, step: Option<usize>, phase: Phase) {
        if self.config.train.trace {
            self.trace.push(TraceEvent { episode: self.episode, step, phase });
        }
    }

    fn sac_updates(&mut self, n: usize, rng: &mut ChaCha8Rng, acc: &mut Vec<UpdateStats>) {
        for _ in 0..n {
            let batch = self.replay.sample(self.config.sac.batch_size, rng).expect("replay has data");
            acc.push(self.sac.update(&batch, rng));
        }
    }

    /// One simulation window.
    pub fn run_episode(&mut self) -> Result<EpisodeStats, TrainError> {
        let cfg = self.config.clone();
        let tc = &cfg.train;
        let e = self.episode;
        let mut env = Env::new(cfg.sim.clone(), cfg.env, derive_seed(cfg.seed, ENV_STREAM, e as u64), tc.stall_rule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, AGENT_STREAM, e as u64));
        let mut windows = TrajectoryWindows::new(cfg.risk.seq_len, cfg.risk.state_dim);
        let risk_active = e >= tc.risk_warmup_episodes && cfg.env.weights.risk != 0.0;

        let mut stats = EpisodeStats { episode: e, risk_active, ..EpisodeStats::default() };
        let mut updates = Vec::new();
        let (mut sum_r, mut sum_eff, mut sum_safe, mut sum_risk) = (0.0, 0.0, 0.0, 0.0);

        for step in 0..tc.steps_per_episode {
            let (ids, obs): (Vec<_>, Vec<_>) = env.active().map(|(id, o)| (id, o.as_slice())).unzip();
            let actions: BTreeMap<_, _> =
                ids.into_iter().zip(self.sac.sample_actions(&obs, &mut rng).into_iter().map(|(a, _)| a)).collect();
            self.mark(Some(step), Phase::Act);

            let outcomes = env.step(&actions);
            for c in &env.last_report().collisions {
                if matches!(c, Collision::Stall(_)) {
                    stats.stalls += 1;
                }
            }
            self.mark(Some(step), Phase::EnvStep);
            if outcomes.is_empty() {
                continue;
            }

            for o in &outcomes {
                windows.push(o.vehicle, o.obs.as_slice(), o.action);
            }
            self.mark(Some(step), Phase::Window);

            let risks = if risk_active {
                let seqs: Vec<StateActionSequence> = outcomes.iter().map(|o| windows.snapshot(o.vehicle)).collect();
                let refs: Vec<&StateActionSequence> = seqs.iter().collect();
                let r = self.risk.predict_batch(&refs)?;
                self.mark(Some(step), Phase::PredictRisk);
                r
            } else {
                vec![0.0; outcomes.len()]
            };

            let rewards: Vec<_> =
                outcomes.iter().zip(&risks).map(|(o, &r)| o.reward.with_risk(r, &cfg.env.weights)).collect();
            self.mark(Some(step), Phase::Reward);

            for (o, r) in outcomes.iter().zip(&rewards) {
                self.replay.push(Transition {
                    obs: o.obs.0.clone(),
                    action: o.action,
                    reward: r.total,
                    next_obs: o.next_obs.0.clone(),
                    done: o.cause.is_terminal(),
                });
                sum_r += r.total;
                sum_eff += r.r_eff;
                sum_safe += r.r_safe;
                sum_risk += -r.r_risk_term;
            }
            stats.vehicle_steps += outcomes.len();
            self.mark(Some(step), Phase::Store);

            let mut labeled = false;
            for o in outcomes.iter().filter(|o| o.done) {
                match o.cause {
                    Cause::Collision => stats.collisions += 1,
                    Cause::Arrived => stats.arrivals += 1,
                    _ => stats.truncated += 1,
                }
                if let Some(seq) = windows.finalize(o.vehicle, o.cause) {
                    self.outcomes.push(seq)?;
                    labeled = true;
                }
            }
            if labeled {
                self.mark(Some(step), Phase::Label);
            }

            if tc.cadence == UpdateCadence::PerStep
                && self.replay.len() >= tc.learning_starts
                && step % tc.update_every == 0
            {
                self.sac_updates(tc.updates_per_step, &mut rng, &mut updates);
                self.mark(Some(step), Phase::Update);
            }
        }
        for id in env.close_all() {
            windows.discard(id);
        }
        if tc.cadence == UpdateCadence::PerEpisode && self.replay.len() >= tc.learning_starts {
            self.sac_updates(tc.updates_per_episode, &mut rng, &mut updates);
            self.mark(None, Phase::Update);
        }

        if self.outcomes.ready() && tc.risk_updates_per_episode > 0 {
            let mut total = 0.0;
            for _ in 0..tc.risk_updates_per_episode {
                let batch = self.outcomes.balanced_sample(cfg.risk.batch_size, &mut rng)?;
                total += self.risk.train_step(&batch)?;
            }
            stats.predictor_loss = Some(total / tc.risk_updates_per_episode as f64);
            self.mark(None, Phase::TrainPredictor);
        }

        let n = stats.vehicle_steps.max(1) as f64;
        stats.mean_reward = sum_r / n;
        stats.mean_r_eff = sum_eff / n;
        stats.mean_r_safe = sum_safe / n;
        stats.mean_risk = sum_risk / n;
        let ended = stats.collisions + stats.arrivals;
        stats.collision_rate = if ended == 0 { 0.0 } else { stats.collisions as f64 / ended as f64 };
        if !updates.is_empty() {
            let k = updates.len() as f64;
            stats.critic_loss = updates.iter().map(|u| 0.5 * (u.critic1_loss + u.critic2_loss)).sum::<f64>() / k;
            stats.actor_loss = updates.iter().map(|u| u.actor_loss).sum::<f64>() / k;
        }
        stats.alpha = self.sac.alpha();
        stats.sac_updates = updates.len();
        stats.risk_buffer = self.outcomes.risk.len();
        stats.safe_buffer = self.outcomes.safe.len();
        stats.transitions = self.replay.len();
        self.episode += 1;
        Ok(stats)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        self.sac.save(&dir.join("sac.json"))?;
        self.risk.save(&dir.join("risk.json"))?;
        let state = serde_json::to_string(&TrainerState { episode: self.episode }).expect("plain state");
        std::fs::write(dir.join("trainer_state.json"), state)?;
        Ok(())
    }

    /// Runs the remaining episodes. With an output directory, appends each
    /// episode to `curves.csv` and checkpoints periodically and at the end.
    pub fn train(&mut self, out: Option<&Path>) -> Result<Vec<EpisodeStats>, TrainError> {
        let mut curves = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("curves.csv");
                let fresh = self.episode == 0 || !path.exists();
                let mut f =
                    std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
                if fresh {
                    writeln!(f, "{CURVE_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut all = Vec::new();
        while !self.finished() {
            let s = self.run_episode()?;
            log::info!(
                "episode {} reward {:.3} collisions {} arrivals {} predictor loss {:?}",
                s.episode,
                s.mean_reward,
                s.collisions,
                s.arrivals,
                s.predictor_loss
            );
            if let Some(f) = curves.as_mut() {
                writeln!(f, "{}", s.csv_row())?;
                f.flush()?;
            }
            if let Some(dir) = out {
                let every = self.config.train.checkpoint_every;
                if (every > 0 && self.episode.is_multiple_of(every)) || self.finished() {
                    self.save_checkpoint(dir)?;
                }
            }
            all.push(s);
        }
        Ok(all)
    }
}

/// Rolls out the stochastic policy under the training rules on fresh seeds
/// and keeps the windows that ended in a collision.
pub fn collect_collision_windows(
    config: &RunConfig,
    sac: &Sac,
    count: usize,
    max_steps: usize,
) -> Result<Vec<StateActionSequence>, TrainError> {
    let mut out = Vec::new();
    let mut steps = 0;
    let mut round = 0u64;
    while out.len() < count && steps < max_steps {
        let seed = derive_seed(config.seed, PROBE_STREAM, round);
        let mut env = Env::new(config.sim.clone(), config.env, seed, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut windows = TrajectoryWindows::new(config.risk.seq_len, config.risk.state_dim);
        for _ in 0..config.train.steps_per_episode {
            if out.len() >= count || steps >= max_steps {
                break;
            }
            steps += 1;
            let (ids, obs): (Vec<_>, Vec<_>) = env.active().map(|(id, o)| (id, o.as_slice())).unzip();
            let actions: BTreeMap<_, _> =
                ids.into_iter().zip(sac.sample_actions(&obs, &mut rng).into_iter().map(|(a, _)| a)).collect();
            for o in env.step(&actions) {
                windows.push(o.vehicle, o.obs.as_slice(), o.action);
                if o.done {
                    if let Some(seq) = windows.finalize(o.vehicle, o.cause).filter(|s| s.label == Some(1)) {
                        out.push(seq);
                    }
                }
            }
        }
        round += 1;
    }
    out.truncate(count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config() -> RunConfig {
        let mut c = RunConfig::desk();
        c.sac.hidden = vec![16, 16];
        c.sac.batch_size = 16;
        c.risk.dim = 8;
        c.risk.heads = 2;
        c.risk.ff_dim = 16;
        c.risk.head_hidden = vec![8];
        c.risk.batch_size = 8;
        c.train.episodes = 3;
        c.train.steps_per_episode = 120;
        c.train.learning_starts = 64;
        c.train.risk_warmup_episodes = 1;
        c.train.risk_updates_per_episode = 2;
        c.train.trace = true;
        c.sim.demand = [0.15; 8];
        c
    }

    #[test]
    fn seeds_are_distinct_streams() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(5, 1, 7), derive_seed(5, 1, 7));
    }

    #[test]
    fn phase_order_within_each_step() {
        let mut t = Trainer::new(smoke_config()).unwrap();
        t.train(None).unwrap();
        let trace = t.trace();
        assert!(trace.iter().any(|e| e.phase == Phase::PredictRisk));
        assert!(trace.iter().any(|e| e.phase == Phase::Update));
        for w in trace.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.episode == b.episode && a.step == b.step {
                assert!(a.phase < b.phase, "{a:?} then {b:?}");
            }
            if a.episode == b.episode && a.step.is_some() && b.step.is_some() && a.step != b.step {
                assert_eq!(b.phase, Phase::Act);
            }
        }
        for e in trace.iter().filter(|e| e.step.is_none()) {
            assert!(matches!(e.phase, Phase::Update | Phase::TrainPredictor));
        }
        // every step that produced outcomes runs the full sequence
        let mut by_step: BTreeMap<(usize, usize), Vec<Phase>> = BTreeMap::new();
        for e in trace {
            if let Some(s) = e.step {
                by_step.entry((e.episode, s)).or_default().push(e.phase);
            }
        }
        for phases in by_step.values() {
            assert_eq!(&phases[..2], &[Phase::Act, Phase::EnvStep]);
            if phases.len() > 2 {
                assert_eq!(phases[2], Phase::Window);
                assert!(phases.contains(&Phase::Reward) && phases.contains(&Phase::Store));
            }
        }
    }

    #[test]
    fn warmup_zeroes_risk_term() {
        let mut t = Trainer::new(smoke_config()).unwrap();
        let s0 = t.run_episode().unwrap();
        assert!(!s0.risk_active);
        assert_eq!(s0.mean_risk, 0.0);
        let s1 = t.run_episode().unwrap();
        assert!(s1.risk_active);
        assert!(s1.mean_risk > 0.0);
    }

    #[test]
    fn same_seed_same_curves() {
        let a: Vec<String> =
            Trainer::new(smoke_config()).unwrap().train(None).unwrap().iter().map(|s| s.csv_row()).collect();
        let b: Vec<String> =
            Trainer::new(smoke_config()).unwrap().train(None).unwrap().iter().map(|s| s.csv_row()).collect();
        assert_eq!(a, b);
        let mut c = smoke_config();
        c.seed = 1;
        let d: Vec<String> = Trainer::new(c).unwrap().train(None).unwrap().iter().map(|s| s.csv_row()).collect();
        assert_ne!(a, d);
    }

    #[test]
    fn resume_continues_episode_count() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config();
        cfg.train.episodes = 2;
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.train(Some(dir.path())).unwrap();
        cfg.train.episodes = 3;
        let mut r = Trainer::resume(cfg, dir.path()).unwrap();
        assert_eq!(r.episode(), 2);
        assert_eq!(r.sac().deterministic_action(&[0.1; 98]), t.sac().deterministic_action(&[0.1; 98]));
        r.train(Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn collision_windows_are_labeled_risky() {
        let t = Trainer::new(smoke_config()).unwrap();
        let w = collect_collision_windows(t.config(), t.sac(), 3, 2000).unwrap();
        assert!(!w.is_empty());
        assert!(w.iter().all(|s| s.label == Some(1)));
    }
}
