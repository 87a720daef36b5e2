//! Agent-facing wrapper around the simulator: normalized observations,
//! action scaling, the three reward terms and per-vehicle episodes.

mod reward;

pub use reward::{direction_ranks, efficiency_reward, safety_reward, total_reward, RewardBreakdown, RewardWeights};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::{SimConfig, SimError, StepReport, Vehicle, VehicleId, World, NUM_MOVEMENTS};

/// Distance, speed, 8 waiting times, 8 queue lengths, 80 occupancy blocks.
pub const OBS_DIM: usize = 2 + 2 * NUM_MOVEMENTS + 80;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("vehicle {0} is not in the world")]
    UnknownVehicle(u64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Waiting-time normalizer, seconds.
    pub t_max: f64,
    /// Queue-length normalizer, vehicles.
    pub q_max: f64,
    pub accel_max: f64,
    /// Steps after which a vehicle's episode is truncated.
    pub max_vehicle_steps: usize,
    pub weights: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { t_max: 300.0, q_max: 20.0, accel_max: 3.0, max_vehicle_steps: 1000, weights: RewardWeights::default() }
    }
}

/// Flattened 98-entry state vector, every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn d_inter(&self) -> f64 {
        self.0[0]
    }

    pub fn v_control(&self) -> f64 {
        self.0[1]
    }

    pub fn waiting(&self) -> &[f64] {
        &self.0[2..2 + NUM_MOVEMENTS]
    }

    pub fn queue(&self) -> &[f64] {
        &self.0[2 + NUM_MOVEMENTS..2 + 2 * NUM_MOVEMENTS]
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.0[2 + 2 * NUM_MOVEMENTS..]
    }
}

/// Observation for a vehicle snapshot against the current world state.
pub fn observe(world: &World, vehicle: &Vehicle, config: &EnvConfig) -> Observation {
    let sim = world.config();
    let mut x = Vec::with_capacity(OBS_DIM);
    x.push((world.distance_to_stop(vehicle) / sim.control_zone).clamp(0.0, 1.0));
    x.push((vehicle.v / sim.v_max).clamp(0.0, 1.0));
    x.extend(world.waiting().iter().map(|w| (w / config.t_max).clamp(0.0, 1.0)));
    x.extend(world.queue().iter().map(|&q| (q as f64 / config.q_max).clamp(0.0, 1.0)));
    x.extend(world.occupancy_grid());
    debug_assert_eq!(x.len(), OBS_DIM);
    Observation(x)
}

pub fn build_observation(world: &World, id: VehicleId, config: &EnvConfig) -> Result<Observation, EnvError> {
    let v = world.vehicle(id).ok_or(EnvError::UnknownVehicle(id.0))?;
    Ok(observe(world, v, config))
}

/// Maps a raw policy output to an acceleration; raw is clamped to `[-1, 1]`
/// first and non-finite values are treated as zero.
pub fn scale_action(raw: f64, accel_max: f64) -> f64 {
    if raw.is_finite() {
        accel_max * raw.clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    None,
    Collision,
    Arrived,
    Truncated,
}

impl Cause {
    pub fn is_done(self) -> bool {
        self != Cause::None
    }

    /// Done for bootstrapping purposes: truncation is not a true terminal.
    pub fn is_terminal(self) -> bool {
        matches!(self, Cause::Collision | Cause::Arrived)
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub vehicle: VehicleId,
    pub obs: Observation,
    /// Raw policy action in `[-1, 1]`.
    pub action: f64,
    pub accel: f64,
    /// Risk term is zero here; the training loop adds it.
    pub reward: RewardBreakdown,
    pub next_obs: Observation,
    pub done: bool,
    pub cause: Cause,
}

#[derive(Clone, Debug)]
struct Episode {
    steps: usize,
    obs: Observation,
}

/// Multi-vehicle environment: every vehicle entering the control zone opens
/// an episode and is driven by the shared policy until it collides, arrives
/// or runs out of steps.
#[derive(Clone, Debug)]
pub struct Env {
    world: World,
    config: EnvConfig,
    episodes: BTreeMap<VehicleId, Episode>,
    last_report: StepReport,
}

impl Env {
    /// `training` turns on the stall-collision rule.
    pub fn new(sim: SimConfig, config: EnvConfig, seed: u64, training: bool) -> Result<Self, EnvError> {
        let mut world = World::new(sim, seed)?;
        world.set_control_enabled(true);
        world.set_stall_rule(training);
        Ok(Self { world, config, episodes: BTreeMap::new(), last_report: StepReport::default() })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn last_report(&self) -> &StepReport {
        &self.last_report
    }

    /// Vehicles with an open episode and the observation each acts on.
    pub fn active(&self) -> impl Iterator<Item = (VehicleId, &Observation)> {
        self.episodes.iter().map(|(id, e)| (*id, &e.obs))
    }

    pub fn num_active(&self) -> usize {
        self.episodes.len()
    }

    /// Applies one raw action per active vehicle (missing ones default to 0),
    /// advances the world and spawns new traffic.
    pub fn step(&mut self, actions: &BTreeMap<VehicleId, f64>) -> Vec<StepOutcome> {
        let ranks = direction_ranks(self.world.waiting());
        let w = self.config.weights;
        let mut pending = Vec::with_capacity(self.episodes.len());
        let mut commands = BTreeMap::new();
        for (&id, ep) in &self.episodes {
            let raw = actions.get(&id).copied().unwrap_or_else(|| {
                log::warn!("no action for vehicle {id}; using 0");
                0.0
            });
            let raw = if raw.is_finite() { raw.clamp(-1.0, 1.0) } else { 0.0 };
            let accel = scale_action(raw, self.config.accel_max);
            let movement = self.world.vehicle(id).map(|v| v.movement).expect("episode without vehicle");
            let r_eff = efficiency_reward(ranks[movement.index()], accel, self.config.accel_max);
            commands.insert(id, accel);
            pending.push((id, ep.obs.clone(), raw, accel, r_eff));
        }

        let mut report = self.world.step(&commands);
        report.spawned = self.world.spawn();

        let mut out = Vec::with_capacity(pending.len());
        for (id, obs, raw, accel, r_eff) in pending {
            let (next_obs, cause, conflict) = if report.collided(id) {
                let v = report.removed_vehicle(id).expect("collided vehicle snapshot");
                (observe(&self.world, v, &self.config), Cause::Collision, true)
            } else if report.arrived(id) {
                let v = report.removed_vehicle(id).expect("arrived vehicle snapshot");
                (observe(&self.world, v, &self.config), Cause::Arrived, false)
            } else {
                let v = self.world.vehicle(id).expect("active vehicle vanished");
                let ep = self.episodes.get_mut(&id).expect("episode");
                ep.steps += 1;
                let cause = if ep.steps >= self.config.max_vehicle_steps { Cause::Truncated } else { Cause::None };
                (observe(&self.world, v, &self.config), cause, self.world.in_conflict(id))
            };
            let r_safe = safety_reward(conflict, accel, self.config.accel_max);
            let reward = total_reward(r_eff, r_safe, 0.0, &w);
            if cause.is_done() {
                self.episodes.remove(&id);
                if cause == Cause::Truncated {
                    self.world.release_control(id).expect("truncated vehicle present");
                }
            } else {
                self.episodes.get_mut(&id).expect("episode").obs = next_obs.clone();
            }
            out.push(StepOutcome {
                vehicle: id,
                obs,
                action: raw,
                accel,
                reward,
                next_obs,
                done: cause.is_done(),
                cause,
            });
        }

        for &id in &report.newly_controlled {
            let obs = build_observation(&self.world, id, &self.config).expect("new controlled vehicle");
            self.episodes.insert(id, Episode { steps: 0, obs });
        }
        self.last_report = report;
        out
    }

    /// Ends every open episode as truncated (end of a simulation window).
    pub fn close_all(&mut self) -> Vec<VehicleId> {
        let ids: Vec<VehicleId> = self.episodes.keys().copied().collect();
        for &id in &ids {
            let _ = self.world.release_control(id);
        }
        self.episodes.clear();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Approach::*, Maneuver::*, MovementId};
    use proptest::prelude::*;

    fn quiet_env() -> Env {
        let sim = SimConfig { demand: [0.0; 8], ..SimConfig::default() };
        Env::new(sim, EnvConfig::default(), 0, true).unwrap()
    }

    #[test]
    fn observation_endpoints() {
        let mut env = quiet_env();
        let cfg = EnvConfig::default();
        let at_line = env.world.insert_vehicle(MovementId::new(E, GS), 60.0, 0.0);
        let far = env.world.insert_vehicle(MovementId::new(W, GS), 30.0, 10.0);
        let o = build_observation(&env.world, at_line, &cfg).unwrap();
        assert_eq!(o.d_inter(), 0.0);
        let o = build_observation(&env.world, far, &cfg).unwrap();
        assert_eq!(o.d_inter(), 1.0);
        assert_eq!(o.v_control(), 1.0);
        assert_eq!(o.0.len(), OBS_DIM);
        assert!(build_observation(&env.world, VehicleId(99), &cfg).is_err());
    }

    #[test]
    fn waiting_time_normalization() {
        let mut env = quiet_env();
        let cfg = EnvConfig::default();
        let m = MovementId::new(N, GL);
        let id = env.world.insert_vehicle(m, 59.0, 0.0);
        env.world.set_controlled(id, true).unwrap();
        // 300 standing steps of 0.5 s
        for _ in 0..300 {
            env.world.step(&BTreeMap::from([(id, -3.0)]));
        }
        let o = build_observation(&env.world, id, &cfg).unwrap();
        assert_eq!(o.waiting()[m.index()], 0.5);
        assert_eq!(o.queue()[m.index()], 1.0 / 20.0);
    }

    #[test]
    fn action_scaling() {
        assert_eq!(scale_action(0.0, 3.0), 0.0);
        assert_eq!(scale_action(1.0, 3.0), 3.0);
        assert_eq!(scale_action(-1.0, 3.0), -3.0);
        assert_eq!(scale_action(7.0, 3.0), 3.0);
        assert_eq!(scale_action(f64::NAN, 3.0), 0.0);
    }

    #[test]
    fn crossing_into_the_zone_opens_an_episode() {
        let mut env = quiet_env();
        let id = env.world.insert_vehicle(MovementId::new(S, GS), 29.0, 10.0);
        env.step(&BTreeMap::new());
        assert_eq!(env.active().map(|(v, _)| v).collect::<Vec<_>>(), vec![id]);
    }

    #[test]
    fn arrival_ends_episode() {
        let mut env = quiet_env();
        env.world.insert_vehicle(MovementId::new(S, GS), 29.0, 10.0);
        let mut causes = Vec::new();
        for _ in 0..40 {
            let acts: BTreeMap<VehicleId, f64> = env.active().map(|(id, _)| (id, 1.0)).collect();
            causes.extend(env.step(&acts).into_iter().filter(|o| o.done).map(|o| o.cause));
        }
        assert_eq!(causes, vec![Cause::Arrived]);
        assert_eq!(env.num_active(), 0);
    }

    #[test]
    fn stall_in_interior_is_a_collision() {
        let mut env = quiet_env();
        env.world.insert_vehicle(MovementId::new(E, GL), 29.0, 10.0);
        let mut last = None;
        for _ in 0..60 {
            let acts: BTreeMap<VehicleId, f64> = env
                .active()
                .map(|(id, o)| {
                    // creep up to the line at about 2 m/s, then stop dead inside
                    let raw = if o.d_inter() == 0.0 || o.v_control() > 0.2 { -1.0 } else { 0.3 };
                    (id, raw)
                })
                .collect();
            for o in env.step(&acts) {
                if o.done {
                    last = Some(o);
                }
            }
        }
        let o = last.expect("episode ended");
        assert_eq!(o.cause, Cause::Collision);
        assert!(o.done);
    }

    #[test]
    fn truncation_releases_vehicle() {
        let sim = SimConfig { demand: [0.0; 8], ..SimConfig::default() };
        let cfg = EnvConfig { max_vehicle_steps: 3, ..EnvConfig::default() };
        let mut env = Env::new(sim, cfg, 0, false).unwrap();
        let id = env.world.insert_vehicle(MovementId::new(S, GS), 29.0, 1.0);
        env.step(&BTreeMap::new());
        let mut outs = Vec::new();
        for _ in 0..3 {
            outs.extend(env.step(&BTreeMap::from([(id, -1.0)])));
        }
        assert_eq!(outs.last().unwrap().cause, Cause::Truncated);
        assert!(!env.world.vehicle(id).unwrap().controlled);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn observations_stay_in_unit_box_and_episodes_end_once(seed in 0u64..500, demand in 0.02f64..0.3) {
            let sim = SimConfig { demand: [demand; 8], ..SimConfig::default() };
            let mut env = Env::new(sim, EnvConfig { max_vehicle_steps: 80, ..EnvConfig::default() }, seed, seed % 2 == 0).unwrap();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut opened = std::collections::BTreeSet::new();
            let mut closed = std::collections::BTreeSet::new();
            for _ in 0..300 {
                let acts: BTreeMap<VehicleId, f64> =
                    env.active().map(|(id, _)| (id, rand::Rng::random_range(&mut rng, -1.0..1.0))).collect();
                opened.extend(acts.keys().copied());
                for o in env.step(&acts) {
                    prop_assert!(o.obs.0.iter().chain(&o.next_obs.0).all(|x| (0.0..=1.0).contains(x)));
                    prop_assert_eq!(o.done, o.cause != Cause::None);
                    let total = o.reward.r_eff + 3.0 * o.reward.r_risk_term + 10.0 * o.reward.r_safe;
                    prop_assert!((total - o.reward.total).abs() < 1e-12);
                    if o.done {
                        prop_assert!(closed.insert(o.vehicle), "episode closed twice");
                    }
                }
            }
            prop_assert!(closed.is_subset(&opened));
        }
    }
}
