//! One-dimensional "drive to the origin" task used to sanity-check SAC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::replay::{Ring, Transition};
use crate::sac::{Sac, SacConfig};

#[derive(Clone, Debug)]
pub struct DoubleIntegrator {
    pub pos: f64,
    pub vel: f64,
    pub t: usize,
    pub dt: f64,
    pub horizon: usize,
    rng: ChaCha8Rng,
}

impl DoubleIntegrator {
    pub fn new(seed: u64) -> Self {
        let mut env = Self { pos: 0.0, vel: 0.0, t: 0, dt: 0.1, horizon: 200, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset();
        env
    }

    /// Random start at distance 0.5 to 1 from the origin, at rest.
    pub fn reset(&mut self) -> [f64; 2] {
        let d = self.rng.random_range(0.5..1.0);
        let side = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        self.reset_to(side * d, 0.0)
    }

    pub fn reset_to(&mut self, pos: f64, vel: f64) -> [f64; 2] {
        self.pos = pos;
        self.vel = vel;
        self.t = 0;
        self.obs()
    }

    pub fn obs(&self) -> [f64; 2] {
        [self.pos, self.vel]
    }

    /// Returns (next observation, reward, done).
    pub fn step(&mut self, action: f64) -> ([f64; 2], f64, bool) {
        let a = action.clamp(-1.0, 1.0);
        self.vel += a * self.dt;
        self.pos += self.vel * self.dt;
        self.t += 1;
        (self.obs(), -self.pos * self.pos * self.dt, self.t >= self.horizon)
    }

    /// Runs one episode from the current state.
    pub fn rollout(&mut self, mut policy: impl FnMut(&[f64; 2]) -> f64) -> f64 {
        let mut ret = 0.0;
        let mut obs = self.obs();
        loop {
            let (next, r, done) = self.step(policy(&obs));
            ret += r;
            obs = next;
            if done {
                return ret;
            }
        }
    }
}

/// Saturated PD law that brakes into the origin.
pub fn scripted_policy(obs: &[f64; 2]) -> f64 {
    (-2.0 * obs[0] - 2.5 * obs[1]).clamp(-1.0, 1.0)
}

/// Mean return over `episodes` fresh starts drawn from `seed`.
pub fn mean_return(seed: u64, episodes: usize, mut policy: impl FnMut(&[f64; 2]) -> f64) -> f64 {
    let mut env = DoubleIntegrator::new(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        env.reset();
        total += env.rollout(&mut policy);
    }
    total / episodes as f64
}

pub fn random_mean_return(seed: u64, episodes: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    mean_return(seed, episodes, |_| rng.random_range(-1.0..1.0))
}

#[derive(Clone, Debug)]
pub struct ToyTraining {
    pub sac: SacConfig,
    pub episodes: usize,
    pub learning_starts: usize,
    /// Gradient updates per environment step after `learning_starts`.
    pub updates_per_step: usize,
    pub buffer: usize,
}

impl Default for ToyTraining {
    fn default() -> Self {
        Self {
            sac: SacConfig { obs_dim: 2, hidden: vec![64, 64], batch_size: 64, ..SacConfig::default() },
            episodes: 200,
            learning_starts: 1000,
            updates_per_step: 1,
            buffer: 100_000,
        }
    }
}

/// Trains a fresh agent on the toy task. Episode ends are time limits, so
/// they are stored as non-terminal.
pub fn train_sac_toy(seed: u64, cfg: &ToyTraining) -> Sac {
    let mut sac = Sac::new(cfg.sac.clone(), seed);
    let mut env = DoubleIntegrator::new(seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut buffer: Ring<Transition> = Ring::new(cfg.buffer);
    let mut seen = 0usize;
    for _ in 0..cfg.episodes {
        let mut obs = env.reset();
        loop {
            let a = if seen < cfg.learning_starts {
                rng.random_range(-1.0..1.0)
            } else {
                sac.sample_action(&obs, &mut rng).0
            };
            let (next, r, done) = env.step(a);
            buffer.push(Transition { obs: obs.to_vec(), action: a, reward: r, next_obs: next.to_vec(), done: false });
            seen += 1;
            obs = next;
            if seen >= cfg.learning_starts {
                for _ in 0..cfg.updates_per_step {
                    let batch = buffer.sample(cfg.sac.batch_size, &mut rng).expect("buffer has data");
                    sac.update(&batch, &mut rng);
                }
            }
            if done {
                break;
            }
        }
    }
    sac
}
