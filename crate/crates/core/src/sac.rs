//! Soft actor-critic with a tanh-squashed Gaussian actor, twin critics and
//! Polyak-averaged target critics.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{Adam, AdamConfig, Bound, Checkpoint, Graph, Mlp, NnError, ParamStore, Tensor, Var};
use crate::replay::Transition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub target_entropy: f64,
    pub batch_size: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            obs_dim: 98,
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 4e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.12,
            auto_alpha: false,
            target_entropy: -1.0,
            batch_size: 256,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

/// Log-density of `a = tanh(u)` when `u ~ N(mean, exp(log_std)^2)`.
pub fn tanh_gaussian_log_prob(mean: f64, log_std: f64, u: f64) -> f64 {
    let xi = (u - mean) / log_std.exp();
    -0.5 * xi * xi - log_std - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(u)
}

/// `ln(1 - tanh(u)^2)` in a form that stays finite for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - crate::nn::softplus(-2.0 * u))
}

/// Soft Bellman target `r + gamma (1 - done) (min Q' - alpha log pi)`.
pub fn soft_target(reward: f64, done: bool, min_q_next: f64, alpha: f64, log_prob_next: f64, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * (min_q_next - alpha * log_prob_next)
    }
}

/// `0.5 * mean((q - y)^2)`.
pub fn half_mse<'g>(q: Var<'g>, y: Var<'g>) -> Var<'g> {
    let d = q - y;
    (d * d).mean().scale(0.5)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic1_loss: f64,
    pub critic2_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    /// Mean of `-log pi` over the actor batch.
    pub entropy: f64,
}

#[derive(Clone, Debug)]
struct Critic {
    params: ParamStore,
    target: ParamStore,
    opt: Adam,
}

#[derive(Clone, Debug)]
pub struct Sac {
    config: SacConfig,
    actor_net: Mlp,
    actor: ParamStore,
    actor_opt: Adam,
    critic_net: Mlp,
    critics: [Critic; 2],
    log_alpha: ParamStore,
    alpha_opt: Adam,
    updates: u64,
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        assert_eq!(r.len(), width, "observation width");
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::new(&[n, width], data).expect("stacked rows")
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.collect();
    let n = data.len();
    Tensor::new(&[n, 1], data).expect("column")
}

impl Sac {
    pub fn new(config: SacConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = ParamStore::new();
        let mut sizes = vec![config.obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(2);
        let actor_net = Mlp::new(&mut actor, "actor", &sizes, &mut rng);
        let mut csizes = vec![config.obs_dim + 1];
        csizes.extend(&config.hidden);
        csizes.push(1);
        let make_critic = |rng: &mut ChaCha8Rng| {
            let mut params = ParamStore::new();
            let net = Mlp::new(&mut params, "critic", &csizes, rng);
            let opt = Adam::new(AdamConfig::with_lr(config.critic_lr), &params);
            (net, Critic { target: params.clone(), params, opt })
        };
        let (critic_net, c1) = make_critic(&mut rng);
        let (_, c2) = make_critic(&mut rng);
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(config.alpha.ln()));
        Self {
            actor_opt: Adam::new(AdamConfig::with_lr(config.actor_lr), &actor),
            alpha_opt: Adam::new(AdamConfig::with_lr(config.alpha_lr), &log_alpha),
            config,
            actor_net,
            actor,
            critic_net,
            critics: [c1, c2],
            log_alpha,
            updates: 0,
        }
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.values()[0].item().exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn actor_params(&self) -> &ParamStore {
        &self.actor
    }

    pub fn critic_params(&self, i: usize) -> &ParamStore {
        &self.critics[i].params
    }

    pub fn target_params(&self, i: usize) -> &ParamStore {
        &self.critics[i].target
    }

    /// Mean and clamped log-std, each `[batch, 1]`.
    fn actor_head<'g>(&self, p: &Bound<'g, '_>, obs: Var<'g>) -> (Var<'g>, Var<'g>) {
        let out = self.actor_net.forward(p, obs);
        let mean = out.slice_cols(0, 1);
        let log_std = out.slice_cols(1, 1).clamp(self.config.log_std_min, self.config.log_std_max);
        (mean, log_std)
    }

    /// Reparameterized squashed sample and its log-probability, `[batch, 1]` each.
    fn sample_in_graph<'g>(&self, g: &'g Graph, p: &Bound<'g, '_>, obs: Var<'g>, noise: &[f64]) -> (Var<'g>, Var<'g>) {
        let (mean, log_std) = self.actor_head(p, obs);
        let xi = column(noise.iter().copied());
        let base = column(noise.iter().map(|x| -0.5 * x * x - 0.5 * (2.0 * PI).ln()));
        let u = mean + log_std.exp() * g.constant(xi);
        let a = u.tanh();
        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let log_jac = (u.scale(-1.0) - u.scale(-2.0).softplus()).add_scalar(LN_2).scale(2.0);
        let logp = g.constant(base) - log_std - log_jac;
        (a, logp)
    }

    fn critic_q<'g>(&self, p: &Bound<'g, '_>, obs: Var<'g>, action: Var<'g>) -> Var<'g> {
        self.critic_net.forward(p, obs.concat_cols(action))
    }

    fn noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Stochastic raw actions and their log-probabilities for a batch of observations.
    pub fn sample_actions<R: Rng + ?Sized>(&self, obs: &[&[f64]], rng: &mut R) -> Vec<(f64, f64)> {
        if obs.is_empty() {
            return Vec::new();
        }
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.actor);
        let x = g.constant(stack_rows(obs.iter().copied(), self.config.obs_dim));
        let noise = Self::noise(obs.len(), rng);
        let (a, logp) = self.sample_in_graph(&g, &p, x, &noise);
        a.value().data().iter().copied().zip(logp.value().data().iter().copied()).collect()
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> (f64, f64) {
        self.sample_actions(&[obs], rng)[0]
    }

    /// `tanh(mean)` for each observation.
    pub fn deterministic_actions(&self, obs: &[&[f64]]) -> Vec<f64> {
        if obs.is_empty() {
            return Vec::new();
        }
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.actor);
        let x = g.constant(stack_rows(obs.iter().copied(), self.config.obs_dim));
        let (mean, _) = self.actor_head(&p, x);
        mean.value().data().iter().map(|m| m.tanh()).collect()
    }

    pub fn deterministic_action(&self, obs: &[f64]) -> f64 {
        self.deterministic_actions(&[obs])[0]
    }

    /// Mean and log-std of the pre-squash Gaussian for one observation.
    pub fn policy_params(&self, obs: &[f64]) -> (f64, f64) {
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.actor);
        let (m, s) = self.actor_head(&p, g.constant(stack_rows(std::iter::once(obs), self.config.obs_dim)));
        (m.item(), s.item())
    }

    pub fn q_values(&self, obs: &[f64], action: f64) -> (f64, f64) {
        let q = |store: &ParamStore| {
            let g = Graph::new();
            let p = Bound::frozen(&g, store);
            let x = g.constant(stack_rows(std::iter::once(obs), self.config.obs_dim));
            self.critic_q(&p, x, g.constant(Tensor::scalar(action).reshaped(&[1, 1]).unwrap())).item()
        };
        (q(&self.critics[0].params), q(&self.critics[1].params))
    }

    /// Soft targets for a batch, using a fresh next action from the current actor.
    pub fn targets<R: Rng + ?Sized>(&self, batch: &[&Transition], rng: &mut R) -> Vec<f64> {
        let g = Graph::new();
        let pa = Bound::frozen(&g, &self.actor);
        let next = g.constant(stack_rows(batch.iter().map(|t| t.next_obs.as_slice()), self.config.obs_dim));
        let noise = Self::noise(batch.len(), rng);
        let (a_next, logp_next) = self.sample_in_graph(&g, &pa, next, &noise);
        let t1 = Bound::frozen(&g, &self.critics[0].target);
        let t2 = Bound::frozen(&g, &self.critics[1].target);
        let q1 = self.critic_q(&t1, next, a_next).value();
        let q2 = self.critic_q(&t2, next, a_next).value();
        let logp = logp_next.value();
        let alpha = self.alpha();
        batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let min_q = q1.data()[i].min(q2.data()[i]);
                soft_target(t.reward, t.done, min_q, alpha, logp.data()[i], self.config.gamma)
            })
            .collect()
    }

    /// One gradient step on each critic toward shared targets. Returns both losses.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> (f64, f64) {
        let y = column(self.targets(batch, rng).into_iter());
        let obs = stack_rows(batch.iter().map(|t| t.obs.as_slice()), self.config.obs_dim);
        let act = column(batch.iter().map(|t| t.action));
        let mut losses = [0.0; 2];
        for (i, loss_out) in losses.iter_mut().enumerate() {
            let grads = {
                let g = Graph::new();
                let p = Bound::trainable(&g, &self.critics[i].params);
                let q = self.critic_q(&p, g.constant(obs.clone()), g.constant(act.clone()));
                let loss = half_mse(q, g.constant(y.clone()));
                *loss_out = loss.item();
                p.grads(&g.backward(loss))
            };
            let c = &mut self.critics[i];
            c.opt.step(&mut c.params, &grads);
        }
        (losses[0], losses[1])
    }

    /// One actor step against an arbitrary differentiable critic. Returns
    /// the loss and the mean log-probability of the sampled actions.
    pub fn actor_step_with<R, F>(&mut self, obs: &Tensor, rng: &mut R, critic: F) -> (f64, f64)
    where
        R: Rng + ?Sized,
        F: for<'g> Fn(&'g Graph, Var<'g>, Var<'g>) -> Var<'g>,
    {
        let alpha = self.alpha();
        let noise = Self::noise(obs.rows(), rng);
        let (loss_v, mean_logp, grads) = {
            let g = Graph::new();
            let p = Bound::trainable(&g, &self.actor);
            let x = g.constant(obs.clone());
            let (a, logp) = self.sample_in_graph(&g, &p, x, &noise);
            let q = critic(&g, x, a);
            let loss = (logp.scale(alpha) - q).mean();
            let mean_logp = logp.value().data().iter().sum::<f64>() / obs.rows() as f64;
            (loss.item(), mean_logp, p.grads(&g.backward(loss)))
        };
        self.actor_opt.step(&mut self.actor, &grads);
        (loss_v, mean_logp)
    }

    /// Actor loss and gradients for both the actor and the (frozen) critics.
    pub fn actor_gradients(
        &self,
        batch: &[&Transition],
        noise: &[f64],
    ) -> (f64, crate::nn::ParamGrads, [crate::nn::ParamGrads; 2]) {
        let alpha = self.alpha();
        let g = Graph::new();
        let p = Bound::trainable(&g, &self.actor);
        let c1 = Bound::frozen(&g, &self.critics[0].params);
        let c2 = Bound::frozen(&g, &self.critics[1].params);
        let x = g.constant(stack_rows(batch.iter().map(|t| t.obs.as_slice()), self.config.obs_dim));
        let (a, logp) = self.sample_in_graph(&g, &p, x, noise);
        let q = self.critic_q(&c1, x, a).minimum(self.critic_q(&c2, x, a));
        let loss = (logp.scale(alpha) - q).mean();
        let grads = g.backward(loss);
        (loss.item(), p.grads(&grads), [c1.grads(&grads), c2.grads(&grads)])
    }

    pub fn actor_update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> (f64, f64) {
        let obs = stack_rows(batch.iter().map(|t| t.obs.as_slice()), self.config.obs_dim);
        let c1 = self.critics[0].params.clone();
        let c2 = self.critics[1].params.clone();
        let net = self.critic_net.clone();
        self.actor_step_with(&obs, rng, move |g, x, a| {
            let p1 = Bound::frozen(g, &c1);
            let p2 = Bound::frozen(g, &c2);
            let q1 = net.forward(&p1, x.concat_cols(a));
            let q2 = net.forward(&p2, x.concat_cols(a));
            q1.minimum(q2)
        })
    }

    /// Temperature step toward the target entropy (only when auto-tuning).
    fn alpha_update(&mut self, mean_logp: f64) {
        if !self.config.auto_alpha {
            return;
        }
        // d/d(log alpha) of -log_alpha * (log pi + target) averaged over the batch
        let grad = -(mean_logp + self.config.target_entropy);
        let grads = crate::nn::ParamGrads { grads: vec![Tensor::scalar(grad)] };
        self.alpha_opt.step(&mut self.log_alpha, &grads);
    }

    pub fn soft_update(&mut self) {
        let tau = self.config.tau;
        for c in &mut self.critics {
            c.target.soft_update_from(&c.params, tau).expect("target layout");
        }
    }

    /// Critic step, actor step, temperature step, target averaging.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> UpdateStats {
        let (c1, c2) = self.critic_update(batch, rng);
        let (actor_loss, mean_logp) = self.actor_update(batch, rng);
        self.alpha_update(mean_logp);
        self.soft_update();
        self.updates += 1;
        UpdateStats { critic1_loss: c1, critic2_loss: c2, actor_loss, alpha: self.alpha(), entropy: -mean_logp }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut all = ParamStore::new();
        let mut put = |prefix: &str, store: &ParamStore| {
            for (n, t) in store.iter() {
                all.add(format!("{prefix}/{n}"), t.clone());
            }
        };
        put("actor", &self.actor);
        put("critic1", &self.critics[0].params);
        put("critic2", &self.critics[1].params);
        put("target1", &self.critics[0].target);
        put("target2", &self.critics[1].target);
        put("temperature", &self.log_alpha);
        let meta = serde_json::json!({ "kind": "sac", "config": self.config, "updates": self.updates });
        Checkpoint::from_store(&all, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        let config: SacConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| NnError::Checkpoint(format!("sac config: {e}")))?;
        let mut sac = Self::new(config, 0);
        let entries = ck
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(&t.shape, t.data.clone())?)))
            .collect::<Result<Vec<_>, NnError>>()?;
        let take = |prefix: &str| -> Vec<(String, Tensor)> {
            let p = format!("{prefix}/");
            entries.iter().filter_map(|(n, t)| n.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone()))).collect()
        };
        sac.actor.load_named(&take("actor"))?;
        sac.critics[0].params.load_named(&take("critic1"))?;
        sac.critics[1].params.load_named(&take("critic2"))?;
        sac.critics[0].target.load_named(&take("target1"))?;
        sac.critics[1].target.load_named(&take("target2"))?;
        sac.log_alpha.load_named(&take("temperature"))?;
        sac.updates = ck.meta["updates"].as_u64().unwrap_or(0);
        Ok(sac)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
