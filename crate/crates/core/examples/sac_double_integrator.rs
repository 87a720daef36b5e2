//! Soft actor-critic on a one-dimensional double integrator, compared with
//! a random policy and a hand-tuned PD controller.

use riskguard::eval::toy::{mean_return, random_mean_return, scripted_policy, train_sac_toy, ToyTraining};

fn main() {
    let cfg = ToyTraining { episodes: 120, ..ToyTraining::default() };
    let sac = train_sac_toy(0, &cfg);
    let trained = mean_return(100, 20, |o| sac.deterministic_action(o));
    let random = random_mean_return(100, 20);
    let scripted = mean_return(100, 20, scripted_policy);
    println!("random {random:.3}, trained {trained:.3}, PD {scripted:.3}");
    println!("gap closed: {:.2}", (trained - random) / (scripted - random));
}
