//! Trains a small risk predictor on a task whose label is the sign of the
//! newest action, with and without the recency bias.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskguard::eval::synthetic_sequence_task;
use riskguard::risk::{RiskConfig, RiskModel, StateActionSequence};

fn main() {
    let data = synthetic_sequence_task(0, 4000, 10, 16);
    let (train, held) = data.split_at(3000);
    let held: Vec<&StateActionSequence> = held.iter().collect();
    for beta in [0.2, 0.0] {
        let cfg = RiskConfig {
            state_dim: 16,
            dim: 32,
            ff_dim: 64,
            head_hidden: vec![32, 16],
            beta,
            lr: 1e-3,
            batch_size: 64,
            ..RiskConfig::default()
        };
        let mut model = RiskModel::new(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for step in 1..=300 {
            let batch: Vec<&StateActionSequence> = train.choose_multiple(&mut rng, 64).collect();
            model.train_step(&batch).expect("train step");
            if step % 100 == 0 {
                let (loss, acc) = model.evaluate(&held).expect("evaluate");
                println!("beta {beta} step {step}: held-out loss {loss:.4}, accuracy {:.1}%", 100.0 * acc);
            }
        }
    }
}
