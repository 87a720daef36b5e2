use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::risk::StateActionSequence;

/// Random full-length sequences labeled 1 exactly when the newest action is
/// positive. Everything else is noise, so the signal sits at the last position.
/// Labels are split `n/2 : n - n/2` (ones first) before shuffling.
pub fn synthetic_sequence_task(seed: u64, n: usize, seq_len: usize, state_dim: usize) -> Vec<StateActionSequence> {
    assert!(n >= 1 && seq_len >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            let states: Vec<Vec<f64>> =
                (0..seq_len).map(|_| (0..state_dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let mut actions: Vec<f64> = (0..seq_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: f64 = rng.random_range(0.0..1.0);
            actions[seq_len - 1] = if label == 1 { 1.0 - m } else { -m };
            StateActionSequence::from_pairs(states.iter().map(|s| s.as_slice()).zip(actions), seq_len, state_dim)
                .expect("well-formed synthetic sequence")
                .with_label(label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_balance_and_rule() {
        let seqs = synthetic_sequence_task(0, 200, 10, 6);
        assert_eq!(seqs.iter().filter(|s| s.label == Some(1)).count(), 100);
        for s in &seqs {
            assert_eq!(s.label == Some(1), s.last_action() > 0.0);
            assert_eq!(s.valid_length, 10);
        }
        assert_eq!(synthetic_sequence_task(0, 200, 10, 6), seqs);
    }

    #[test]
    fn last_action_logistic_regression_is_perfect() {
        // one-feature logistic regression through the origin, fitted by gradient descent
        let seqs = synthetic_sequence_task(1, 1000, 10, 4);
        let mut w = 0.0;
        for _ in 0..500 {
            let mut gw = 0.0;
            for s in &seqs {
                let x = s.last_action();
                let p = 1.0 / (1.0 + (-(w * x)).exp());
                let y = f64::from(s.label.unwrap());
                gw += (p - y) * x;
            }
            w -= 5.0 * gw / seqs.len() as f64;
        }
        let correct = seqs.iter().filter(|s| (w * s.last_action() > 0.0) == (s.label == Some(1))).count();
        assert_eq!(correct, seqs.len());
    }
}
