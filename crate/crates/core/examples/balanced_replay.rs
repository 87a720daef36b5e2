//! Outcome-labelled sequences go to separate buffers; batches draw half
//! from each regardless of how rare collisions are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskguard::replay::OutcomeBuffers;
use riskguard::risk::StateActionSequence;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bufs = OutcomeBuffers::new(1000);
    for _ in 0..2000 {
        let state = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let seq = StateActionSequence::from_pairs([(&state[..], rng.random_range(-1.0..1.0))], 4, 2).expect("shape");
        let label = u8::from(rng.random_bool(0.05));
        bufs.push(seq.with_label(label)).expect("labelled");
    }
    println!("risk buffer {}, safe buffer {} (capacity 1000 each)", bufs.risk.len(), bufs.safe.len());
    let batch = bufs.balanced_sample(32, &mut rng).expect("both buffers have data");
    let ones = batch.iter().filter(|s| s.label == Some(1)).count();
    println!("batch of {}: {ones} collisions, {} arrivals", batch.len(), batch.len() - ones);
}
