//! First-come-first-served reservation baseline over a few seeds.

use riskguard::eval::{average, compute_metrics, evaluate_fcfs};
use riskguard::sim::SimConfig;

fn main() {
    let sim = SimConfig::default();
    let reports: Vec<_> = [1001, 1002, 1003]
        .iter()
        .map(|&seed| compute_metrics(&evaluate_fcfs(&sim, seed, 1000).expect("evaluation")))
        .collect();
    for r in &reports {
        println!("seed {}: AWT {:.3} s, AQL {:.3}, CR {:?}, throughput {}", r.seed, r.awt, r.aql, r.cr, r.throughput);
    }
    let m = average(&reports).expect("non-empty");
    println!("mean: AWT {:.3} s, AQL {:.3}", m.awt, m.aql);
}
