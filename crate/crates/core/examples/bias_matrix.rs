//! The recency bias added to attention scores, and how it reweights a row
//! of otherwise uniform scores.

use riskguard::risk::build_bias;

fn main() {
    let n = 10;
    for beta in [0.0, 0.2, 0.5] {
        let b = build_bias(n, beta);
        let row: Vec<String> = (0..n).map(|j| format!("{:+.1}", b.at2(0, j) + 0.0)).collect();
        let z: f64 = (0..n).map(|j| b.at2(0, j).exp()).sum();
        let newest = b.at2(0, n - 1).exp() / z;
        let oldest = b.at2(0, 0).exp() / z;
        println!("beta {beta}: [{}]  weight newest {newest:.3}, oldest {oldest:.3}", row.join(" "));
    }
}
