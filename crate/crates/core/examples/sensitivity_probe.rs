//! Probes a trained predictor: the newest action of each window is swept
//! over a grid while the history stays fixed.
//!
//! Usage: `sensitivity_probe <risk.json> <windows.jsonl>`, for example the
//! files written by `riskguard train`.

use std::path::PathBuf;

use riskguard::commands::read_scenarios;
use riskguard::risk::RiskModel;

fn main() {
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let (Some(model), Some(windows)) = (args.next(), args.next()) else {
        eprintln!("usage: sensitivity_probe <risk.json> <windows.jsonl>");
        std::process::exit(2);
    };
    let model = RiskModel::load(&model).expect("risk checkpoint");
    let c = model.config();
    let seqs = read_scenarios(&windows, c.seq_len, c.row_dim()).expect("windows");
    let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
    for (i, s) in seqs.iter().enumerate() {
        let row: Vec<String> =
            model.sensitivity_probe(s, &grid).expect("probe").iter().map(|(a, r)| format!("{a:+.1}:{r:.3}")).collect();
        println!("window {i}: {}", row.join("  "));
    }
}
