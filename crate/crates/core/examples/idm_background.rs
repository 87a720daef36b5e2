//! Uncontrolled traffic: every vehicle follows the car-following law and
//! yields at the stop line. Prints flow totals for a few demand levels.

use std::collections::BTreeMap;

use riskguard::sim::{SimConfig, World};

fn main() {
    for scale in [0.5, 1.0, 2.0] {
        let mut cfg = SimConfig::default();
        for d in cfg.demand.iter_mut() {
            *d *= scale;
        }
        let mut world = World::new(cfg, 7).expect("valid config");
        world.set_control_enabled(false);
        let mut queued = 0usize;
        let steps = 2000;
        for _ in 0..steps {
            world.advance(&BTreeMap::new());
            queued += world.queue().iter().sum::<usize>();
        }
        let t = world.totals();
        println!(
            "demand x{scale}: spawned {}, arrived {}, collisions {}, mean queue {:.2}, hash {:016x}",
            t.spawned,
            t.arrived,
            t.collisions,
            queued as f64 / steps as f64,
            world.state_hash()
        );
    }
}
