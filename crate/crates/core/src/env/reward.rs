use serde::{Deserialize, Serialize};

use crate::sim::NUM_MOVEMENTS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub eff: f64,
    pub risk: f64,
    pub safe: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { eff: 1.0, risk: 3.0, safe: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_eff: f64,
    pub r_safe: f64,
    /// Negated predicted risk, so it acts as a penalty.
    pub r_risk_term: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Same breakdown with the risk term replaced.
    pub fn with_risk(&self, risk: f64, weights: &RewardWeights) -> Self {
        total_reward(self.r_eff, self.r_safe, risk, weights)
    }
}

/// Rank of each direction by accumulated waiting time: 8 for the longest
/// wait, 1 for the shortest. Equal waits rank lower for the lower index.
pub fn direction_ranks(waiting: &[f64; NUM_MOVEMENTS]) -> [usize; NUM_MOVEMENTS] {
    let mut order: Vec<usize> = (0..NUM_MOVEMENTS).collect();
    order.sort_by(|&a, &b| waiting[a].total_cmp(&waiting[b]).then(a.cmp(&b)));
    let mut ranks = [0; NUM_MOVEMENTS];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// `(rank - mean rank) * acc / acc_max`; the mean of a full ranking is 4.5.
pub fn efficiency_reward(rank: usize, acc: f64, accel_max: f64) -> f64 {
    let mean = (NUM_MOVEMENTS as f64 + 1.0) / 2.0;
    (rank as f64 - mean) * (acc / accel_max)
}

pub fn safety_reward(in_conflict: bool, acc: f64, accel_max: f64) -> f64 {
    if in_conflict {
        -acc / accel_max
    } else {
        acc / accel_max
    }
}

pub fn total_reward(r_eff: f64, r_safe: f64, risk: f64, w: &RewardWeights) -> RewardBreakdown {
    let r_risk_term = -risk;
    RewardBreakdown { r_eff, r_safe, r_risk_term, total: w.eff * r_eff + w.risk * r_risk_term + w.safe * r_safe }
}
