use serde::{Deserialize, Serialize};

use super::SimError;

/// Intelligent Driver Model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub a_max: f64,
    /// Comfortable deceleration (positive).
    pub b: f64,
    pub headway: f64,
    pub s0: f64,
    pub delta: f64,
    pub v0: f64,
    /// Hard lower clamp on the returned acceleration (negative).
    pub decel_limit: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { a_max: 3.0, b: 3.0, headway: 1.5, s0: 10.0, delta: 4.0, v0: 10.0, decel_limit: -5.0 }
    }
}

impl IdmParams {
    /// Desired gap `s0 + v T + v dv / (2 sqrt(a b))`, `dv = v - v_lead`.
    pub fn desired_gap(&self, v: f64, v_lead: f64) -> f64 {
        self.s0 + v * self.headway + v * (v - v_lead) / (2.0 * (self.a_max * self.b).sqrt())
    }

    /// IDM acceleration clamped to `[decel_limit, a_max]`. `leader` is
    /// `(leader speed, bumper-to-bumper gap)`; a non-positive gap is an error.
    pub fn acceleration(&self, v: f64, leader: Option<(f64, f64)>) -> Result<f64, SimError> {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        let interaction = match leader {
            None => 0.0,
            Some((v_lead, gap)) => {
                if gap <= 0.0 {
                    return Err(SimError::NonPositiveGap(gap));
                }
                (self.desired_gap(v, v_lead) / gap).powi(2)
            }
        };
        Ok((self.a_max * (free - interaction)).clamp(self.decel_limit, self.a_max))
    }
}
