//! Discrete-time microscopic simulator of one four-way unsignalized
//! intersection.
//!
//! Vehicles move along fixed routes: a 60 m approach lane ending at the stop
//! line followed by an interior path. Positions `s` are measured along the
//! route from the spawn point. Uncontrolled vehicles follow IDM and yield at
//! the stop line unless they hold an entry grant; controlled vehicles take
//! external acceleration commands.

pub mod geometry;
pub mod idm;
mod world;

pub use geometry::{Approach, ConflictPoint, IntersectionGeometry, Maneuver, MovementId, NUM_MOVEMENTS};
pub use idm::IdmParams;
pub use world::{
    Arrival, Collision, StepReport, Totals, TrajectoryRecord, TrajectoryWriter, Vehicle, VehicleId, World, Zone,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-positive gap {0} to leader (vehicles overlap)")]
    NonPositiveGap(f64),
    #[error("unknown vehicle {0}")]
    UnknownVehicle(u64),
    #[error("invalid simulator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub v_max: f64,
    pub control_zone: f64,
    pub approach_length: f64,
    pub lane_width: f64,
    pub blocks_per_path: usize,
    pub vehicle_length: f64,
    pub collision_radius: f64,
    pub v_wait: f64,
    pub spawn_speed: f64,
    pub stall_speed: f64,
    /// Remove interior vehicles slower than `stall_speed` and report them as collisions.
    pub stall_rule: bool,
    /// Arrival rate per movement in vehicles per second, in movement index order.
    pub demand: [f64; NUM_MOVEMENTS],
    /// Uncontrolled vehicles ask for an entry grant within this distance of the stop line.
    pub yield_request_distance: f64,
    /// Where yielding vehicles come to rest, measured back from the stop line.
    pub stop_margin: f64,
    pub controlled_accel: f64,
    pub idm: IdmParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.5,
            v_max: 10.0,
            control_zone: 30.0,
            approach_length: 60.0,
            lane_width: 3.5,
            blocks_per_path: 10,
            vehicle_length: 5.0,
            collision_radius: 2.0,
            v_wait: 0.3,
            spawn_speed: 8.0,
            stall_speed: 0.1,
            stall_rule: false,
            demand: [0.04; NUM_MOVEMENTS],
            yield_request_distance: 30.0,
            stop_margin: 1.0,
            controlled_accel: 3.0,
            idm: IdmParams::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.approach_length < self.control_zone {
            return bad("approach_length must cover the control zone");
        }
        if self.blocks_per_path == 0 {
            return bad("blocks_per_path must be positive");
        }
        if self.demand.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return bad("demand rates must be finite and non-negative");
        }
        if self.spawn_speed > self.v_max {
            return bad("spawn_speed exceeds v_max");
        }
        Ok(())
    }

    /// Minimum front-to-front distance to the last vehicle for a spawn.
    pub fn spawn_headway(&self) -> f64 {
        self.vehicle_length + self.idm.s0
    }

    pub fn geometry(&self) -> IntersectionGeometry {
        IntersectionGeometry::new(self.control_zone, self.approach_length, self.lane_width, self.blocks_per_path)
    }
}
