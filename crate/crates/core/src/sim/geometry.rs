//! Four-way intersection layout: movement paths, conflict points, blocks.
//!
//! Coordinates put the intersection centre at the origin with right-hand
//! traffic. Every approach has one incoming lane per maneuver (the left-turn
//! lane innermost) and the interior box spans `[-H, H]^2` with
//! `H = 2 * lane_width`. Straight paths are segments across the box; left
//! turns are quarter circles centred on the box corner to the driver's left.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Origin of a movement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Approach {
    E,
    W,
    N,
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Maneuver {
    /// Go left.
    GL,
    /// Go straight.
    GS,
}

/// An (approach, maneuver) pair; also identifies the dedicated approach lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MovementId {
    pub approach: Approach,
    pub maneuver: Maneuver,
}

pub const NUM_MOVEMENTS: usize = 8;

impl MovementId {
    /// All movements in index order: E-GL, E-GS, W-GL, W-GS, N-GL, N-GS, S-GL, S-GS.
    pub const ALL: [MovementId; NUM_MOVEMENTS] = {
        use Approach::*;
        use Maneuver::*;
        [
            MovementId { approach: E, maneuver: GL },
            MovementId { approach: E, maneuver: GS },
            MovementId { approach: W, maneuver: GL },
            MovementId { approach: W, maneuver: GS },
            MovementId { approach: N, maneuver: GL },
            MovementId { approach: N, maneuver: GS },
            MovementId { approach: S, maneuver: GL },
            MovementId { approach: S, maneuver: GS },
        ]
    };

    pub const fn new(approach: Approach, maneuver: Maneuver) -> Self {
        Self { approach, maneuver }
    }

    pub fn index(self) -> usize {
        let a = match self.approach {
            Approach::E => 0,
            Approach::W => 1,
            Approach::N => 2,
            Approach::S => 3,
        };
        let m = match self.maneuver {
            Maneuver::GL => 0,
            Maneuver::GS => 1,
        };
        2 * a + m
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Counterclockwise rotation applied to the east-approach template.
    fn rotation(self) -> f64 {
        match self.approach {
            Approach::E => 0.0,
            Approach::N => FRAC_PI_2,
            Approach::W => PI,
            Approach::S => 3.0 * FRAC_PI_2,
        }
    }
}

impl fmt::Display for MovementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}-{:?}", self.approach, self.maneuver)
    }
}

/// A conflict point shared by two movement paths, as interior arc positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConflictPoint {
    pub pos_a: f64,
    pub pos_b: f64,
}

#[derive(Clone, Debug)]
pub struct IntersectionGeometry {
    pub control_zone_length: f64,
    /// Route distance from spawn to the stop line (same for every movement).
    pub approach_length: f64,
    pub lane_width: f64,
    pub blocks_per_path: usize,
    paths: Vec<Vec<(f64, f64)>>,
    interior_length: [f64; NUM_MOVEMENTS],
    /// `conflicts[a][b]` lists points with `pos_a` on path `a`.
    conflicts: Vec<Vec<Vec<ConflictPoint>>>,
}

const ARC_SEGMENTS: usize = 180;

impl IntersectionGeometry {
    pub fn new(control_zone_length: f64, approach_length: f64, lane_width: f64, blocks_per_path: usize) -> Self {
        assert!(approach_length >= control_zone_length, "approach shorter than control zone");
        let paths: Vec<Vec<(f64, f64)>> = MovementId::ALL.iter().map(|&m| interior_path(m, lane_width)).collect();
        let mut interior_length = [0.0; NUM_MOVEMENTS];
        for (i, p) in paths.iter().enumerate() {
            interior_length[i] = polyline_length(p);
        }
        let mut conflicts = vec![vec![Vec::new(); NUM_MOVEMENTS]; NUM_MOVEMENTS];
        for a in 0..NUM_MOVEMENTS {
            for b in (a + 1)..NUM_MOVEMENTS {
                if MovementId::ALL[a].approach == MovementId::ALL[b].approach {
                    continue;
                }
                let pts = polyline_intersections(&paths[a], &paths[b]);
                conflicts[b][a] = pts.iter().map(|&(pa, pb)| ConflictPoint { pos_a: pb, pos_b: pa }).collect();
                conflicts[a][b] = pts.into_iter().map(|(pa, pb)| ConflictPoint { pos_a: pa, pos_b: pb }).collect();
            }
        }
        Self { control_zone_length, approach_length, lane_width, blocks_per_path, paths, interior_length, conflicts }
    }

    pub fn stop_line(&self) -> f64 {
        self.approach_length
    }

    pub fn interior_length(&self, m: MovementId) -> f64 {
        self.interior_length[m.index()]
    }

    /// Route position at which a vehicle leaves the simulation.
    pub fn route_end(&self, m: MovementId) -> f64 {
        self.approach_length + self.interior_length(m)
    }

    /// Route position where the control zone begins.
    pub fn control_zone_start(&self) -> f64 {
        self.approach_length - self.control_zone_length
    }

    pub fn conflicts(&self, a: MovementId, b: MovementId) -> &[ConflictPoint] {
        &self.conflicts[a.index()][b.index()]
    }

    pub fn movements_conflict(&self, a: MovementId, b: MovementId) -> bool {
        !self.conflicts(a, b).is_empty()
    }

    /// Interior polyline in world coordinates.
    pub fn path(&self, m: MovementId) -> &[(f64, f64)] {
        &self.paths[m.index()]
    }

    /// Interior block containing an interior position (front-bumper rule:
    /// a position on a boundary belongs to the block that starts there).
    pub fn block_of(&self, m: MovementId, interior_pos: f64) -> Option<usize> {
        let len = self.interior_length(m);
        if !(0.0..len).contains(&interior_pos) {
            return None;
        }
        let nb = self.blocks_per_path;
        let mut b = ((interior_pos * nb as f64 / len).floor() as usize).min(nb - 1);
        // settle rounding against the same boundary expression used by block_start
        while b + 1 < nb && interior_pos >= self.block_start(m, b + 1) {
            b += 1;
        }
        while b > 0 && interior_pos < self.block_start(m, b) {
            b -= 1;
        }
        Some(b)
    }

    /// Interior position where block `k` begins.
    pub fn block_start(&self, m: MovementId, k: usize) -> f64 {
        k as f64 * self.interior_length(m) / self.blocks_per_path as f64
    }

    pub fn block_length(&self, m: MovementId) -> f64 {
        self.interior_length(m) / self.blocks_per_path as f64
    }
}

fn rotate((x, y): (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Path for the east approach (travelling west), rotated into place.
fn interior_path(m: MovementId, w: f64) -> Vec<(f64, f64)> {
    let h = 2.0 * w;
    let template: Vec<(f64, f64)> = match m.maneuver {
        Maneuver::GS => vec![(h, 1.5 * w), (-h, 1.5 * w)],
        Maneuver::GL => {
            let (cx, cy) = (h, -h);
            let r = h + 0.5 * w;
            (0..=ARC_SEGMENTS)
                .map(|i| {
                    let th = FRAC_PI_2 + FRAC_PI_2 * i as f64 / ARC_SEGMENTS as f64;
                    (cx + r * th.cos(), cy + r * th.sin())
                })
                .collect()
        }
    };
    let angle = m.rotation();
    template.into_iter().map(|p| rotate(p, angle)).collect()
}

fn polyline_length(p: &[(f64, f64)]) -> f64 {
    p.windows(2).map(|w| dist(w[0], w[1])).sum()
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Crossing points of two polylines as (arc position on a, arc position on b).
fn polyline_intersections(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut sa = 0.0;
    for wa in a.windows(2) {
        let la = dist(wa[0], wa[1]);
        let mut sb = 0.0;
        for wb in b.windows(2) {
            let lb = dist(wb[0], wb[1]);
            if let Some((ta, tb)) = segment_intersection(wa[0], wa[1], wb[0], wb[1]) {
                let pa = sa + ta * la;
                let pb = sb + tb * lb;
                // segment endpoints can report the same crossing twice
                if !out.iter().any(|&(x, y)| (x - pa).abs() < 0.5 && (y - pb).abs() < 0.5) {
                    out.push((pa, pb));
                }
            }
            sb += lb;
        }
        sa += la;
    }
    out
}

fn segment_intersection(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> Option<(f64, f64)> {
    let r = (p2.0 - p1.0, p2.1 - p1.1);
    let s = (q2.0 - q1.0, q2.1 - q1.1);
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-12 {
        return None;
    }
    let qp = (q1.0 - p1.0, q1.1 - p1.1);
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    ((0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)).then_some((t, u))
}
