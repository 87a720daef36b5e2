use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sim::{MovementId, VehicleId, World, NUM_MOVEMENTS};

/// First-come-first-served right-of-way at the stop line. Every controlled
/// vehicle is stamped when it enters the control zone; contenders near the
/// line are served in stamp order, a tie going to a seeded random draw.
#[derive(Clone, Debug)]
pub struct FcfsState {
    arrivals: BTreeMap<VehicleId, (f64, u64)>,
    granted: BTreeSet<VehicleId>,
    holder: Option<VehicleId>,
    contender_distance: f64,
    rng: ChaCha8Rng,
}

impl FcfsState {
    pub fn new(seed: u64) -> Self {
        Self::with_contender_distance(seed, 5.0)
    }

    pub fn with_contender_distance(seed: u64, contender_distance: f64) -> Self {
        Self {
            arrivals: BTreeMap::new(),
            granted: BTreeSet::new(),
            holder: None,
            contender_distance,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn arrival(&self, id: VehicleId) -> Option<f64> {
        self.arrivals.get(&id).map(|a| a.0)
    }

    /// Vehicles currently holding right-of-way and not yet clear of the interior.
    pub fn granted(&self) -> impl Iterator<Item = VehicleId> + '_ {
        self.granted.iter().copied()
    }

    /// The most recent vehicle given right-of-way.
    pub fn holder(&self) -> Option<VehicleId> {
        self.holder
    }

    fn clear_of_interior(world: &World, id: VehicleId) -> bool {
        match world.vehicle(id) {
            None => true,
            Some(v) => world.interior_pos(v) - v.length > world.geometry().interior_length(v.movement),
        }
    }

    /// Commands for every controlled vehicle: IDM free-road driving for
    /// right-of-way holders, IDM braking to the stop line for everyone else.
    pub fn decide(&mut self, world: &World) -> BTreeMap<VehicleId, f64> {
        let now = world.time();
        self.arrivals.retain(|id, _| world.vehicle(*id).is_some_and(|v| v.controlled));
        self.granted.retain(|&id| !Self::clear_of_interior(world, id));
        for v in world.vehicles().iter().filter(|v| v.controlled) {
            if !self.arrivals.contains_key(&v.id) {
                let key = self.rng.random();
                self.arrivals.insert(v.id, (v.zone_entry_time.unwrap_or(now), key));
            }
            // already across the line without a grant: nothing left to decide
            if world.distance_to_stop(v) < 0.0 && !Self::clear_of_interior(world, v.id) {
                self.granted.insert(v.id);
            }
        }

        let geo = world.geometry();
        let mut busy = [false; NUM_MOVEMENTS];
        for &id in &self.granted {
            busy[world.vehicle(id).expect("granted vehicle").movement.index()] = true;
        }
        for v in world.vehicles() {
            if world.interior_pos(v) >= 0.0 && !Self::clear_of_interior(world, v.id) {
                busy[v.movement.index()] = true;
            }
        }

        let mut contenders: Vec<(f64, u64, VehicleId, MovementId)> = world
            .vehicles()
            .iter()
            .filter(|v| v.controlled && !self.granted.contains(&v.id))
            .filter(|v| (0.0..=self.contender_distance).contains(&world.distance_to_stop(v)))
            .map(|v| {
                let (t, k) = self.arrivals[&v.id];
                (t, k, v.id, v.movement)
            })
            .collect();
        contenders.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut waiting: Vec<MovementId> = Vec::new();
        for (_, _, id, m) in contenders {
            let blocked = MovementId::ALL.iter().any(|&o| busy[o.index()] && geo.movements_conflict(m, o))
                || waiting.iter().any(|&o| geo.movements_conflict(m, o));
            if blocked {
                waiting.push(m);
            } else {
                self.granted.insert(id);
                self.holder = Some(id);
                busy[m.index()] = true;
            }
        }

        let brake = -world.config().controlled_accel;
        world
            .vehicles()
            .iter()
            .filter(|v| v.controlled)
            .map(|v| {
                let go = self.granted.contains(&v.id);
                (v.id, world.idm_command(v.id, !go).unwrap_or(brake))
            })
            .collect()
    }
}
