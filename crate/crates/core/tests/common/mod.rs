#![allow(dead_code)]

use evcrp::gen::{GenParams, StationSpec, UtilityMode};
use evcrp::model::{ChargingOption, CostMode, Horizon, Instance, Request, Station};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RATES: [f64; 4] = [1.5, 7.0, 22.0, 50.0];

/// Small hand-rolled instance whose capacity and occupancy rows bind often.
pub fn random_instance(seed: u64, max_users: usize, max_stations: usize, max_slots: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.random_range(0..=max_users);
    build(&mut rng, n_users, max_stations, max_slots)
}

/// Like [`random_instance`] with exactly `n_users` requests.
pub fn random_instance_sized(seed: u64, n_users: usize, max_stations: usize, max_slots: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(&mut rng, n_users, max_stations, max_slots)
}

fn build(rng: &mut ChaCha8Rng, n_users: usize, max_stations: usize, max_slots: usize) -> Instance {
    let t = rng.random_range(2..=max_slots.max(2));
    let slot_hours = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let n_stations = rng.random_range(1..=max_stations.max(1));
    let stations: Vec<Station> = (0..n_stations)
        .map(|i| Station {
            id: i as evcrp::StationId * 3 + 1,
            rate_kw: RATES[rng.random_range(0..RATES.len())],
            num_evse: rng.random_range(1..=4),
        })
        .collect();
    let capacity: f64 = rng.random_range(20.0..150.0);
    let base_load_kw: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..0.4) * capacity).collect();
    let cost_profile: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..0.3)).collect();
    let cost_mode = if rng.random_bool(0.8) { CostMode::PerKwh } else { CostMode::PerSlot };
    let mut inst = Instance {
        horizon: Horizon::new(t, slot_hours),
        capacity_kw: capacity,
        base_load_kw,
        cost_profile,
        stations,
        requests: Vec::new(),
        cost_mode,
    };
    for u in 0..n_users {
        let demand: f64 = rng.random_range(1.0..60.0);
        let mut options = Vec::new();
        let mut cost_max: f64 = 0.0;
        for s in &inst.stations {
            if !rng.random_bool(0.7) {
                continue;
            }
            let need = inst.slots_needed(demand, s.rate_kw);
            if need > t {
                continue;
            }
            let start = rng.random_range(0..=t - need);
            let slots: Vec<usize> = (start..start + need).collect();
            let per_slot = match cost_mode {
                CostMode::PerKwh => inst.slot_energy(s),
                CostMode::PerSlot => 1.0,
            };
            let cost: f64 = slots.iter().map(|&x| inst.cost_profile[x] * per_slot).sum();
            cost_max = cost_max.max(cost);
            options.push(ChargingOption { station: s.id, slots });
        }
        let utility = cost_max + rng.random_range(0.0..30.0);
        inst.requests.push(Request {
            user_id: 100 + 7 * u as evcrp::UserId,
            utility,
            demand_kwh: demand,
            options,
        });
    }
    inst.validate().expect("random instance is valid");
    inst
}

/// The generator family the learned-solver criteria are evaluated on.
pub fn family(num_users: usize, seed: u64) -> GenParams {
    GenParams {
        num_users,
        stations: vec![
            StationSpec { rate_kw: 1.5, num_evse: 200 },
            StationSpec { rate_kw: 7.0, num_evse: 200 },
            StationSpec { rate_kw: 50.0, num_evse: 200 },
        ],
        capacity_kw: 130.0,
        horizon: Horizon::new(24, 1.0),
        load_profile: 1,
        base_load_scale: 0.1,
        utility: UtilityMode::Linear,
        cost_mode: CostMode::PerKwh,
        seed,
    }
}
