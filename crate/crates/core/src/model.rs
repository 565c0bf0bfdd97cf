//! EV charging reservation data model.
//!
//! An [`Instance`] bundles the charging network (stations, capacity, base load,
//! tariff) with the users' reservation requests. A [`Schedule`] assigns each
//! user to at most one of their preferred stations. The free functions in this
//! module evaluate the welfare objective and check the packing constraints:
//!
//! * network capacity: `d(t) + Σ r_c·x ≤ P̄` at every slot,
//! * single station: each user is served by at most one station,
//! * occupancy: at most `N_c` concurrent users at station `c`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type UserId = u64;
pub type StationId = u32;

/// Relative slack used when comparing power sums against the capacity.
pub const CAPACITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("option for station {station} is not owned by user {user}")]
    OptionNotOwned { user: UserId, station: StationId },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {user} has no option at station {station}")]
    UnknownStation { user: UserId, station: StationId },
    #[error("request index {0} is already assigned")]
    AlreadyAssigned(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub num_slots: usize,
    pub slot_hours: f64,
}

impl Horizon {
    pub fn new(num_slots: usize, slot_hours: f64) -> Self {
        Self {
            num_slots,
            slot_hours,
        }
    }

    /// 24 hours in 96 quarter-hour slots.
    pub fn day_quarter_hours() -> Self {
        Self::new(96, 0.25)
    }

    /// Start of `slot` as hour of day, wrapped to `[0, 24)`.
    pub fn hour_of_day(&self, slot: usize) -> f64 {
        (slot as f64 * self.slot_hours).rem_euclid(24.0)
    }
}

impl Default for Horizon {
    fn default() -> Self {
        Self::day_quarter_hours()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: StationId,
    pub rate_kw: f64,
    pub num_evse: u32,
}

/// One way of serving a request: a station and the slots it is reserved for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargingOption {
    pub station: StationId,
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub user_id: UserId,
    pub utility: f64,
    pub demand_kwh: f64,
    pub options: Vec<ChargingOption>,
}

impl Request {
    pub fn option_at(&self, station: StationId) -> Option<usize> {
        self.options.iter().position(|o| o.station == station)
    }
}

/// How the tariff enters the conditional gain.
///
/// `PerKwh` charges `cost(t)` for each kWh delivered in slot `t`. `PerSlot`
/// charges `cost(t)` once per reserved slot regardless of the station rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    #[default]
    PerKwh,
    PerSlot,
}

impl CostMode {
    fn is_default(&self) -> bool {
        *self == CostMode::PerKwh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub horizon: Horizon,
    pub capacity_kw: f64,
    pub base_load_kw: Vec<f64>,
    #[serde(rename = "cost_per_kwh")]
    pub cost_profile: Vec<f64>,
    pub stations: Vec<Station>,
    pub requests: Vec<Request>,
    #[serde(default, skip_serializing_if = "CostMode::is_default")]
    pub cost_mode: CostMode,
}

impl Instance {
    pub fn num_slots(&self) -> usize {
        self.horizon.num_slots
    }

    pub fn station_index(&self, id: StationId) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    pub fn request_index(&self, user: UserId) -> Option<usize> {
        self.requests.iter().position(|r| r.user_id == user)
    }

    /// Energy delivered by one slot at `station`, in kWh.
    pub fn slot_energy(&self, station: &Station) -> f64 {
        station.rate_kw * self.horizon.slot_hours
    }

    /// Number of slots needed to deliver `demand_kwh` at `rate_kw`.
    pub fn slots_needed(&self, demand_kwh: f64, rate_kw: f64) -> usize {
        slots_needed(demand_kwh, rate_kw, self.horizon.slot_hours)
    }

    /// Gain of option `opt` of request `req`, by index. Panics on a dangling
    /// station id; use [`conditional_gain`] for checked access.
    pub fn option_gain(&self, req: usize, opt: usize) -> f64 {
        let request = &self.requests[req];
        let option = &request.options[opt];
        let station = &self.stations[self
            .station_index(option.station)
            .expect("option references a known station")];
        gain_of(self, request, option, station)
    }

    /// Per-request, per-option gains.
    pub fn gain_table(&self) -> Vec<Vec<f64>> {
        (0..self.requests.len())
            .map(|r| {
                (0..self.requests[r].options.len())
                    .map(|o| self.option_gain(r, o))
                    .collect()
            })
            .collect()
    }

    /// Station index of every option, by request.
    pub fn station_table(&self) -> Vec<Vec<usize>> {
        self.requests
            .iter()
            .map(|r| {
                r.options
                    .iter()
                    .map(|o| self.station_index(o.station).expect("known station"))
                    .collect()
            })
            .collect()
    }

    /// Checks every structural invariant of the instance.
    pub fn validate(&self) -> Result<(), ModelError> {
        let t = self.horizon.num_slots;
        let bad = |msg: String| Err(ModelError::Invalid(msg));
        if t == 0 {
            return bad("horizon must have at least one slot".into());
        }
        if !(self.horizon.slot_hours > 0.0 && self.horizon.slot_hours.is_finite()) {
            return bad("slot length must be positive".into());
        }
        if !(self.capacity_kw.is_finite() && self.capacity_kw >= 0.0) {
            return bad("capacity must be finite and non-negative".into());
        }
        if self.base_load_kw.len() != t || self.cost_profile.len() != t {
            return bad(format!(
                "base load ({}) and cost profile ({}) must have {t} entries",
                self.base_load_kw.len(),
                self.cost_profile.len()
            ));
        }
        for (slot, &d) in self.base_load_kw.iter().enumerate() {
            if !(d >= 0.0 && d <= self.capacity_kw) {
                return bad(format!("base load {d} at slot {slot} outside [0, capacity]"));
            }
        }
        if self.cost_profile.iter().any(|c| !c.is_finite()) {
            return bad("cost profile must be finite".into());
        }
        let mut ids: Vec<StationId> = self.stations.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate station id".into());
        }
        for s in &self.stations {
            if !(s.rate_kw > 0.0 && s.rate_kw.is_finite()) {
                return bad(format!("station {} must have a positive rate", s.id));
            }
        }
        let mut users: Vec<UserId> = self.requests.iter().map(|r| r.user_id).collect();
        users.sort_unstable();
        if users.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate user id".into());
        }
        for r in &self.requests {
            if !(r.utility >= 0.0 && r.utility.is_finite()) {
                return bad(format!("user {} has invalid utility", r.user_id));
            }
            if !(r.demand_kwh > 0.0 && r.demand_kwh.is_finite()) {
                return bad(format!("user {} has non-positive demand", r.user_id));
            }
            let mut seen = Vec::with_capacity(r.options.len());
            for o in &r.options {
                if seen.contains(&o.station) {
                    return bad(format!("user {} has two options at station {}", r.user_id, o.station));
                }
                seen.push(o.station);
                let Some(si) = self.station_index(o.station) else {
                    return bad(format!("user {} references unknown station {}", r.user_id, o.station));
                };
                if o.slots.is_empty() || o.slots.iter().any(|&s| s >= t) {
                    return bad(format!("user {} has an empty or out-of-range slot set", r.user_id));
                }
                let mut sorted = o.slots.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != o.slots.len() {
                    return bad(format!("user {} has repeated slots", r.user_id));
                }
                let station = &self.stations[si];
                if o.slots.len() != self.slots_needed(r.demand_kwh, station.rate_kw) {
                    return bad(format!(
                        "user {} option at station {} reserves {} slots, demand needs {}",
                        r.user_id,
                        o.station,
                        o.slots.len(),
                        self.slots_needed(r.demand_kwh, station.rate_kw)
                    ));
                }
                let g = gain_of(self, r, o, station);
                if g < -1e-9 {
                    return bad(format!("user {} has negative gain {g} at station {}", r.user_id, o.station));
                }
            }
        }
        Ok(())
    }
}

/// `ceil(demand / (rate·h))`, tolerant to floating noise in the quotient.
pub fn slots_needed(demand_kwh: f64, rate_kw: f64, slot_hours: f64) -> usize {
    let q = demand_kwh / (rate_kw * slot_hours);
    (q - 1e-9).ceil().max(1.0) as usize
}

fn gain_of(inst: &Instance, request: &Request, option: &ChargingOption, station: &Station) -> f64 {
    let per_slot = match inst.cost_mode {
        CostMode::PerKwh => inst.slot_energy(station),
        CostMode::PerSlot => 1.0,
    };
    let cost: f64 = option.slots.iter().map(|&t| inst.cost_profile[t]).sum();
    request.utility - cost * per_slot
}

/// Gain realised by `request` when served through `option`.
pub fn conditional_gain(
    instance: &Instance,
    request: &Request,
    option: &ChargingOption,
) -> Result<f64, ModelError> {
    if !request.options.iter().any(|o| o == option) {
        return Err(ModelError::OptionNotOwned {
            user: request.user_id,
            station: option.station,
        });
    }
    let station = instance
        .station_index(option.station)
        .map(|i| &instance.stations[i])
        .ok_or(ModelError::UnknownStation {
            user: request.user_id,
            station: option.station,
        })?;
    Ok(gain_of(instance, request, option, station))
}

/// User to station assignment. Absent and `None` entries both mean rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    pub assignment: BTreeMap<UserId, Option<StationId>>,
}

impl Schedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, user: UserId, station: StationId) {
        self.assignment.insert(user, Some(station));
    }

    pub fn station_of(&self, user: UserId) -> Option<StationId> {
        self.assignment.get(&user).copied().flatten()
    }

    /// Accepted `(user, station)` pairs in user order.
    pub fn accepted(&self) -> impl Iterator<Item = (UserId, StationId)> + '_ {
        self.assignment
            .iter()
            .filter_map(|(&u, &s)| s.map(|s| (u, s)))
    }

    pub fn num_accepted(&self) -> usize {
        self.accepted().count()
    }

    /// Builds a schedule from `(request index, option index)` pairs.
    pub fn from_pairs(instance: &Instance, pairs: &[(usize, usize)]) -> Self {
        let mut s = Schedule::new();
        for r in &instance.requests {
            s.assignment.insert(r.user_id, None);
        }
        for &(r, o) in pairs {
            let req = &instance.requests[r];
            s.assign(req.user_id, req.options[o].station);
        }
        s
    }

    /// Resolves the schedule to `(request index, option index)` pairs.
    pub fn to_pairs(&self, instance: &Instance) -> Result<Vec<(usize, usize)>, ModelError> {
        let mut pairs = Vec::with_capacity(self.assignment.len());
        for (user, station) in self.accepted() {
            let r = instance
                .request_index(user)
                .ok_or(ModelError::UnknownUser(user))?;
            let o = instance.requests[r]
                .option_at(station)
                .ok_or(ModelError::UnknownStation { user, station })?;
            pairs.push((r, o));
        }
        Ok(pairs)
    }
}

/// Total conditional gain of the accepted users.
pub fn evaluate_objective(instance: &Instance, schedule: &Schedule) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for (user, station) in schedule.accepted() {
        let r = instance
            .request_index(user)
            .ok_or(ModelError::UnknownUser(user))?;
        let request = &instance.requests[r];
        let o = request
            .option_at(station)
            .ok_or(ModelError::UnknownStation { user, station })?;
        if instance.station_index(station).is_none() {
            return Err(ModelError::UnknownStation { user, station });
        }
        total += instance.option_gain(r, o);
    }
    Ok(total)
}

/// Objective of `(request, option)` pairs, summed in pair order.
pub fn pairs_objective(instance: &Instance, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, o)| instance.option_gain(r, o)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    Capacity,
    SingleStation,
    Occupancy,
    /// Schedule references a user or station that is not part of the request.
    UnknownOption,
}

impl fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintKind::Capacity => "capacity",
            ConstraintKind::SingleStation => "single-station",
            ConstraintKind::Occupancy => "occupancy",
            ConstraintKind::UnknownOption => "unknown-option",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub slot: Option<usize>,
    pub station: Option<StationId>,
    pub user: Option<UserId>,
    /// Amount by which the constraint is exceeded (kW, users or assignments).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            feasible: violations.is_empty(),
            violations,
        }
    }
}

/// Checks a schedule against capacity, single-station and occupancy limits.
/// Malformed entries are reported as violations rather than errors.
pub fn check_feasibility(instance: &Instance, schedule: &Schedule) -> FeasibilityReport {
    let mut violations = Vec::new();
    let mut pairs = Vec::new();
    for (user, station) in schedule.accepted() {
        let found = instance.request_index(user).and_then(|r| {
            instance.requests[r]
                .option_at(station)
                .filter(|_| instance.station_index(station).is_some())
                .map(|o| (r, o))
        });
        match found {
            Some(p) => pairs.push(p),
            None => violations.push(Violation {
                kind: ConstraintKind::UnknownOption,
                slot: None,
                station: Some(station),
                user: Some(user),
                margin: 1.0,
            }),
        }
    }
    let mut report = check_pairs(instance, &pairs);
    violations.append(&mut report.violations);
    FeasibilityReport::from_violations(violations)
}

/// Feasibility of an arbitrary list of `(request index, option index)`
/// decisions; a request listed twice violates the single-station constraint.
pub fn check_pairs(instance: &Instance, pairs: &[(usize, usize)]) -> FeasibilityReport {
    let t_len = instance.num_slots();
    let mut load = vec![0.0; t_len];
    let mut occupancy = vec![0u32; instance.stations.len() * t_len];
    let mut per_user = vec![0u32; instance.requests.len()];
    for &(r, o) in pairs {
        per_user[r] += 1;
        let option = &instance.requests[r].options[o];
        let si = instance
            .station_index(option.station)
            .expect("pairs reference known stations");
        let rate = instance.stations[si].rate_kw;
        for &t in &option.slots {
            load[t] += rate;
            occupancy[si * t_len + t] += 1;
        }
    }
    let mut violations = Vec::new();
    let tol = CAPACITY_TOL * instance.capacity_kw.max(1.0);
    for t in 0..t_len {
        let excess = instance.base_load_kw[t] + load[t] - instance.capacity_kw;
        if excess > tol {
            violations.push(Violation {
                kind: ConstraintKind::Capacity,
                slot: Some(t),
                station: None,
                user: None,
                margin: excess,
            });
        }
    }
    for (r, &n) in per_user.iter().enumerate() {
        if n > 1 {
            violations.push(Violation {
                kind: ConstraintKind::SingleStation,
                slot: None,
                station: None,
                user: Some(instance.requests[r].user_id),
                margin: (n - 1) as f64,
            });
        }
    }
    for (si, station) in instance.stations.iter().enumerate() {
        for t in 0..t_len {
            let occ = occupancy[si * t_len + t];
            if occ > station.num_evse {
                violations.push(Violation {
                    kind: ConstraintKind::Occupancy,
                    slot: Some(t),
                    station: Some(station.id),
                    user: None,
                    margin: (occ - station.num_evse) as f64,
                });
            }
        }
    }
    FeasibilityReport::from_violations(violations)
}

/// Incremental feasibility state: EV load per slot and occupancy per
/// station and slot, plus the option currently chosen for each request.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadState {
    pub ev_load_kw: Vec<f64>,
    /// Flattened `[station index][slot]` occupancy counts.
    pub occupancy: Vec<u32>,
    assigned: Vec<Option<usize>>,
    num_slots: usize,
    station_of: Vec<Vec<usize>>,
    rates: Vec<f64>,
    residual: Vec<f64>,
    limits: Vec<u32>,
    tol: f64,
}

impl LoadState {
    pub fn new(instance: &Instance) -> Self {
        let t = instance.num_slots();
        Self {
            ev_load_kw: vec![0.0; t],
            occupancy: vec![0; instance.stations.len() * t],
            assigned: vec![None; instance.requests.len()],
            num_slots: t,
            station_of: instance.station_table(),
            rates: instance.stations.iter().map(|s| s.rate_kw).collect(),
            residual: instance
                .base_load_kw
                .iter()
                .map(|d| instance.capacity_kw - d)
                .collect(),
            limits: instance.stations.iter().map(|s| s.num_evse).collect(),
            tol: CAPACITY_TOL * instance.capacity_kw.max(1.0),
        }
    }

    /// Rebuilds the state from a list of decisions, without feasibility checks.
    pub fn from_pairs(instance: &Instance, pairs: &[(usize, usize)]) -> Self {
        let mut s = Self::new(instance);
        for &(r, o) in pairs {
            s.apply(instance, r, o);
        }
        s
    }

    pub fn occupancy_at(&self, station_idx: usize, slot: usize) -> u32 {
        self.occupancy[station_idx * self.num_slots + slot]
    }

    pub fn assigned_option(&self, req: usize) -> Option<usize> {
        self.assigned[req]
    }

    pub fn is_assigned(&self, req: usize) -> bool {
        self.assigned[req].is_some()
    }

    /// Accepted `(request, option)` pairs in request order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.assigned
            .iter()
            .enumerate()
            .filter_map(|(r, o)| o.map(|o| (r, o)))
            .collect()
    }

    pub fn to_schedule(&self, instance: &Instance) -> Schedule {
        Schedule::from_pairs(instance, &self.pairs())
    }

    /// Whether option `opt` of `req` fits on top of the current load.
    pub fn fits(&self, instance: &Instance, req: usize, opt: usize) -> bool {
        let si = self.station_of[req][opt];
        let rate = self.rates[si];
        let limit = self.limits[si];
        let base = si * self.num_slots;
        instance.requests[req].options[opt].slots.iter().all(|&t| {
            self.ev_load_kw[t] + rate <= self.residual[t] + self.tol
                && self.occupancy[base + t] < limit
        })
    }

    /// Accepts the option when it keeps capacity and occupancy satisfied at
    /// every one of its slots. A rejected option leaves the state untouched.
    pub fn try_assign(
        &mut self,
        instance: &Instance,
        req: usize,
        opt: usize,
    ) -> Result<bool, ModelError> {
        if self.assigned[req].is_some() {
            return Err(ModelError::AlreadyAssigned(req));
        }
        if !self.fits(instance, req, opt) {
            return Ok(false);
        }
        self.apply(instance, req, opt);
        Ok(true)
    }

    fn apply(&mut self, instance: &Instance, req: usize, opt: usize) {
        let si = self.station_of[req][opt];
        let rate = self.rates[si];
        let base = si * self.num_slots;
        for &t in &instance.requests[req].options[opt].slots {
            self.ev_load_kw[t] += rate;
            self.occupancy[base + t] += 1;
        }
        self.assigned[req] = Some(opt);
    }

    /// Reverses a previous assignment of `req`. No-op when unassigned.
    pub fn unassign(&mut self, instance: &Instance, req: usize) {
        let Some(opt) = self.assigned[req].take() else {
            return;
        };
        let si = self.station_of[req][opt];
        let rate = self.rates[si];
        let base = si * self.num_slots;
        for &t in &instance.requests[req].options[opt].slots {
            self.ev_load_kw[t] -= rate;
            self.occupancy[base + t] -= 1;
        }
    }
}
