//! LP relaxation of the reservation problem, floor rounding, and the
//! random-guess PTAS* heuristic built on them.

pub mod simplex;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, LoadState, StationId, UserId};
use crate::seed;
use crate::solution::{Method, Solution};
use simplex::{DenseLp, SimplexError};

/// Values at or above `1 - ROUND_TOL` round to one.
pub const ROUND_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("fixed assignments violate the constraints")]
    Infeasible,
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Fractional assignment `x[request][option] ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionalSolution {
    pub values: Vec<Vec<f64>>,
    pub objective: f64,
}

impl FractionalSolution {
    /// Values keyed by `(user, station)`; zero entries are omitted.
    pub fn to_map(&self, instance: &Instance) -> BTreeMap<(UserId, StationId), f64> {
        let mut out = BTreeMap::new();
        for (r, vals) in self.values.iter().enumerate() {
            let req = &instance.requests[r];
            for (o, &v) in vals.iter().enumerate() {
                if v != 0.0 {
                    out.insert((req.user_id, req.options[o].station), v);
                }
            }
        }
        out
    }

    pub fn is_integral(&self) -> bool {
        self.values
            .iter()
            .flatten()
            .all(|&v| v <= ROUND_TOL || v >= 1.0 - ROUND_TOL)
    }
}

/// A reduced LP over the free variables of a partially fixed instance.
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub lp: DenseLp,
    /// `(request, option)` of every LP column.
    pub columns: Vec<(usize, usize)>,
    pub fixed: Vec<(usize, usize)>,
    pub fixed_gain: f64,
}

impl Relaxation {
    /// Builds the relaxation with `fixed` options pinned to one and only the
    /// `allowed` options of the remaining requests as variables.
    ///
    /// Rows that cannot bind (their coefficients sum to at most the
    /// right-hand side) are dropped, which does not change the optimum since
    /// every column is bounded by one.
    pub fn build(
        instance: &Instance,
        gains: &[Vec<f64>],
        fixed: &[(usize, usize)],
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Result<Self, LpError> {
        let t_len = instance.num_slots();
        let n_st = instance.stations.len();
        let stations = instance.station_table();

        let mut pinned = vec![false; instance.requests.len()];
        let mut cap_rhs: Vec<f64> = instance
            .base_load_kw
            .iter()
            .map(|d| instance.capacity_kw - d)
            .collect();
        let mut occ_rhs: Vec<f64> = instance
            .stations
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.num_evse as f64, t_len))
            .collect();
        let mut fixed_gain = 0.0;
        for &(r, o) in fixed {
            if pinned[r] {
                return Err(LpError::Infeasible);
            }
            pinned[r] = true;
            let si = stations[r][o];
            let rate = instance.stations[si].rate_kw;
            for &t in &instance.requests[r].options[o].slots {
                cap_rhs[t] -= rate;
                occ_rhs[si * t_len + t] -= 1.0;
            }
            fixed_gain += gains[r][o];
        }
        let tol = crate::model::CAPACITY_TOL * instance.capacity_kw.max(1.0);
        if cap_rhs.iter().any(|&v| v < -tol) || occ_rhs.iter().any(|&v| v < -0.5) {
            return Err(LpError::Infeasible);
        }

        let mut columns = Vec::new();
        for (r, req) in instance.requests.iter().enumerate() {
            if pinned[r] {
                continue;
            }
            for o in 0..req.options.len() {
                if allowed(r, o) && gains[r][o] > 0.0 {
                    columns.push((r, o));
                }
            }
        }
        let n = columns.len();
        let mut lp = DenseLp::new(
            columns.iter().map(|&(r, o)| gains[r][o]).collect(),
            vec![1.0; n],
        );

        let mut cap_rows = vec![vec![0.0; n]; t_len];
        let mut occ_rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut user_cols: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (j, &(r, o)) in columns.iter().enumerate() {
            let si = stations[r][o];
            let rate = instance.stations[si].rate_kw;
            for &t in &instance.requests[r].options[o].slots {
                cap_rows[t][j] = rate;
                occ_rows
                    .entry(si * t_len + t)
                    .or_insert_with(|| vec![0.0; n])[j] = 1.0;
            }
            user_cols.entry(r).or_default().push(j);
        }
        for (t, row) in cap_rows.into_iter().enumerate() {
            let rhs = cap_rhs[t].max(0.0);
            if row.iter().sum::<f64>() > rhs {
                lp.add_row(row, rhs);
            }
        }
        for (_, cols) in user_cols {
            if cols.len() > 1 {
                let mut row = vec![0.0; n];
                for j in cols {
                    row[j] = 1.0;
                }
                lp.add_row(row, 1.0);
            }
        }
        debug_assert!(occ_rhs.len() == n_st * t_len);
        for (key, row) in occ_rows {
            let rhs = occ_rhs[key].max(0.0).round();
            if row.iter().sum::<f64>() > rhs {
                lp.add_row(row, rhs);
            }
        }
        Ok(Self {
            lp,
            columns,
            fixed: fixed.to_vec(),
            fixed_gain,
        })
    }

    pub fn solve(&self, instance: &Instance) -> Result<(FractionalSolution, simplex::LpSolution), LpError> {
        let sol = simplex::solve(&self.lp)?;
        let mut values: Vec<Vec<f64>> = instance
            .requests
            .iter()
            .map(|r| vec![0.0; r.options.len()])
            .collect();
        for &(r, o) in &self.fixed {
            values[r][o] = 1.0;
        }
        for (j, &(r, o)) in self.columns.iter().enumerate() {
            values[r][o] = sol.x[j];
        }
        let frac = FractionalSolution {
            values,
            objective: self.fixed_gain + sol.objective,
        };
        Ok((frac, sol))
    }
}

/// Maximises total gain over the relaxation with `fixed` options pinned at
/// one and only `allowed` options of other requests available.
pub fn solve_lp_relaxation(
    instance: &Instance,
    fixed: &[(usize, usize)],
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<FractionalSolution, LpError> {
    let gains = instance.gain_table();
    let relax = Relaxation::build(instance, &gains, fixed, allowed)?;
    Ok(relax.solve(instance)?.0)
}

/// Largest violation of the relaxed constraints (kW for capacity rows,
/// assignments for single-station and occupancy rows).
pub fn max_violation(instance: &Instance, values: &[Vec<f64>]) -> f64 {
    let t_len = instance.num_slots();
    let stations = instance.station_table();
    let mut load = instance.base_load_kw.clone();
    let mut occ = vec![0.0; instance.stations.len() * t_len];
    let mut worst = 0.0f64;
    for (r, vals) in values.iter().enumerate() {
        worst = worst.max(vals.iter().sum::<f64>() - 1.0);
        for (o, &v) in vals.iter().enumerate() {
            worst = worst.max(-v).max(v - 1.0);
            let si = stations[r][o];
            for &t in &instance.requests[r].options[o].slots {
                load[t] += instance.stations[si].rate_kw * v;
                occ[si * t_len + t] += v;
            }
        }
    }
    for l in load {
        worst = worst.max(l - instance.capacity_kw);
    }
    for (si, s) in instance.stations.iter().enumerate() {
        for t in 0..t_len {
            worst = worst.max(occ[si * t_len + t] - s.num_evse as f64);
        }
    }
    worst
}

/// Keeps exactly the variables at (numerically) one. A request with several
/// such options keeps its highest-gain one. Assignments are admitted through
/// the incremental checker, so values inside the rounding tolerance can never
/// produce an infeasible schedule.
pub fn floor_round_pairs(instance: &Instance, fractional: &FractionalSolution) -> Vec<(usize, usize)> {
    let mut chosen = Vec::new();
    for (r, vals) in fractional.values.iter().enumerate() {
        let best = vals
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 1.0 - ROUND_TOL)
            .map(|(o, _)| (o, instance.option_gain(r, o)))
            .max_by(|a, b| {
                a.1.total_cmp(&b.1).then_with(|| {
                    let sa = instance.requests[r].options[a.0].station;
                    let sb = instance.requests[r].options[b.0].station;
                    sb.cmp(&sa)
                })
            });
        if let Some((o, _)) = best {
            chosen.push((r, o));
        }
    }
    let mut state = LoadState::new(instance);
    chosen.retain(|&(r, o)| state.try_assign(instance, r, o).unwrap_or(false));
    chosen
}

pub fn floor_round(instance: &Instance, fractional: &FractionalSolution) -> crate::model::Schedule {
    crate::model::Schedule::from_pairs(instance, &floor_round_pairs(instance, fractional))
}

/// Floor-rounded LP relaxation with nothing fixed.
pub fn lp_rounding(instance: &Instance) -> Result<Solution, LpError> {
    let start = Instant::now();
    let frac = solve_lp_relaxation(instance, &[], |_, _| true)?;
    let pairs = floor_round_pairs(instance, &frac);
    Ok(Solution::from_pairs(
        instance,
        &pairs,
        Method::LpRounding,
        start.elapsed(),
        false,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtasParams {
    pub num_guesses: usize,
    pub max_guess_size: usize,
    pub seed: u64,
}

impl Default for PtasParams {
    fn default() -> Self {
        Self {
            num_guesses: 250,
            max_guess_size: 3,
            seed: 0,
        }
    }
}

/// A feasible set of pinned options and the smallest gain among them.
#[derive(Debug, Clone, PartialEq)]
pub struct Guess {
    pub fixed: Vec<(usize, usize)>,
    pub min_gain: f64,
}

impl Guess {
    pub fn empty() -> Self {
        Self {
            fixed: Vec::new(),
            min_gain: f64::NEG_INFINITY,
        }
    }
}

/// Guess `index` of the PTAS* run; index 0 is always the empty guess.
pub fn sample_guess(instance: &Instance, gains: &[Vec<f64>], params: &PtasParams, index: usize) -> Guess {
    if index == 0 || instance.requests.is_empty() {
        return Guess::empty();
    }
    let mut rng = seed::derived_rng(params.seed, seed::stream::PTAS, index as u64);
    let eligible: Vec<usize> = (0..instance.requests.len())
        .filter(|&r| !instance.requests[r].options.is_empty())
        .collect();
    let size = rng.random_range(0..=params.max_guess_size).min(eligible.len());
    let picks = index::sample(&mut rng, eligible.len(), size);
    let mut state = LoadState::new(instance);
    let mut fixed = Vec::with_capacity(size);
    for p in picks.iter() {
        let r = eligible[p];
        let o = rng.random_range(0..instance.requests[r].options.len());
        if state.try_assign(instance, r, o).unwrap_or(false) {
            fixed.push((r, o));
        }
    }
    fixed.sort_unstable();
    let min_gain = fixed
        .iter()
        .map(|&(r, o)| gains[r][o])
        .fold(f64::INFINITY, f64::min);
    if fixed.is_empty() {
        Guess::empty()
    } else {
        Guess { fixed, min_gain }
    }
}

fn evaluate_guess(instance: &Instance, gains: &[Vec<f64>], guess: &Guess) -> Option<Vec<(usize, usize)>> {
    let relax = Relaxation::build(instance, gains, &guess.fixed, |r, o| gains[r][o] >= guess.min_gain).ok()?;
    let (frac, _) = relax.solve(instance).ok()?;
    Some(floor_round_pairs(instance, &frac))
}

/// PTAS*: for each of `num_guesses` random guesses (the empty guess first),
/// pin the guess, keep only options at least as valuable as the guess's
/// cheapest member, solve the relaxation and floor-round it. Returns the best
/// rounded schedule.
pub fn ptas_star(instance: &Instance, params: &PtasParams) -> Solution {
    let start = Instant::now();
    let gains = instance.gain_table();
    let n = params.num_guesses.max(1);
    let results: Vec<(usize, f64, Vec<(usize, usize)>)> = (0..n)
        .into_par_iter()
        .filter_map(|g| {
            let guess = sample_guess(instance, &gains, params, g);
            let pairs = evaluate_guess(instance, &gains, &guess)?;
            let obj = crate::model::pairs_objective(instance, &{
                let mut p = pairs.clone();
                p.sort_unstable();
                p
            });
            Some((g, obj, pairs))
        })
        .collect();
    let best = results
        .into_iter()
        .fold(None::<(usize, f64, Vec<(usize, usize)>)>, |acc, cur| match acc {
            Some(a) if a.1 >= cur.1 => Some(a),
            _ => Some(cur),
        })
        .map(|(_, _, p)| p)
        .unwrap_or_default();
    Solution::from_pairs(instance, &best, Method::PtasStar, start.elapsed(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{push_user, tiny_instance};
    use crate::model::check_feasibility;

    #[test]
    fn non_binding_relaxation_takes_everything() {
        let mut inst = tiny_instance(&[(1.0, 10), (2.0, 10)], 100.0, 4);
        push_user(&mut inst, 5.0, 2.0, &[(0, &[0, 1]), (1, &[2])]);
        push_user(&mut inst, 3.0, 1.0, &[(0, &[3])]);
        let frac = solve_lp_relaxation(&inst, &[], |_, _| true).unwrap();
        assert!((frac.objective - 8.0).abs() < 1e-12);
        assert!(frac.is_integral());
        let s = floor_round(&inst, &frac);
        assert_eq!(s.num_accepted(), 2);
    }

    #[test]
    fn one_knapsack_row_gives_one_and_a_half() {
        let mut inst = tiny_instance(&[(1.0, 10)], 1.5, 1);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[0])]);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[0])]);
        let frac = solve_lp_relaxation(&inst, &[], |_, _| true).unwrap();
        assert!((frac.objective - 3.0).abs() < 1e-12);
        assert!(max_violation(&inst, &frac.values) < 1e-9);
    }

    #[test]
    fn infeasible_pins_reported() {
        let mut inst = tiny_instance(&[(1.0, 1)], 100.0, 1);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[0])]);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[0])]);
        assert_eq!(
            solve_lp_relaxation(&inst, &[(0, 0), (1, 0)], |_, _| true),
            Err(LpError::Infeasible)
        );
    }

    #[test]
    fn floor_round_fixed_point_and_floor() {
        let mut inst = tiny_instance(&[(1.0, 10), (1.0, 10)], 100.0, 2);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[0]), (1, &[1])]);
        push_user(&mut inst, 2.0, 1.0, &[(0, &[1])]);
        let integral = FractionalSolution {
            values: vec![vec![0.0, 1.0], vec![1.0]],
            objective: 4.0,
        };
        let s = floor_round(&inst, &integral);
        assert_eq!(s.station_of(0), Some(1));
        assert_eq!(s.station_of(1), Some(0));
        let split = FractionalSolution {
            values: vec![vec![0.6, 0.4], vec![0.0]],
            objective: 2.0,
        };
        assert_eq!(floor_round(&inst, &split).num_accepted(), 0);
    }

    #[test]
    fn pinned_guess_respected() {
        let mut inst = tiny_instance(&[(1.0, 1)], 100.0, 1);
        push_user(&mut inst, 5.0, 1.0, &[(0, &[0])]);
        push_user(&mut inst, 1.0, 1.0, &[(0, &[0])]);
        let frac = solve_lp_relaxation(&inst, &[(1, 0)], |_, _| true).unwrap();
        assert_eq!(frac.values[1][0], 1.0);
        assert_eq!(frac.values[0][0], 0.0);
        assert!((frac.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ptas_single_empty_guess_is_optimal_when_slack() {
        let mut inst = tiny_instance(&[(1.0, 10)], 100.0, 3);
        for k in 0..5 {
            push_user(&mut inst, 1.0 + k as f64, 1.0, &[(0, &[k % 3])]);
        }
        let sol = ptas_star(
            &inst,
            &PtasParams {
                num_guesses: 1,
                ..PtasParams::default()
            },
        );
        assert!((sol.objective - 15.0).abs() < 1e-12);
        assert!(check_feasibility(&inst, &sol.schedule).feasible);
    }
}
