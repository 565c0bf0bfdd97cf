//! Exact solvers: brute-force enumeration for tiny instances and a
//! depth-first branch-and-bound with LP-relaxation bounds.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::greedy::{greedy_u, options_by_gain, users_by_gain};
use crate::lp::{floor_round_pairs, Relaxation, ROUND_TOL};
use crate::model::{Instance, LoadState};
use crate::solution::{Method, Solution};

/// Enumeration refuses instances with more joint choices than this.
pub const MAX_ENUMERATION: f64 = 1e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance has {0:.3e} joint choices, more than the enumeration limit")]
    TooLarge(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchLimits {
    pub time_budget: Option<Duration>,
    pub node_budget: Option<u64>,
    /// Relative optimality gap at which a node is pruned.
    pub gap_tol: f64,
    /// Bound nodes with the LP relaxation; otherwise with the sum of the
    /// remaining users' best gains.
    pub use_lp: bool,
}

impl Default for SearchLimits {
    fn default() -> Self {
        Self {
            time_budget: None,
            node_budget: None,
            gap_tol: 0.0,
            use_lp: true,
        }
    }
}

impl SearchLimits {
    pub fn benchmarking() -> Self {
        Self {
            gap_tol: 1e-6,
            ..Self::default()
        }
    }
}

/// Globally optimal schedule by full enumeration of every user's choice
/// (reject or one option), discarding infeasible partial assignments.
pub fn enumerate_exhaustive(instance: &Instance) -> Result<Solution, OracleError> {
    let size: f64 = instance
        .requests
        .iter()
        .map(|r| (r.options.len() + 1) as f64)
        .product();
    if size > MAX_ENUMERATION {
        return Err(OracleError::TooLarge(size));
    }
    let start = Instant::now();
    let gains = instance.gain_table();
    let mut state = LoadState::new(instance);
    let mut best = (0.0, Vec::new());
    enumerate(instance, &gains, 0, 0.0, &mut state, &mut best);
    Ok(Solution::from_pairs(
        instance,
        &best.1,
        Method::Exhaustive,
        start.elapsed(),
        true,
    ))
}

fn enumerate(
    inst: &Instance,
    gains: &[Vec<f64>],
    r: usize,
    value: f64,
    state: &mut LoadState,
    best: &mut (f64, Vec<(usize, usize)>),
) {
    if r == inst.requests.len() {
        if value > best.0 {
            *best = (value, state.pairs());
        }
        return;
    }
    enumerate(inst, gains, r + 1, value, state, best);
    for o in 0..inst.requests[r].options.len() {
        if state.try_assign(inst, r, o).expect("fresh request") {
            enumerate(inst, gains, r + 1, value + gains[r][o], state, best);
            state.unassign(inst, r);
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Decision {
    Free,
    Rejected,
    Pinned,
}

/// `dominated[r][o]` is set when another option of the same request has at
/// least the gain, no higher rate, a subset of the slots, and either shares
/// the station or sits at a station whose occupancy can never bind. Swapping
/// to the dominating option keeps any schedule feasible, so dropping the
/// dominated one is exact.
pub(crate) fn dominated_options(instance: &Instance, gains: &[Vec<f64>]) -> Vec<Vec<bool>> {
    let t_len = instance.num_slots();
    let stations = instance.station_table();
    let mut demand = vec![0u32; instance.stations.len() * t_len];
    for (r, req) in instance.requests.iter().enumerate() {
        for (o, opt) in req.options.iter().enumerate() {
            for &t in &opt.slots {
                demand[stations[r][o] * t_len + t] += 1;
            }
        }
    }
    let loose: Vec<bool> = instance
        .stations
        .iter()
        .enumerate()
        .map(|(si, s)| demand[si * t_len..(si + 1) * t_len].iter().all(|&d| d <= s.num_evse))
        .collect();
    instance
        .requests
        .iter()
        .enumerate()
        .map(|(r, req)| {
            (0..req.options.len())
                .map(|o| {
                    (0..req.options.len()).any(|p| {
                        if p == o {
                            return false;
                        }
                        let (sp, so) = (stations[r][p], stations[r][o]);
                        let rate_p = instance.stations[sp].rate_kw;
                        let rate_o = instance.stations[so].rate_kw;
                        let subset = req.options[p]
                            .slots
                            .iter()
                            .all(|t| req.options[o].slots.contains(t));
                        let covers = gains[r][p] >= gains[r][o]
                            && rate_p <= rate_o
                            && subset
                            && (sp == so || loose[sp]);
                        let identical = gains[r][p] == gains[r][o]
                            && rate_p == rate_o
                            && req.options[p].slots.len() == req.options[o].slots.len();
                        covers && (!identical || p < o)
                    })
                })
                .collect()
        })
        .collect()
}

struct Search<'a> {
    inst: &'a Instance,
    gains: Vec<Vec<f64>>,
    order: Vec<usize>,
    options: Vec<Vec<usize>>,
    allowed: Vec<Vec<bool>>,
    state: LoadState,
    decided: Vec<Decision>,
    incumbent: Vec<(usize, usize)>,
    incumbent_value: f64,
    limits: SearchLimits,
    start: Instant,
    nodes: u64,
    exhausted: bool,
    /// Best remaining gain from `order[pos..]`, for the gain-sum bound.
    suffix_bound: Vec<f64>,
}

impl<'a> Search<'a> {
    fn prune_tol(&self) -> f64 {
        let scale = self.incumbent_value.abs().max(1.0);
        (self.limits.gap_tol * self.incumbent_value.abs()).max(1e-10 * scale)
    }

    fn out_of_budget(&mut self) -> bool {
        if self.exhausted {
            return true;
        }
        self.nodes += 1;
        let over_nodes = self.limits.node_budget.is_some_and(|b| self.nodes > b);
        let over_time = self.nodes % 64 == 0
            && self
                .limits
                .time_budget
                .is_some_and(|b| self.start.elapsed() > b);
        self.exhausted = over_nodes || over_time;
        self.exhausted
    }

    fn offer(&mut self, pairs: &[(usize, usize)]) {
        let value: f64 = pairs.iter().map(|&(r, o)| self.gains[r][o]).sum();
        if value > self.incumbent_value + 1e-12 * self.incumbent_value.abs().max(1.0) {
            self.incumbent_value = value;
            self.incumbent = pairs.to_vec();
        }
    }

    fn lp_node(&mut self) {
        if self.out_of_budget() {
            return;
        }
        let fixed = self.state.pairs();
        let decided = &self.decided;
        let allowed = &self.allowed;
        let Ok(relax) = Relaxation::build(self.inst, &self.gains, &fixed, |r, o| {
            decided[r] == Decision::Free && allowed[r][o]
        }) else {
            return;
        };
        let Ok((frac, sol)) = relax.solve(self.inst) else {
            return;
        };
        if frac.objective <= self.incumbent_value + self.prune_tol() {
            return;
        }

        // Rounded LP point completed greedily gives a cheap incumbent.
        let rounded = floor_round_pairs(self.inst, &frac);
        let mut fill = LoadState::from_pairs(self.inst, &rounded);
        for &r in &self.order {
            if self.decided[r] != Decision::Free || fill.is_assigned(r) {
                continue;
            }
            for &o in &self.options[r] {
                if fill.try_assign(self.inst, r, o).unwrap_or(false) {
                    break;
                }
            }
        }
        self.offer(&fill.pairs());
        if frac.objective <= self.incumbent_value + self.prune_tol() {
            return;
        }
        let removed = self.reduced_cost_fixing(&relax, &sol.duals);

        let branch = self.order.iter().copied().find(|&r| {
            self.decided[r] == Decision::Free
                && frac.values[r]
                    .iter()
                    .any(|&v| v > ROUND_TOL && v < 1.0 - ROUND_TOL)
        });
        let Some(r) = branch else {
            // Integral relaxation: its rounding is optimal for this subtree.
            self.restore(&removed);
            return;
        };
        for k in 0..self.options[r].len() {
            let o = self.options[r][k];
            if self.allowed[r][o] && self.state.try_assign(self.inst, r, o).unwrap_or(false) {
                self.decided[r] = Decision::Pinned;
                self.lp_node();
                self.state.unassign(self.inst, r);
            }
            if self.exhausted {
                break;
            }
        }
        self.decided[r] = Decision::Rejected;
        if !self.exhausted {
            self.lp_node();
        }
        self.decided[r] = Decision::Free;
        self.restore(&removed);
    }

    /// Removes options that cannot appear in any solution better than the
    /// incumbent within this subtree, judged by the dual bound
    /// `c·x ≤ b·y + Σ max(0, d_j) + Σ_{d_j<0} d_j·x_j` with reduced costs `d`.
    /// A column with `d_j < 0` is dropped when taking it already falls below
    /// the incumbent; one with `d_j > 0` is required when leaving it out
    /// does, so the user's other options are dropped.
    fn reduced_cost_fixing(&mut self, relax: &Relaxation, duals: &[f64]) -> Vec<(usize, usize)> {
        let lp = &relax.lp;
        let y: Vec<f64> = duals.iter().map(|v| v.max(0.0)).collect();
        let bound = lp.dual_bound(&y) + relax.fixed_gain;
        let floor = self.incumbent_value + self.prune_tol();
        let mut removed = Vec::new();
        for (j, &(r, o)) in relax.columns.iter().enumerate() {
            let ay: f64 = lp.rows.iter().zip(&y).map(|(row, v)| row[j] * v).sum();
            let reduced = lp.cost[j] - ay;
            if reduced < 0.0 && bound + reduced <= floor {
                if self.allowed[r][o] {
                    self.allowed[r][o] = false;
                    removed.push((r, o));
                }
            } else if reduced > 0.0 && bound - reduced <= floor {
                for p in 0..self.allowed[r].len() {
                    if p != o && self.allowed[r][p] {
                        self.allowed[r][p] = false;
                        removed.push((r, p));
                    }
                }
            }
        }
        removed
    }

    fn restore(&mut self, removed: &[(usize, usize)]) {
        for &(r, o) in removed {
            self.allowed[r][o] = true;
        }
    }

    fn sum_node(&mut self, pos: usize, value: f64) {
        if self.out_of_budget() {
            return;
        }
        if value > self.incumbent_value {
            let pairs = self.state.pairs();
            self.offer(&pairs);
        }
        if pos == self.order.len()
            || value + self.suffix_bound[pos] <= self.incumbent_value + self.prune_tol()
        {
            return;
        }
        let r = self.order[pos];
        for k in 0..self.options[r].len() {
            let o = self.options[r][k];
            if self.state.try_assign(self.inst, r, o).unwrap_or(false) {
                let g = self.gains[r][o];
                self.sum_node(pos + 1, value + g);
                self.state.unassign(self.inst, r);
            }
            if self.exhausted {
                return;
            }
        }
        self.sum_node(pos + 1, value);
    }
}

/// Branch-and-bound over per-user option choices. Users are branched in
/// order of descending best gain and options by descending gain, then
/// station id; rejection is explored last. The result is flagged optimal
/// when the tree was fully explored within the budgets.
pub fn solve_exact(instance: &Instance, limits: &SearchLimits) -> Solution {
    solve_exact_with_order(instance, limits, None)
}

/// As [`solve_exact`] with an explicit user branching order (a permutation
/// of request indices).
pub fn solve_exact_with_order(
    instance: &Instance,
    limits: &SearchLimits,
    order: Option<Vec<usize>>,
) -> Solution {
    let start = Instant::now();
    let gains = instance.gain_table();
    let order = order.unwrap_or_else(|| users_by_gain(instance, &gains));
    let allowed: Vec<Vec<bool>> = dominated_options(instance, &gains)
        .into_iter()
        .enumerate()
        .map(|(r, dom)| {
            dom.into_iter()
                .enumerate()
                .map(|(o, d)| !d && gains[r][o] > 0.0)
                .collect()
        })
        .collect();
    let options: Vec<Vec<usize>> = (0..instance.requests.len())
        .map(|r| {
            options_by_gain(instance, &gains, r)
                .into_iter()
                .filter(|&o| allowed[r][o])
                .collect()
        })
        .collect();
    let mut suffix_bound = vec![0.0; order.len() + 1];
    for pos in (0..order.len()).rev() {
        let r = order[pos];
        let best = options[r].iter().map(|&o| gains[r][o]).fold(0.0, f64::max);
        suffix_bound[pos] = suffix_bound[pos + 1] + best;
    }

    let seed = greedy_u(instance);
    let seed_pairs = seed.schedule.to_pairs(instance).expect("greedy pairs are valid");
    let mut search = Search {
        inst: instance,
        state: LoadState::new(instance),
        decided: vec![Decision::Free; instance.requests.len()],
        incumbent_value: seed_pairs.iter().map(|&(r, o)| gains[r][o]).sum(),
        incumbent: seed_pairs,
        gains,
        order,
        options,
        allowed,
        limits: *limits,
        start,
        nodes: 0,
        exhausted: false,
        suffix_bound,
    };
    if limits.use_lp {
        search.lp_node();
    } else {
        search.sum_node(0, 0.0);
    }
    let mut pairs = search.incumbent;
    pairs.sort_unstable();
    Solution::from_pairs(
        instance,
        &pairs,
        Method::Exact,
        start.elapsed(),
        !search.exhausted,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::greedy::tests::witness;
    use crate::model::check_feasibility;
    use crate::model::tests::{push_user, tiny_instance};

    #[test]
    fn zero_requests() {
        let inst = tiny_instance(&[(1.0, 1)], 10.0, 2);
        assert_eq!(enumerate_exhaustive(&inst).unwrap().objective, 0.0);
        assert_eq!(solve_exact(&inst, &SearchLimits::default()).objective, 0.0);
    }

    #[test]
    fn single_feasible_option() {
        let mut inst = tiny_instance(&[(1.0, 1)], 10.0, 2);
        push_user(&mut inst, 4.0, 1.0, &[(0, &[1])]);
        let sol = enumerate_exhaustive(&inst).unwrap();
        assert_eq!(sol.schedule.station_of(0), Some(0));
    }

    #[test]
    fn capacity_for_two_of_three() {
        let mut inst = tiny_instance(&[(10.0, 5)], 20.0, 1);
        push_user(&mut inst, 5.0, 10.0, &[(0, &[0])]);
        push_user(&mut inst, 4.0, 10.0, &[(0, &[0])]);
        push_user(&mut inst, 3.0, 10.0, &[(0, &[0])]);
        let sol = enumerate_exhaustive(&inst).unwrap();
        assert_eq!(sol.objective, 9.0);
        assert_eq!(sol.schedule.station_of(2), None);
        for use_lp in [true, false] {
            let ex = solve_exact(&inst, &SearchLimits { use_lp, ..Default::default() });
            assert_eq!(ex.objective, 9.0);
            assert!(ex.optimal);
        }
    }

    #[test]
    fn witness_optimum_is_seventeen() {
        let inst = witness();
        assert_eq!(enumerate_exhaustive(&inst).unwrap().objective, 17.0);
        assert_eq!(solve_exact(&inst, &SearchLimits::default()).objective, 17.0);
    }

    #[test]
    fn no_evse_means_nothing() {
        let mut inst = tiny_instance(&[(1.0, 0), (2.0, 0)], 100.0, 3);
        push_user(&mut inst, 4.0, 1.0, &[(0, &[1])]);
        push_user(&mut inst, 4.0, 2.0, &[(1, &[0])]);
        let sol = solve_exact(&inst, &SearchLimits::default());
        assert_eq!(sol.objective, 0.0);
        assert!(check_feasibility(&inst, &sol.schedule).feasible);
    }

    #[test]
    fn too_large_for_enumeration() {
        let mut inst = tiny_instance(&[(1.0, 100), (1.0, 100), (1.0, 100)], 1e6, 1);
        for _ in 0..12 {
            push_user(&mut inst, 1.0, 1.0, &[(0, &[0]), (1, &[0]), (2, &[0])]);
        }
        assert!(matches!(enumerate_exhaustive(&inst), Err(OracleError::TooLarge(_))));
    }

    #[test]
    fn dominance_only_when_exact() {
        let mut inst = tiny_instance(&[(5.0, 10), (10.0, 10)], 100.0, 3);
        // Option at station 0 uses a subset of slots at a lower rate.
        push_user(&mut inst, 9.0, 10.0, &[(0, &[0, 1]), (1, &[0])]);
        let gains = inst.gain_table();
        let dom = dominated_options(&inst, &gains);
        assert_eq!(dom[0], vec![false, false]);
        // Same station pair with identical footprint: only the later copy goes.
        let mut inst = tiny_instance(&[(5.0, 10), (5.0, 10)], 100.0, 3);
        push_user(&mut inst, 9.0, 10.0, &[(0, &[0, 1]), (1, &[0, 1])]);
        let gains = inst.gain_table();
        assert_eq!(dominated_options(&inst, &gains)[0], vec![false, true]);
    }
}
