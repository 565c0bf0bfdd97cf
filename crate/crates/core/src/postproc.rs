//! Schedule extraction from predicted per-cell acceptance counts.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{encode_features_with, CodecError, CodecParams, GroupIndex};
use crate::model::{Instance, LoadState};
use crate::neuro::{Network, NeuroError};
use crate::solution::{Method, Solution};

/// Key ordering candidates inside a cell, highest first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SortKey {
    #[default]
    Gain,
    Utility,
}

impl std::str::FromStr for SortKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gain" => Ok(Self::Gain),
            "utility" => Ok(Self::Utility),
            other => Err(format!("unknown sort key `{other}` (expected gain or utility)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub solution: Solution,
    /// Entries of `y_hat` that were negative or NaN.
    pub clamped: usize,
    pub admitted: Vec<usize>,
}

fn cell_budget(y: f64) -> usize {
    if y.is_nan() || y <= 0.0 {
        0
    } else if y >= usize::MAX as f64 {
        usize::MAX
    } else {
        y.floor() as usize
    }
}

/// Candidate `(request, option)` lists per cell, best first.
pub fn cell_candidates(instance: &Instance, groups: &GroupIndex, num_cells: usize, sort: SortKey) -> Vec<Vec<(usize, usize)>> {
    let gains = instance.gain_table();
    let mut cells = vec![Vec::new(); num_cells];
    for (r, entries) in groups.entries.iter().enumerate() {
        for (o, e) in entries.iter().enumerate() {
            cells[e.cell].push((r, o));
        }
    }
    let key = |r: usize, o: usize| match sort {
        SortKey::Gain => gains[r][o],
        SortKey::Utility => instance.requests[r].utility,
    };
    for cell in &mut cells {
        cell.sort_by(|&(ra, oa), &(rb, ob)| match key(rb, ob).total_cmp(&key(ra, oa)) {
            Ordering::Equal => instance.requests[ra].user_id.cmp(&instance.requests[rb].user_id),
            o => o,
        });
    }
    cells
}

/// Floors `y_hat`, then sweeps cells in index order admitting the best
/// candidates that still fit until each cell's budget is spent. A user
/// admitted in one cell is skipped everywhere else.
pub fn extract_solution(
    instance: &Instance,
    y_hat: &[f64],
    params: &CodecParams,
    sort: SortKey,
) -> Result<Extraction, CodecError> {
    let start = Instant::now();
    let groups = GroupIndex::build(instance, params);
    let mut ex = extract_with(instance, y_hat, params, &groups, sort)?;
    ex.solution.wall_time = start.elapsed();
    Ok(ex)
}

fn extract_with(
    instance: &Instance,
    y_hat: &[f64],
    params: &CodecParams,
    groups: &GroupIndex,
    sort: SortKey,
) -> Result<Extraction, CodecError> {
    let spec = params.spec_for(instance);
    if y_hat.len() != spec.label_len() {
        return Err(CodecError::Format(format!(
            "prediction has {} entries, codec expects {}",
            y_hat.len(),
            spec.label_len()
        )));
    }
    let clamped = y_hat.iter().filter(|y| y.is_nan() || **y < 0.0).count();
    let cells = cell_candidates(instance, groups, y_hat.len(), sort);
    let mut state = LoadState::new(instance);
    let mut admitted = vec![0usize; y_hat.len()];
    for (j, cands) in cells.iter().enumerate() {
        let budget = cell_budget(y_hat[j]);
        for &(r, o) in cands {
            if admitted[j] >= budget {
                break;
            }
            if state.is_assigned(r) {
                continue;
            }
            if state.try_assign(instance, r, o).expect("unassigned user") {
                admitted[j] += 1;
            }
        }
    }
    let solution = Solution::from_pairs(instance, &state.pairs(), Method::Dclevernet, Default::default(), false);
    Ok(Extraction {
        solution,
        clamped,
        admitted,
    })
}

/// Encode, predict and extract; the wall time covers all three.
pub fn solve_with_network(
    instance: &Instance,
    net: &Network,
    params: &CodecParams,
    sort: SortKey,
) -> Result<Extraction, NeuroError> {
    let start = Instant::now();
    let spec = params.spec_for(instance);
    if let Some(own) = &net.codec {
        own.ensure_eq(&spec)?;
    }
    let groups = GroupIndex::build(instance, params);
    let features = encode_features_with(instance, params, &groups);
    let y_hat = net.forward(&features)?;
    let mut ex = extract_with(instance, &y_hat, params, &groups, sort)?;
    ex.solution.wall_time = start.elapsed();
    if ex.clamped > 0 {
        log::debug!("{} predictions clamped to zero", ex.clamped);
    }
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_label;
    use crate::greedy::tests::witness;
    use crate::model::check_feasibility;
    use crate::model::tests::{push_user, tiny_instance};
    use crate::oracle::{solve_exact, SearchLimits};

    fn params() -> CodecParams {
        CodecParams::default()
    }

    #[test]
    fn zero_prediction_empty_schedule() {
        let inst = witness();
        let ex = extract_solution(&inst, &vec![0.0; 200], &params(), SortKey::Gain).unwrap();
        assert_eq!(ex.solution.objective, 0.0);
        assert_eq!(ex.solution.schedule.num_accepted(), 0);
    }

    #[test]
    fn optimum_label_reconstructs_optimum() {
        // Greedy fails on this instance; the optimal label names the two
        // 25 kW users' cell and leaves the 50 kW user's cell empty.
        let inst = witness();
        let opt = solve_exact(&inst, &SearchLimits::default());
        let y = encode_label(&inst, &opt.schedule, &params()).unwrap();
        let ex = extract_solution(&inst, &y, &params(), SortKey::Gain).unwrap();
        assert_eq!(ex.solution.objective, 17.0);
        assert_eq!(ex.solution.objective, opt.objective);
    }

    #[test]
    fn infinite_budget_is_cell_ordered_greedy() {
        let inst = witness();
        let ex = extract_solution(&inst, &vec![f64::INFINITY; 200], &params(), SortKey::Gain).unwrap();
        assert!(check_feasibility(&inst, &ex.solution.schedule).feasible);
        // Station 0 cells come first, so the 50 kW user is admitted.
        assert_eq!(ex.solution.objective, 10.0);
    }

    #[test]
    fn negative_and_nan_clamp() {
        let inst = witness();
        let mut y = vec![-3.0; 200];
        y[1] = f64::NAN;
        let ex = extract_solution(&inst, &y, &params(), SortKey::Gain).unwrap();
        assert_eq!(ex.clamped, 200);
        assert_eq!(ex.solution.schedule.num_accepted(), 0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let inst = witness();
        assert!(extract_solution(&inst, &[1.0; 3], &params(), SortKey::Gain).is_err());
    }

    #[test]
    fn user_admitted_once_across_stations() {
        let mut inst = tiny_instance(&[(1.0, 5), (1.0, 5)], 100.0, 2);
        push_user(&mut inst, 4.0, 1.0, &[(0, &[0]), (1, &[1])]);
        let p = CodecParams {
            q: 1,
            l: 1,
            v: 1,
            demand_norm: Default::default(),
        };
        let ex = extract_solution(&inst, &[5.0, 5.0], &p, SortKey::Gain).unwrap();
        assert_eq!(ex.admitted, vec![1, 0]);
        assert_eq!(ex.solution.schedule.station_of(0), Some(0));
    }

    #[test]
    fn utility_sort_differs_from_gain_sort() {
        // Same cell; higher utility but lower gain under a costly slot.
        let mut inst = tiny_instance(&[(1.0, 1)], 100.0, 2);
        inst.cost_profile = vec![0.0, 5.0];
        push_user(&mut inst, 10.0, 1.0, &[(0, &[1])]);
        push_user(&mut inst, 9.0, 1.0, &[(0, &[0])]);
        let p = CodecParams {
            q: 1,
            l: 1,
            v: 1,
            demand_norm: Default::default(),
        };
        let by_gain = extract_solution(&inst, &[1.0], &p, SortKey::Gain).unwrap();
        let by_util = extract_solution(&inst, &[1.0], &p, SortKey::Utility).unwrap();
        assert_eq!(by_gain.solution.schedule.station_of(1), Some(0));
        assert_eq!(by_util.solution.schedule.station_of(0), Some(0));
    }
}
