//! GreedyU: admit users in descending order of conditional gain.

use std::cmp::Ordering;
use std::time::Instant;

use crate::model::{Instance, LoadState};
use crate::solution::{Method, Solution};

/// Options of request `r` ordered by descending gain, then station id.
pub(crate) fn options_by_gain(instance: &Instance, gains: &[Vec<f64>], r: usize) -> Vec<usize> {
    let opts = &instance.requests[r].options;
    let mut order: Vec<usize> = (0..opts.len()).collect();
    order.sort_by(|&a, &b| {
        gains[r][b]
            .total_cmp(&gains[r][a])
            .then(opts[a].station.cmp(&opts[b].station))
    });
    order
}

pub(crate) fn max_gain(gains: &[f64]) -> f64 {
    gains.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Requests sorted by descending best-option gain, ties by user id.
pub(crate) fn users_by_gain(instance: &Instance, gains: &[Vec<f64>]) -> Vec<usize> {
    let best: Vec<f64> = gains.iter().map(|g| max_gain(g)).collect();
    let mut order: Vec<usize> = (0..instance.requests.len()).collect();
    order.sort_by(|&a, &b| match best[b].total_cmp(&best[a]) {
        Ordering::Equal => instance.requests[a]
            .user_id
            .cmp(&instance.requests[b].user_id),
        o => o,
    });
    order
}

pub fn greedy_u(instance: &Instance) -> Solution {
    let start = Instant::now();
    let gains = instance.gain_table();
    let mut state = LoadState::new(instance);
    for r in users_by_gain(instance, &gains) {
        for o in options_by_gain(instance, &gains, r) {
            if state.try_assign(instance, r, o).expect("each user visited once") {
                break;
            }
        }
    }
    Solution::from_pairs(instance, &state.pairs(), Method::GreedyU, start.elapsed(), false)
}
