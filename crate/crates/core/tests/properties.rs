mod common;

use common::random_instance;
use evcrp::codec::{band, encode_features, CodecParams, DemandNorm};
use evcrp::greedy::greedy_u;
use evcrp::lp::{floor_round, lp_rounding, ptas_star, solve_lp_relaxation, FractionalSolution, PtasParams};
use evcrp::model::{check_pairs, pairs_objective, Instance, LoadState};
use evcrp::postproc::{extract_solution, SortKey};
use evcrp::{check_feasibility, evaluate_objective, Schedule};
use proptest::prelude::*;

fn codec(norm: DemandNorm) -> CodecParams {
    CodecParams {
        q: 3,
        l: 4,
        v: 3,
        demand_norm: norm,
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

/// Random maximal schedule built by trying options in a seeded order.
fn random_feasible_pairs(inst: &Instance, seed: u64) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = inst
        .requests
        .iter()
        .enumerate()
        .flat_map(|(r, req)| (0..req.options.len()).map(move |o| (r, o)))
        .collect();
    let mut s = seed | 1;
    for i in (1..order.len()).rev() {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        order.swap(i, (s % (i as u64 + 1)) as usize);
    }
    let mut state = LoadState::new(inst);
    for (r, o) in order {
        if !state.is_assigned(r) {
            state.try_assign(inst, r, o).unwrap();
        }
    }
    state.pairs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heuristics_are_feasible(seed in any::<u64>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let g = greedy_u(&inst);
        prop_assert!(check_feasibility(&inst, &g.schedule).feasible);
        let lp = lp_rounding(&inst).unwrap();
        prop_assert!(check_feasibility(&inst, &lp.schedule).feasible);
        let p = ptas_star(&inst, &PtasParams { num_guesses: 20, seed, ..PtasParams::default() });
        prop_assert!(check_feasibility(&inst, &p.schedule).feasible);
    }

    #[test]
    fn objective_is_sum_of_option_gains(seed in any::<u64>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let pairs = random_feasible_pairs(&inst, seed);
        let schedule = Schedule::from_pairs(&inst, &pairs);
        let direct: f64 = pairs.iter().map(|&(r, o)| inst.option_gain(r, o)).sum();
        let evaluated = evaluate_objective(&inst, &schedule).unwrap();
        prop_assert!((direct - evaluated).abs() <= 1e-9 * direct.abs().max(1.0));
        prop_assert!((pairs_objective(&inst, &pairs) - evaluated).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn feasibility_is_downward_closed(seed in any::<u64>(), drop in any::<prop::sample::Index>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let pairs = random_feasible_pairs(&inst, seed);
        prop_assert!(check_pairs(&inst, &pairs).feasible);
        if !pairs.is_empty() {
            let mut fewer = pairs.clone();
            fewer.remove(drop.index(pairs.len()));
            prop_assert!(check_pairs(&inst, &fewer).feasible);
        }
    }

    #[test]
    fn try_assign_agrees_with_checker(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let pairs = random_feasible_pairs(&inst, seed.rotate_left(17));
        let keep = pairs.len() / 2;
        let base = &pairs[..keep];
        let mut state = LoadState::from_pairs(&inst, base);
        let candidates: Vec<(usize, usize)> = inst
            .requests
            .iter()
            .enumerate()
            .filter(|(r, _)| !state.is_assigned(*r))
            .flat_map(|(r, req)| (0..req.options.len()).map(move |o| (r, o)))
            .collect();
        if !candidates.is_empty() {
            let (r, o) = candidates[pick.index(candidates.len())];
            let mut with = base.to_vec();
            with.push((r, o));
            let expected = check_pairs(&inst, &with).feasible;
            prop_assert_eq!(state.try_assign(&inst, r, o).unwrap(), expected);
        }
    }

    #[test]
    fn features_ignore_request_order(seed in any::<u64>(), rot in 0usize..20) {
        let inst = random_instance(seed, 14, 3, 10);
        let mut shuffled = inst.clone();
        let n = shuffled.requests.len();
        if n > 0 {
            shuffled.requests.rotate_left(rot % n);
            shuffled.requests.reverse();
        }
        for norm in [DemandNorm::Capacity, DemandNorm::GroupMax] {
            assert_close(&encode_features(&inst, &codec(norm)), &encode_features(&shuffled, &codec(norm)), 1e-12);
        }
    }

    #[test]
    fn features_ignore_monetary_scale(seed in any::<u64>(), k in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 8.0])) {
        let inst = random_instance(seed, 14, 3, 10);
        let mut scaled = inst.clone();
        scaled.cost_profile.iter_mut().for_each(|c| *c *= k);
        scaled.requests.iter_mut().for_each(|r| r.utility *= k);
        for norm in [DemandNorm::Capacity, DemandNorm::GroupMax] {
            assert_close(&encode_features(&inst, &codec(norm)), &encode_features(&scaled, &codec(norm)), 1e-12);
        }
    }

    #[test]
    fn features_ignore_duplication(seed in any::<u64>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let mut doubled = inst.clone();
        for r in inst.requests.iter() {
            let mut copy = r.clone();
            copy.user_id += 1_000_000;
            doubled.requests.push(copy);
        }
        for norm in [DemandNorm::Capacity, DemandNorm::GroupMax] {
            assert_close(&encode_features(&inst, &codec(norm)), &encode_features(&doubled, &codec(norm)), 1e-12);
        }
    }

    #[test]
    fn bands_partition_the_unit_interval(x in 0.0f64..=1.0, k in 1usize..40) {
        let b = band(x, k);
        prop_assert!((1..=k).contains(&b));
        let lo = (b - 1) as f64 / k as f64;
        let hi = b as f64 / k as f64;
        prop_assert!(x <= hi + 1e-9);
        if b > 1 {
            prop_assert!(x > lo - 1e-9);
        }
        prop_assert!(band((x + 0.1).min(1.0), k) >= b);
    }

    #[test]
    fn extraction_is_feasible_and_respects_budgets(
        seed in any::<u64>(),
        raw in prop::collection::vec(prop_oneof![-2.0f64..6.0, Just(f64::NAN), Just(f64::INFINITY)], 36),
    ) {
        let inst = random_instance(seed, 14, 3, 10);
        let params = codec(DemandNorm::Capacity);
        let len = params.spec_for(&inst).label_len();
        let y: Vec<f64> = raw.iter().cycle().take(len).copied().collect();
        for sort in [SortKey::Gain, SortKey::Utility] {
            let ex = extract_solution(&inst, &y, &params, sort).unwrap();
            prop_assert!(check_feasibility(&inst, &ex.solution.schedule).feasible);
            for (j, &a) in ex.admitted.iter().enumerate() {
                if y[j].is_finite() {
                    prop_assert!(a as f64 <= y[j].max(0.0).floor());
                }
            }
        }
    }

    #[test]
    fn raising_a_budget_keeps_earlier_cells(
        seed in any::<u64>(),
        raw in prop::collection::vec(0.0f64..3.0, 36),
        cell in any::<prop::sample::Index>(),
        extra in 1.0f64..5.0,
    ) {
        let inst = random_instance(seed, 14, 3, 10);
        let params = codec(DemandNorm::GroupMax);
        let len = params.spec_for(&inst).label_len();
        let y: Vec<f64> = raw.iter().cycle().take(len).copied().collect();
        let j = cell.index(len);
        let mut raised = y.clone();
        raised[j] += extra;
        let a = extract_solution(&inst, &y, &params, SortKey::Gain).unwrap();
        let b = extract_solution(&inst, &raised, &params, SortKey::Gain).unwrap();
        prop_assert_eq!(&a.admitted[..j], &b.admitted[..j]);
        prop_assert!(b.admitted[j] >= a.admitted[j]);
        if j + 1 == len {
            prop_assert!(b.solution.objective >= a.solution.objective - 1e-9);
        }
    }

    #[test]
    fn floor_round_of_scaled_relaxation_is_feasible(seed in any::<u64>(), scale in 0.0f64..=1.0) {
        let inst = random_instance(seed, 14, 3, 10);
        let frac = solve_lp_relaxation(&inst, &[], |_, _| true).unwrap();
        let shrunk = FractionalSolution {
            values: frac.values.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect(),
            objective: frac.objective * scale,
        };
        for f in [&frac, &shrunk] {
            prop_assert!(check_feasibility(&inst, &floor_round(&inst, f)).feasible);
        }
    }

    #[test]
    fn ptas_star_never_loses_to_lp_rounding(seed in any::<u64>()) {
        let inst = random_instance(seed, 14, 3, 10);
        let lp = lp_rounding(&inst).unwrap();
        let p = ptas_star(&inst, &PtasParams { num_guesses: 10, seed, ..PtasParams::default() });
        prop_assert!(p.objective >= lp.objective - 1e-9 * lp.objective.abs().max(1.0));
    }
}
