use proptest::prelude::*;
use spikesplit_core::planner::{plan_network, CandidateConfig, Objective, PointSelection};
use spikesplit_core::FeatureShape;

fn candidate() -> impl Strategy<Value = CandidateConfig> {
    (
        1usize..6,
        1usize..9,
        1usize..9,
        1u64..300,
        0.0f64..5.0,
        prop::option::of(0.0f64..10.0),
        1usize..2000,
    )
        .prop_map(|(split, c, h, ratio, drop, energy, bytes)| CandidateConfig {
            split_point: split,
            timesteps: 2,
            original: FeatureShape::new(64, 8, 8),
            compressed: FeatureShape::new(c, h, h),
            spike_bytes: bytes,
            compression_ratio: ratio,
            accuracy_drop: drop,
            edge_energy_mj: energy,
        })
}

fn candidates() -> impl Strategy<Value = Vec<CandidateConfig>> {
    prop::collection::vec(candidate(), 1..40)
}

/// Ranking key of the brute-force oracle: larger is better.
fn oracle_key(objective: Objective, c: &CandidateConfig) -> (f64, f64, f64) {
    let energy = c.edge_energy_mj.unwrap_or(f64::INFINITY);
    match objective {
        Objective::MaxRatio => (c.compression_ratio as f64, -energy, -(c.spike_bytes as f64)),
        Objective::MinEnergy => (-energy, c.compression_ratio as f64, -(c.spike_bytes as f64)),
    }
}

/// Filter by the drop budget, take the highest-ratio candidate at every split
/// point, then the argmax of the objective over those.
fn brute_force(cands: &[CandidateConfig], max_drop: f64, objective: Objective) -> Option<(f64, f64, f64)> {
    let mut splits: Vec<usize> = cands.iter().map(|c| c.split_point).collect();
    splits.sort_unstable();
    splits.dedup();
    splits
        .into_iter()
        .filter_map(|s| {
            cands
                .iter()
                .filter(|c| c.split_point == s && c.accuracy_drop <= max_drop)
                .max_by(|a, b| {
                    let (ka, kb) = (oracle_key(Objective::MaxRatio, a), oracle_key(Objective::MaxRatio, b));
                    ka.partial_cmp(&kb).unwrap()
                })
        })
        .map(|c| oracle_key(objective, c))
        .max_by(|a, b| a.partial_cmp(b).unwrap())
}

fn objective() -> impl Strategy<Value = Objective> {
    prop_oneof![Just(Objective::MaxRatio), Just(Objective::MinEnergy)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn plan_equals_brute_force(cands in candidates(), max_drop in 0.0f64..5.0, objective in objective()) {
        let plan = plan_network(&cands, max_drop, objective).unwrap();
        let expected = brute_force(&cands, max_drop, objective);
        prop_assert_eq!(plan.best.as_ref().map(|c| oracle_key(objective, c)), expected);
        prop_assert_eq!(plan.is_feasible(), expected.is_some());
    }

    #[test]
    fn chosen_candidates_respect_the_budget(cands in candidates(), max_drop in 0.0f64..5.0) {
        let plan = plan_network(&cands, max_drop, Objective::MaxRatio).unwrap();
        for p in &plan.points {
            match p {
                PointSelection::Chosen(c) => prop_assert!(c.accuracy_drop <= max_drop),
                PointSelection::Infeasible { split_point, best_drop, .. } => {
                    prop_assert!(*best_drop > max_drop);
                    prop_assert!(cands.iter().filter(|c| c.split_point == *split_point).all(|c| c.accuracy_drop > max_drop));
                }
            }
        }
        let mut splits: Vec<usize> = cands.iter().map(|c| c.split_point).collect();
        splits.sort_unstable();
        splits.dedup();
        prop_assert_eq!(plan.points.iter().map(|p| p.split_point()).collect::<Vec<_>>(), splits);
    }

    #[test]
    fn plan_ignores_input_order(cands in candidates(), max_drop in 0.0f64..5.0, objective in objective(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            plan_network(&cands, max_drop, objective).unwrap(),
            plan_network(&shuffled, max_drop, objective).unwrap()
        );
    }

    #[test]
    fn looser_budget_never_hurts(cands in candidates(), a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let tight = plan_network(&cands, lo, Objective::MaxRatio).unwrap();
        let loose = plan_network(&cands, hi, Objective::MaxRatio).unwrap();
        let feasible = |p: &spikesplit_core::planner::SplitPlan| p.points.iter().filter(|s| s.chosen().is_some()).count();
        prop_assert!(feasible(&loose) >= feasible(&tight));
        let ratio = |p: &spikesplit_core::planner::SplitPlan| p.best.as_ref().map_or(0, |c| c.compression_ratio);
        prop_assert!(ratio(&loose) >= ratio(&tight));
    }
}
