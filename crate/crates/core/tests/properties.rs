use planforge_core::grpo::{group_advantages, scalar_reward};
use planforge_core::pareto::{dominates, flag_dominance, ParetoPoint};
use planforge_core::policy::{beta_log_pdf, dirichlet_log_pdf, map_plan, PlanMapperConfig};
use planforge_core::pruner::{build_masks, pruned_rows, MaskSet, RowScoreTable};
use planforge_core::rewards::{
    band_penalty, compression_return, gate_weight, log_margin, FlowTable, RunningNormalizer,
};
use planforge_core::toyvlm::{init_model, softmax, ToyVlmConfig};
use planforge_core::{Budget, Preference};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let t: f64 = v.iter().sum();
        v.into_iter().map(|x| x / t).collect()
    })
}

proptest! {
    #[test]
    fn normalized_preferences_sum_to_one(w in prop::array::uniform3(0.0f64..10.0)) {
        prop_assume!(w.iter().sum::<f64>() > 1e-6);
        let (p, _) = Preference::normalized(w).unwrap();
        prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn plan_ratios_stay_in_unit_interval(s in 0.0f64..=1.0, p in simplex(5), kappa in 0.2f64..3.0) {
        let cfg = PlanMapperConfig { c_min: 0.2, c_max: 0.5, kappa };
        let plan = map_plan(s, &p, &cfg, &[64; 5], Preference::uniform()).unwrap();
        prop_assert!(plan.ratios.iter().all(|&r| (0.0..=1.0).contains(&r)));
        for (i, &pi) in p.iter().enumerate() {
            let raw = kappa * plan.target_sparsity * 5.0 * pi;
            prop_assert_eq!(plan.saturated_layers.contains(&i), raw > 1.0);
        }
    }

    #[test]
    fn masks_are_nested_and_sized(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let table = RowScoreTable { scores: vec![scores.clone()] };
        let m_lo = build_masks(&table, &[lo]).unwrap();
        let m_hi = build_masks(&table, &[hi]).unwrap();
        prop_assert_eq!(m_lo.zero_count(0), pruned_rows(lo, scores.len()));
        for (k_lo, k_hi) in m_lo.block(0).iter().zip(m_hi.block(0)) {
            prop_assert!(*k_lo || !*k_hi, "pruned at low ratio but kept at high ratio");
        }
    }

    #[test]
    fn pruned_neurons_never_outscore_kept(scores in prop::collection::vec(0.0f64..1.0, 2..40), r in 0.0f64..=1.0) {
        let table = RowScoreTable { scores: vec![scores.clone()] };
        let m = build_masks(&table, &[r]).unwrap();
        let kept_min = scores.iter().zip(m.block(0)).filter(|(_, &k)| k).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let cut_max = scores.iter().zip(m.block(0)).filter(|(_, &k)| !k).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(cut_max <= kept_min);
    }

    #[test]
    fn log_margin_is_shift_invariant(
        logits in prop::collection::vec(-5.0f64..5.0, 6),
        shift in -20.0f64..20.0,
    ) {
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let a = log_margin(&softmax(&logits), &[0, 2], &[1, 5]).unwrap();
        let b = log_margin(&softmax(&shifted), &[0, 2], &[1, 5]).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn compression_return_is_monotone(x in -0.5f64..1.5, y in -0.5f64..1.5) {
        let b = Budget::default();
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(compression_return(lo, b) <= compression_return(hi, b));
        prop_assert!((0.0..=1.0).contains(&compression_return(x, b)));
    }

    #[test]
    fn gate_weight_matches_band(rho in -10.0f64..10.0, lo in -3.0f64..0.0, width in 0.0f64..3.0) {
        let band = (lo, lo + width);
        let psi = band_penalty(rho, band, 2.0);
        let gamma = gate_weight(psi, 1.0, 0.1);
        prop_assert!(psi <= 0.0);
        prop_assert!((0.1..=1.0).contains(&gamma));
        let inside = band.0 <= rho && rho <= band.1;
        prop_assert_eq!(gamma == 1.0, inside);
        prop_assert_eq!(psi == 0.0, inside);
    }

    #[test]
    fn normalized_scores_are_clipped(group in prop::collection::vec(prop::array::uniform2(-1e3f64..1e3), 2..10)) {
        let mut n = RunningNormalizer::default();
        n.normalize(&[[0.0, 0.0], [1e-3, 1e-3]]).unwrap();
        for z in n.normalize(&group).unwrap() {
            prop_assert!(z.iter().all(|v| v.abs() <= 5.0));
        }
        prop_assert!(n.std.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn advantages_sum_to_zero(rewards in prop::collection::vec(-100.0f64..100.0, 2..32)) {
        let adv = group_advantages(&rewards).unwrap();
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn reward_is_linear_in_preference(
        a in simplex(3), b in simplex(3), t in 0.0f64..=1.0,
        n_rob in -5.0f64..5.0, n_util in -5.0f64..5.0, comp in 0.0f64..=1.0,
    ) {
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let r = |w: &[f64]| scalar_reward(Preference([w[0], w[1], w[2]]), n_rob, n_util, comp);
        prop_assert!((r(&mix) - (t * r(&a) + (1.0 - t) * r(&b))).abs() < 1e-12);
    }

    #[test]
    fn beta_equals_two_part_dirichlet(a in 0.1f64..10.0, b in 0.1f64..10.0, s in 0.01f64..0.99) {
        let x = beta_log_pdf(a, b, s);
        let y = dirichlet_log_pdf(&[a, b], &[s, 1.0 - s]);
        prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
    }

    #[test]
    fn dominance_flags_match_pairwise(points in prop::collection::vec((-3i32..3, -3i32..3, 0.0f64..0.7), 1..30)) {
        let mut pts: Vec<ParetoPoint> = points.iter().map(|&(r, u, s)| ParetoPoint {
            preference: Preference::uniform(),
            sparsity: s,
            j_rob: r as f64,
            j_util: u as f64,
            dominated: false,
        }).collect();
        let budget = Budget::default();
        flag_dominance(&mut pts, Some(budget));
        for (i, p) in pts.iter().enumerate() {
            let expected = !budget.contains(p.sparsity)
                || pts.iter().enumerate().any(|(j, q)| j != i && budget.contains(q.sparsity) && dominates(q, p));
            prop_assert_eq!(p.dominated, expected);
        }
    }
}

#[test]
fn flow_is_monotone_under_inclusion() {
    let params = init_model(&ToyVlmConfig::default()).unwrap();
    let table = FlowTable::new(&params);
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = prop::collection::vec(prop::collection::vec(0u8..3, 64), 4);
    for _ in 0..200 {
        let levels = strategy.new_tree(&mut runner).unwrap().current();
        // level 0 pruned in both, 1 pruned only in the larger mask, 2 kept
        let small: Vec<Vec<bool>> = levels.iter().map(|b| b.iter().map(|&l| l == 2).collect()).collect();
        let large: Vec<Vec<bool>> = levels.iter().map(|b| b.iter().map(|&l| l >= 1).collect()).collect();
        let f_small = table.flow(&MaskSet::from_blocks(small)).unwrap();
        let f_large = table.flow(&MaskSet::from_blocks(large)).unwrap();
        assert!(f_small <= f_large);
    }
}
