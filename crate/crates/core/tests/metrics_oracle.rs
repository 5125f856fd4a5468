use proptest::prelude::*;
use vecmap_core::geometry::ElementClass;
use vecmap_core::metrics::{
    ap_at_tau, ap_from_hits, chamfer, evaluate, greedy_match, ApCandidate, ApMethod, MetricConfig, SceneEval,
};
use vecmap_core::synthgen::{generate_indexed_scene, SceneConfig};
use vecmap_testkit::ap::{chamfer_oracle, oracle_ap, oracle_ap_at_tau, random_ap_scene};

fn candidates_strategy() -> impl Strategy<Value = (Vec<ApCandidate>, usize)> {
    (1usize..=4, 0usize..=5).prop_flat_map(|(num_gt, n_pred)| {
        let cand = (
            // coarse confidences create ties on purpose
            (0u8..6).prop_map(|c| c as f64 / 5.0),
            proptest::collection::vec(prop_oneof![(0u8..8).prop_map(|d| d as f64 * 0.25), Just(f64::INFINITY)], num_gt),
        )
            .prop_map(|(confidence, ds)| ApCandidate {
                confidence,
                distances: ds.into_iter().enumerate().collect(),
            });
        (proptest::collection::vec(cand, n_pred), Just(num_gt))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn greedy_ap_matches_exhaustive_oracle(
        (c, num_gt) in candidates_strategy(),
        tau in prop_oneof![Just(0.5), Just(1.0), Just(1.5)],
    ) {
        let got = ap_from_hits(&greedy_match(&c, num_gt, tau), num_gt, ApMethod::Area).unwrap();
        let want = oracle_ap(&c, num_gt, tau).unwrap();
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn ap_at_tau_matches_oracle_on_small_scenes(seed in any::<u64>()) {
        let scenes = vec![random_ap_scene(seed), random_ap_scene(seed ^ 0x5555)];
        let cfg = MetricConfig::default();
        for class in [ElementClass::Divider, ElementClass::Boundary] {
            for &tau in &cfg.taus {
                let got = ap_at_tau(&scenes, class, tau, &cfg);
                let want = oracle_ap_at_tau(&scenes, class, tau, &cfg);
                match (got, want) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn chamfer_matches_double_loop(
        a in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..12),
        b in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..12),
    ) {
        let a: Vec<_> = a.into_iter().map(|(x, y)| vecmap_core::Point::new(x, y)).collect();
        let b: Vec<_> = b.into_iter().map(|(x, y)| vecmap_core::Point::new(x, y)).collect();
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn topo_ignores_instance_orientation(index in 0u64..500) {
        let gen = generate_indexed_scene(&SceneConfig::default(), index).unwrap();
        let gts = gen.instances;
        let mut flipped = gts.clone();
        for inst in &mut flipped {
            inst.points.reverse();
        }
        let cfg = MetricConfig::default();
        let a = evaluate(&[SceneEval { preds: vec![], gts: gts.clone(), topo_preds: flipped.clone() }], &cfg);
        let b = evaluate(&[SceneEval { preds: vec![], gts: flipped, topo_preds: gts }], &cfg);
        prop_assert_eq!(a.topo, b.topo);
        prop_assert_eq!(a.topo.f1, 1.0);
    }
}

#[test]
fn gt_as_prediction_is_perfect_on_generated_scenes() {
    let scenes: Vec<SceneEval> = (0..30)
        .map(|i| SceneEval::gt_as_pred(&generate_indexed_scene(&SceneConfig::default(), i).unwrap().instances))
        .collect();
    let r = evaluate(&scenes, &MetricConfig::default());
    assert_eq!(r.map, 1.0);
    assert_eq!(r.topo.f1, 1.0);
    assert_eq!(r.per_class.len(), 4);
}
