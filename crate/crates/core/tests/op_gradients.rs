use proptest::prelude::*;
use vecmap_core::gradsuite::{run_kernel_trials, DEFAULT_REL_TOL};

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    /// One random shape (up to 8x8) per case for every kernel op.
    #[test]
    fn kernel_backward_matches_central_differences(seed in any::<u64>()) {
        let rep = run_kernel_trials(seed, 1, DEFAULT_REL_TOL).unwrap();
        prop_assert_eq!(rep.ops.len(), 6);
        for o in &rep.ops {
            prop_assert!(o.passed, "{:?}", o);
        }
    }
}
