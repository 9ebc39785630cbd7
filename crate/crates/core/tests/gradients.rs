mod common;

use common::*;
use proptest::prelude::*;
use volreg::similarity::Objective;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn msd_gradient_matches_differences(seed in any::<u64>()) {
        let e = objective_gradient_error(Objective::Msd, 9, seed);
        prop_assert!(e <= 1e-3, "relative error {e}");
    }

    #[test]
    fn local_cc_gradient_matches_differences(seed in any::<u64>()) {
        let e = objective_gradient_error(Objective::LocalCc, 5, seed);
        prop_assert!(e <= 5e-3, "relative error {e}");
    }

    #[test]
    fn cc_gradient_matches_differences(seed in any::<u64>()) {
        let e = objective_gradient_error(Objective::Cc, 9, seed);
        prop_assert!(e <= 1e-3, "relative error {e}");
    }

    #[test]
    fn diffusion_gradient_matches_differences(seed in any::<u64>()) {
        let e = diffusion_gradient_error(seed);
        prop_assert!(e <= 1e-3, "relative error {e}");
    }

    #[test]
    fn bending_gradient_matches_differences(seed in any::<u64>()) {
        let e = bending_gradient_error(seed);
        prop_assert!(e <= 1e-3, "relative error {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn localized_nmi_differences_match_whole_volume(seed in 0u64..1_000_000) {
        let e = nmi_control_error(seed);
        prop_assert!(e <= 1e-6, "abs error {e}");
    }
}
