use bella_core::gradcheck::composite_check;
use bella_core::projector::ProjectorVariant;

#[test]
fn projector_lm_graph_matches_central_differences() {
    for variant in ProjectorVariant::ALL {
        for seed in 0..10 {
            let r = composite_check(variant, seed, 4, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{variant} seed {seed}: {r:?}");
        }
    }
}
