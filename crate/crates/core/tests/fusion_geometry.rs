mod common;

use common::{fusion_oracle, sampler_geometry};

#[test]
fn fusion_equals_per_voxel_oracle() {
    let f = fusion_oracle(48, 32, 16, 77);
    assert_eq!(f.tiles, 8);
    assert!(f.exact, "fused probabilities differ from the oracle");
    assert!(f.max_sum_deviation <= 1e-9);
}

#[test]
fn fusion_with_uneven_tiling() {
    // 40 is not a multiple of the stride, so the last tiles overhang
    let f = fusion_oracle(40, 32, 16, 5);
    assert!(f.exact && f.max_sum_deviation <= 1e-9);
}

#[test]
fn crops_are_exact_for_every_origin() {
    let g = sampler_geometry(40, 16, 24);
    assert_eq!(g.origins, 40 * 40 * 40);
    assert!(g.coverage, "some voxel is not covered by any tile");
    assert!(g.centre, "expanded centre crop differs from the standard patch");
    assert!(g.padding, "crop voxel differs from source or padding");
}
