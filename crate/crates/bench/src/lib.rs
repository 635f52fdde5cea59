//! Fixtures shared by the benchmarks.

use ensemble_uq::volume::{Geometry, Label, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cube(n: usize) -> Geometry {
    Geometry::new([n; 3], [1.0; 3]).expect("valid cube")
}

/// `members` noisy copies of one random map; each voxel is redrawn with probability `p`.
pub fn label_ensemble(
    n: usize,
    num_classes: usize,
    members: usize,
    p: f64,
    seed: u64,
) -> Vec<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cube(n);
    let base: Vec<Label> = (0..g.num_voxels())
        .map(|_| rng.gen_range(0..num_classes) as Label)
        .collect();
    (0..members)
        .map(|_| {
            let labels = base
                .iter()
                .map(|&l| {
                    if rng.gen_bool(p) {
                        rng.gen_range(0..num_classes) as Label
                    } else {
                        l
                    }
                })
                .collect();
            LabelMap::new(g.clone(), num_classes, labels).expect("labels in range")
        })
        .collect()
}
