#![allow(dead_code)]

use ensemble_uq::volume::{Geometry, Label, LabelMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn cube(n: usize) -> Geometry {
    Geometry::new([n; 3], [1.0; 3]).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, geometry: &Geometry, num_classes: usize) -> LabelMap {
    let labels = (0..geometry.num_voxels())
        .map(|_| rng.gen_range(0..num_classes) as Label)
        .collect();
    LabelMap::new(geometry.clone(), num_classes, labels).unwrap()
}

/// Members that mostly agree with a shared base map.
pub fn correlated_members(
    rng: &mut ChaCha8Rng,
    geometry: &Geometry,
    num_classes: usize,
    n: usize,
) -> Vec<LabelMap> {
    let base = random_map(rng, geometry, num_classes);
    (0..n)
        .map(|_| {
            let labels = base
                .labels()
                .iter()
                .map(|&l| {
                    if rng.gen_bool(0.3) {
                        rng.gen_range(0..num_classes) as Label
                    } else {
                        l
                    }
                })
                .collect();
            LabelMap::new(geometry.clone(), num_classes, labels).unwrap()
        })
        .collect()
}

/// Two-pass population variance of each voxel-class value, averaged over
/// the classes.
pub fn naive_uncertainty(members: &[Vec<Vec<f64>>], first_class: usize) -> Vec<f64> {
    // members[m][class][voxel]
    let n = members.len() as f64;
    let classes = members[0].len();
    let voxels = members[0][0].len();
    (0..voxels)
        .map(|v| {
            let mut total = 0.0;
            for c in first_class..classes {
                let mean = members.iter().map(|m| m[c][v]).sum::<f64>() / n;
                total += members
                    .iter()
                    .map(|m| (m[c][v] - mean).powi(2))
                    .sum::<f64>()
                    / n;
            }
            total / (classes - first_class) as f64
        })
        .collect()
}

pub fn onehot_planes(map: &LabelMap) -> Vec<Vec<f64>> {
    (0..map.num_classes())
        .map(|c| {
            map.labels()
                .iter()
                .map(|&l| (l as usize == c) as u8 as f64)
                .collect()
        })
        .collect()
}

/// Mode of a vote multiset; ties go to the smallest label.
pub fn brute_mode(votes: &[Label]) -> Label {
    let mut best = (0usize, Label::MAX);
    for &candidate in votes {
        let count = votes.iter().filter(|&&v| v == candidate).count();
        if count > best.0 || (count == best.0 && candidate < best.1) {
            best = (count, candidate);
        }
    }
    best.1
}
