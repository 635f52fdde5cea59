use rayon::prelude::*;

use super::accumulator::{UncertaintyMap, UncertaintyOptions, VarianceKind};
use crate::error::{Error, Result};
use crate::volume::{Geometry, Label, LabelMap};

/// Per-voxel label counts for an ensemble of hard label maps, stored
/// voxel-major (`counts[voxel * L + label]`).
#[derive(Debug, Clone, PartialEq)]
pub struct VoteTable {
    geometry: Geometry,
    num_classes: usize,
    num_members: u32,
    counts: Vec<u32>,
}

impl VoteTable {
    /// Wraps raw counts. Consistency with `num_members` is checked when the
    /// table is used.
    pub fn new(
        geometry: Geometry,
        num_classes: usize,
        num_members: u32,
        counts: Vec<u32>,
    ) -> Result<Self> {
        if counts.len() != geometry.num_voxels() * num_classes {
            return Err(Error::InvalidArgument(format!(
                "vote table holds {} counts, expected {} x {}",
                counts.len(),
                geometry.num_voxels(),
                num_classes
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            geometry,
            num_classes,
            num_members,
            counts,
        })
    }

    pub fn from_members(members: &[LabelMap]) -> Result<Self> {
        let first = check_members(members)?;
        let l = first.num_classes();
        let v = first.num_voxels();
        let mut counts = vec![0u32; v * l];
        counts.par_chunks_mut(l).enumerate().for_each(|(i, row)| {
            for m in members {
                row[m.labels()[i] as usize] += 1;
            }
        });
        Self::new(first.geometry().clone(), l, members.len() as u32, counts)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_members(&self) -> u32 {
        self.num_members
    }

    pub fn counts(&self, voxel: usize) -> &[u32] {
        &self.counts[voxel * self.num_classes..(voxel + 1) * self.num_classes]
    }

    fn check(&self) -> Result<()> {
        if self.num_members == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let n = self.num_members as u64;
        match self
            .counts
            .par_chunks(self.num_classes)
            .position_first(|row| row.iter().map(|&c| c as u64).sum::<u64>() != n)
        {
            Some(v) => Err(Error::CorruptVotes(format!(
                "voxel {v} has {} votes, expected {n}",
                self.counts(v).iter().map(|&c| c as u64).sum::<u64>()
            ))),
            None => Ok(()),
        }
    }

    /// Most frequent label per voxel; ties go to the lowest label.
    pub fn majority(&self) -> Result<LabelMap> {
        self.check()?;
        let labels = self
            .counts
            .par_chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (l, &c) in row.iter().enumerate() {
                    if c > row[best] {
                        best = l;
                    }
                }
                best as Label
            })
            .collect();
        LabelMap::new(self.geometry.clone(), self.num_classes, labels)
    }
}

/// Uncertainty of one-hot members computed directly from vote counts.
///
/// With `q_l = c_l / N` the label-averaged population variance is
/// `(1 - Σ q_l²) / L`; it is evaluated as the integer ratio
/// `Σ c_l (N - c_l) / (N² L)`.
pub fn onehot_uncertainty(
    votes: &VoteTable,
    options: &UncertaintyOptions,
) -> Result<UncertaintyMap> {
    votes.check()?;
    let n = votes.num_members as u64;
    let scale = VoteScale::new(n, votes.num_classes, options);
    let first = options.first_class();
    let values = votes
        .counts
        .par_chunks(votes.num_classes)
        .map(|row| {
            let spread: u64 = row[first..]
                .iter()
                .map(|&c| c as u64 * (n - c as u64))
                .sum();
            scale.apply(spread)
        })
        .collect();
    UncertaintyMap::new(votes.geometry.clone(), values)
}

/// Converts the integer spread `Σ c_l (N - c_l)` into a variance average.
#[derive(Debug, Clone, Copy)]
pub(crate) struct VoteScale {
    denominator: f64,
}

impl VoteScale {
    pub(crate) fn new(n: u64, num_classes: usize, options: &UncertaintyOptions) -> Self {
        let classes = options.averaged_classes(num_classes) as f64;
        let divisor = match options.variance {
            VarianceKind::Population => n as f64,
            VarianceKind::Sample => options.variance.divisor(n),
        };
        Self {
            denominator: n as f64 * divisor * classes,
        }
    }

    #[inline]
    pub(crate) fn apply(&self, spread: u64) -> f64 {
        if spread == 0 {
            0.0
        } else {
            spread as f64 / self.denominator
        }
    }
}

/// Sorts `votes` in place and returns the lowest most frequent label and the
/// spread `Σ c_l (N - c_l)` over labels `>= first_class`.
#[inline]
pub(crate) fn tally(votes: &mut [Label], first_class: usize) -> (Label, u64) {
    let n = votes.len() as u64;
    votes.sort_unstable();
    let mut best = (0u64, 0 as Label);
    let mut spread = 0u64;
    let mut i = 0;
    while i < votes.len() {
        let label = votes[i];
        let mut j = i + 1;
        while j < votes.len() && votes[j] == label {
            j += 1;
        }
        let c = (j - i) as u64;
        if c > best.0 {
            best = (c, label);
        }
        if label as usize >= first_class {
            spread += c * (n - c);
        }
        i = j;
    }
    (best.1, spread)
}

/// First member, after checking the list is non-empty and uniform.
pub(crate) fn check_members(members: &[LabelMap]) -> Result<&LabelMap> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if !m.geometry().matches(first.geometry()) || m.num_classes() != first.num_classes() {
            return Err(Error::IncompatibleMember(format!(
                "member {i} has dims {:?} and {} classes, member 0 has {:?} and {}",
                m.geometry().dims,
                m.num_classes(),
                first.geometry().dims,
                first.num_classes()
            )));
        }
    }
    Ok(first)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(labels: &[Label], l: usize) -> Vec<LabelMap> {
        let g = Geometry::new([1, 1, 1], [1.0; 3]).unwrap();
        labels
            .iter()
            .map(|&x| LabelMap::new(g.clone(), l, vec![x]).unwrap())
            .collect()
    }

    #[test]
    fn closed_form_examples() {
        let opts = UncertaintyOptions::default();
        let u = |labels: &[Label], l| {
            onehot_uncertainty(&VoteTable::from_members(&point(labels, l)).unwrap(), &opts)
                .unwrap()
                .values()[0]
        };
        assert_eq!(u(&[2, 2, 2], 3), 0.0);
        assert!((u(&[1, 1, 2], 3) - 4.0 / 27.0).abs() < 1e-12);
        assert_eq!(u(&[0, 1, 2, 3], 4), 0.1875);
        assert_eq!(u(&[0, 1], 2), 0.25);
    }

    #[test]
    fn miscounted_votes_are_corrupt() {
        let g = Geometry::new([2, 1, 1], [1.0; 3]).unwrap();
        let table = VoteTable::new(g, 2, 3, vec![2, 1, 1, 1]).unwrap();
        let err = onehot_uncertainty(&table, &UncertaintyOptions::default()).unwrap_err();
        assert!(matches!(err, Error::CorruptVotes(_)));
    }

    #[test]
    fn tally_breaks_ties_low() {
        assert_eq!(tally(&mut [2, 1], 0), (1, 2));
        assert_eq!(tally(&mut [1, 2, 1], 0), (1, 4));
        assert_eq!(tally(&mut [3, 3, 0, 0, 5], 0), (0, 16));
        assert_eq!(tally(&mut [3, 3, 0, 0, 5], 1), (0, 10));
    }

    #[test]
    fn majority_from_table() {
        let fused = VoteTable::from_members(&point(&[2, 1], 3))
            .unwrap()
            .majority()
            .unwrap();
        assert_eq!(fused.labels(), &[1]);
    }

    #[test]
    fn sample_variance_scale() {
        let opts = UncertaintyOptions {
            variance: VarianceKind::Sample,
            exclude_background: false,
        };
        let table = VoteTable::from_members(&point(&[0, 1], 2)).unwrap();
        assert_eq!(onehot_uncertainty(&table, &opts).unwrap().values()[0], 0.5);
        let single = VoteTable::from_members(&point(&[1], 2)).unwrap();
        assert_eq!(onehot_uncertainty(&single, &opts).unwrap().values()[0], 0.0);
    }
}
