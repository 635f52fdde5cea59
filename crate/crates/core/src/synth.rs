//! Synthetic phantoms and surrogate ensemble members for checking that
//! ensemble uncertainty tracks correction effort.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{run_label_members, EnsembleOptions};
use crate::error::{Error, Result};
use crate::metrics::{correction_effort, Denominator};
use crate::selection::CorrelationSummary;
use crate::volume::{Geometry, Label, LabelMap};

/// splitmix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomStructure {
    /// Concentric shells, class 1 outermost.
    #[default]
    NestedSpheres,
    /// Overlapping random balls per class.
    RandomBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub structure: PhantomStructure,
    pub seed: u64,
}

const PHANTOM_ATTEMPTS: u64 = 16;

/// Builds a phantom with every class present.
pub fn make_phantom(spec: &PhantomSpec) -> Result<LabelMap> {
    if spec.dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidSpec(format!(
            "phantom dims must be at least 8, got {:?}",
            spec.dims
        )));
    }
    if spec.num_classes < 2 || spec.num_classes > crate::volume::MAX_CLASSES {
        return Err(Error::InvalidSpec(format!(
            "unsupported class count {}",
            spec.num_classes
        )));
    }
    let geometry =
        Geometry::new(spec.dims, [1.0; 3]).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    for attempt in 0..PHANTOM_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, attempt));
        let labels = match spec.structure {
            PhantomStructure::NestedSpheres => nested_spheres(spec, &mut rng),
            PhantomStructure::RandomBlobs => random_blobs(spec, &mut rng),
        };
        let map = LabelMap::new(geometry.clone(), spec.num_classes, labels)?;
        if map.histogram().iter().all(|&c| c > 0) {
            return Ok(map);
        }
    }
    Err(Error::InvalidSpec(format!(
        "could not fit {} classes into {:?}",
        spec.num_classes, spec.dims
    )))
}

fn nested_spheres(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let [nx, ny, nz] = spec.dims;
    let shells = (spec.num_classes - 1) as f64;
    let mut center = [0.0; 3];
    let mut r_max = f64::INFINITY;
    for a in 0..3 {
        let n = spec.dims[a] as f64;
        center[a] = (n - 1.0) / 2.0 + rng.gen_range(-n / 8.0..=n / 8.0);
        r_max = r_max.min(center[a].min(n - 1.0 - center[a]));
    }
    let r_max = (r_max * rng.gen_range(0.8..=1.0)).max(1.0);
    let mut labels = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = dist([x, y, z], center);
                let t = d / r_max;
                let label = if t > 1.0 {
                    0
                } else {
                    (shells - (t * shells).floor()).clamp(1.0, shells) as Label
                };
                labels.push(label);
            }
        }
    }
    labels
}

fn random_blobs(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let [nx, ny, nz] = spec.dims;
    let min_dim = spec.dims.iter().copied().min().unwrap_or(8) as f64;
    let mut labels = vec![0 as Label; nx * ny * nz];
    for class in 1..spec.num_classes {
        for _ in 0..rng.gen_range(1..=3) {
            let center = spec.dims.map(|n| rng.gen_range(0.0..n as f64));
            let radius = rng.gen_range(1.5..=(min_dim / 4.0).max(2.0));
            let lo = center.map(|c| (c - radius).floor().max(0.0) as usize);
            let hi = [
                ((center[0] + radius).ceil() as usize).min(nx - 1),
                ((center[1] + radius).ceil() as usize).min(ny - 1),
                ((center[2] + radius).ceil() as usize).min(nz - 1),
            ];
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        if dist([x, y, z], center) <= radius {
                            labels[x + nx * (y + ny * z)] = class as Label;
                        }
                    }
                }
            }
        }
    }
    labels
}

fn dist(p: [usize; 3], c: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| (p[a] as f64 - c[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Chance that a voxel next to a class boundary takes a neighbouring class.
    pub boundary_flip_prob: f64,
    /// Chance that any voxel is redrawn uniformly over all classes.
    pub global_flip_prob: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("boundary_flip_prob", self.boundary_flip_prob),
            ("global_flip_prob", self.global_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// `n` specs with global flip probabilities spaced geometrically from
    /// `eps_min` to `eps_max`.
    pub fn log_grid(
        n: usize,
        eps_min: f64,
        eps_max: f64,
        boundary_flip_prob: f64,
        seed: u64,
    ) -> Vec<NoiseSpec> {
        (0..n)
            .map(|i| {
                let t = if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.0
                };
                let eps = if eps_min > 0.0 {
                    eps_min * (eps_max / eps_min).powf(t)
                } else {
                    eps_min + t * (eps_max - eps_min)
                };
                NoiseSpec {
                    boundary_flip_prob,
                    global_flip_prob: eps,
                    seed: mix_seed(seed, i as u64),
                }
            })
            .collect()
    }
}

/// A noisy copy of `gt`. Each z-slice draws from its own seeded stream, so
/// the result does not depend on scheduling.
pub fn perturb(gt: &LabelMap, noise: &NoiseSpec) -> Result<LabelMap> {
    noise.validate()?;
    if noise.boundary_flip_prob == 0.0 && noise.global_flip_prob == 0.0 {
        return Ok(gt.clone());
    }
    let [nx, ny, nz] = gt.geometry().dims;
    let l = gt.num_classes();
    let src = gt.labels();
    let slice = nx * ny;
    let mut out = src.to_vec();
    out.par_chunks_mut(slice)
        .enumerate()
        .for_each(|(z, plane)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise.seed, z as u64));
            let mut neighbours: Vec<Label> = Vec::with_capacity(6);
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y;
                    let here = src[z * slice + i];
                    let mut label = here;
                    if noise.boundary_flip_prob > 0.0 {
                        neighbours.clear();
                        let mut push = |j: usize| {
                            let n = src[j];
                            if n != here && !neighbours.contains(&n) {
                                neighbours.push(n);
                            }
                        };
                        let v = z * slice + i;
                        if x > 0 {
                            push(v - 1);
                        }
                        if x + 1 < nx {
                            push(v + 1);
                        }
                        if y > 0 {
                            push(v - nx);
                        }
                        if y + 1 < ny {
                            push(v + nx);
                        }
                        if z > 0 {
                            push(v - slice);
                        }
                        if z + 1 < nz {
                            push(v + slice);
                        }
                        if !neighbours.is_empty() && rng.gen::<f64>() < noise.boundary_flip_prob {
                            neighbours.sort_unstable();
                            label = neighbours[rng.gen_range(0..neighbours.len())];
                        }
                    }
                    if noise.global_flip_prob > 0.0 && rng.gen::<f64>() < noise.global_flip_prob {
                        label = rng.gen_range(0..l) as Label;
                    }
                    plane[i] = label;
                }
            }
        });
    LabelMap::new(gt.geometry().clone(), l, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub num_scans: usize,
    pub dims: [usize; 3],
    pub num_classes: usize,
    #[serde(default)]
    pub structure: PhantomStructure,
    /// Scan `i` uses `noise_grid[i % len]`.
    pub noise_grid: Vec<NoiseSpec>,
    pub members_per_scan: usize,
    pub seed: u64,
    #[serde(default)]
    pub denominator: Denominator,
}

impl ExperimentConfig {
    /// 20 scans of 64³ with 5 classes and 6 members, global flip
    /// probability spaced from 0.01 to 0.2, boundary flip probability 0.02.
    pub fn standard(seed: u64) -> Self {
        let num_scans = 20;
        Self {
            num_scans,
            dims: [64; 3],
            num_classes: 5,
            structure: PhantomStructure::NestedSpheres,
            noise_grid: NoiseSpec::log_grid(num_scans, 0.01, 0.2, 0.02, seed),
            members_per_scan: 6,
            seed,
            denominator: Denominator::Total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scans < 10 {
            return Err(Error::InvalidSpec(format!(
                "need at least 10 scans, got {}",
                self.num_scans
            )));
        }
        if self.members_per_scan == 0 {
            return Err(Error::InvalidSpec(
                "need at least one member per scan".into(),
            ));
        }
        if self.noise_grid.is_empty() {
            return Err(Error::InvalidSpec("noise grid is empty".into()));
        }
        self.noise_grid.iter().try_for_each(NoiseSpec::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub noise: NoiseSpec,
    pub mean_uncertainty: f64,
    pub differing_voxels: u64,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub scans: Vec<ScanRecord>,
    pub summary: CorrelationSummary,
}

impl ExperimentRecord {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scan_id",
            "boundary_flip_prob",
            "global_flip_prob",
            "mean_uncertainty",
            "differing_voxels",
            "percentage",
        ])?;
        for s in &self.scans {
            w.write_record([
                s.scan_id.clone(),
                s.noise.boundary_flip_prob.to_string(),
                s.noise.global_flip_prob.to_string(),
                s.mean_uncertainty.to_string(),
                s.differing_voxels.to_string(),
                s.percentage.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// For each synthetic scan: perturb the phantom once per member, fuse by
/// majority vote, and pair the scan's mean uncertainty with the number of
/// voxels the fused map gets wrong.
pub fn run_effort_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord> {
    config.validate()?;
    let scans: Vec<ScanRecord> = (0..config.num_scans)
        .into_par_iter()
        .map(|i| run_scan(config, i))
        .collect::<Result<_>>()?;
    let uc: Vec<f64> = scans.iter().map(|s| s.mean_uncertainty).collect();
    let pct: Vec<f64> = scans.iter().map(|s| s.percentage).collect();
    Ok(ExperimentRecord {
        config: config.clone(),
        summary: CorrelationSummary::compute(&uc, &pct)?,
        scans,
    })
}

fn run_scan(config: &ExperimentConfig, index: usize) -> Result<ScanRecord> {
    let scan_seed = mix_seed(config.seed, index as u64);
    let gt = make_phantom(&PhantomSpec {
        dims: config.dims,
        num_classes: config.num_classes,
        structure: config.structure,
        seed: scan_seed,
    })?;
    let noise = config.noise_grid[index % config.noise_grid.len()];
    let members = (0..config.members_per_scan)
        .map(|m| {
            perturb(
                &gt,
                &NoiseSpec {
                    seed: mix_seed(mix_seed(noise.seed, scan_seed), m as u64),
                    ..noise
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let scan_id = format!("scan-{index:03}");
    let options = EnsembleOptions {
        scan_id: scan_id.clone(),
        ..EnsembleOptions::default()
    };
    let out = run_label_members(members, &options)?;
    let effort = correction_effort(&out.fused, &gt, config.denominator)?;
    Ok(ScanRecord {
        scan_id,
        noise,
        mean_uncertainty: out.report.mean_uncertainty,
        differing_voxels: effort.differing_voxels,
        percentage: effort.percentage,
    })
}
