//! Per-class Dice scores, grouped percentile summaries and correction effort.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Label, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDsc {
    pub class: Label,
    /// `None` when the class appears in neither map.
    pub dsc: Option<f64>,
    pub gt_voxels: u64,
    pub pred_voxels: u64,
    pub intersection: u64,
    pub detected: bool,
    pub absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    pub scan_id: String,
    pub classes: Vec<ClassDsc>,
}

impl DscReport {
    pub fn class(&self, class: Label) -> Option<&ClassDsc> {
        self.classes.get(class as usize)
    }

    /// Writes one CSV row per class.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scan_id",
            "class",
            "dsc",
            "gt_voxels",
            "pred_voxels",
            "intersection",
            "detected",
            "absent",
        ])?;
        for c in &self.classes {
            w.write_record([
                self.scan_id.clone(),
                c.class.to_string(),
                c.dsc.map(|d| d.to_string()).unwrap_or_default(),
                c.gt_voxels.to_string(),
                c.pred_voxels.to_string(),
                c.intersection.to_string(),
                c.detected.to_string(),
                c.absent.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

const COUNT_BLOCK: usize = 1 << 16;

/// `DSC_c = 2 |P_c ∩ G_c| / (|P_c| + |G_c|)` for every class.
pub fn dsc_per_class(pred: &LabelMap, gt: &LabelMap) -> Result<DscReport> {
    pred.ensure_compatible(gt, "prediction vs reference")?;
    let l = gt.num_classes();
    // [gt, pred, intersection] per class
    let counts = pred
        .labels()
        .par_chunks(COUNT_BLOCK)
        .zip(gt.labels().par_chunks(COUNT_BLOCK))
        .fold(
            || vec![[0u64; 3]; l],
            |mut acc, (p, g)| {
                for (&p, &g) in p.iter().zip(g) {
                    acc[g as usize][0] += 1;
                    acc[p as usize][1] += 1;
                    if p == g {
                        acc[p as usize][2] += 1;
                    }
                }
                acc
            },
        )
        .reduce(
            || vec![[0u64; 3]; l],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    for k in 0..3 {
                        x[k] += y[k];
                    }
                }
                a
            },
        );
    let classes = counts
        .iter()
        .enumerate()
        .map(|(c, &[g, p, i])| {
            let absent = g + p == 0;
            let dsc = (!absent).then(|| 2.0 * i as f64 / (g + p) as f64);
            ClassDsc {
                class: c as Label,
                dsc,
                gt_voxels: g,
                pred_voxels: p,
                intersection: i,
                detected: i > 0,
                absent,
            }
        })
        .collect();
    Ok(DscReport {
        scan_id: String::new(),
        classes,
    })
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDomain("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile {q} outside [0, 100]"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("percentile of NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    /// Group classes present in the reference.
    pub num_classes: usize,
    pub num_detected: usize,
    pub detection_ratio: f64,
    /// `None` when no class of the group was detected.
    pub median: Option<f64>,
    pub p16: Option<f64>,
    pub p84: Option<f64>,
}

impl GroupSummary {
    pub fn percentiles_defined(&self) -> bool {
        self.median.is_some()
    }

    /// Compact table cell such as `0.83_{-0.41}^{+0.10} (78%)`; the detection
    /// ratio is appended only when below 100%.
    pub fn table_cell(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for GroupSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.median, self.p16, self.p84) {
            (Some(m), Some(lo), Some(hi)) => {
                write!(f, "{m:.2}_{{-{:.2}}}^{{+{:.2}}}", m - lo, hi - m)?
            }
            _ => write!(f, "n/a")?,
        }
        if self.detection_ratio < 1.0 {
            let mut pct = (self.detection_ratio * 100.0).round();
            if pct >= 100.0 {
                pct = 99.0;
            }
            write!(f, " ({pct:.0}%)")?;
        }
        Ok(())
    }
}

/// Median and 16th/84th percentiles over the detected classes of `group`,
/// plus the detection ratio over the group classes present in the reference.
///
/// Classes absent from both maps are ignored.
pub fn group_summary(report: &DscReport, name: &str, group: &[Label]) -> Result<GroupSummary> {
    let mut members: Vec<&ClassDsc> = Vec::new();
    for &c in group {
        let entry = report.class(c).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "group {name:?} names class {c}, report has {}",
                report.classes.len()
            ))
        })?;
        if !entry.absent && !members.iter().any(|m| m.class == c) {
            members.push(entry);
        }
    }
    if members.is_empty() {
        return Err(Error::EmptyDomain(format!(
            "group {name:?} has no class present in either map"
        )));
    }
    let present = members.iter().filter(|m| m.gt_voxels > 0).count();
    let mut scores: Vec<f64> = members
        .iter()
        .filter(|m| m.detected)
        .filter_map(|m| m.dsc)
        .collect();
    scores.sort_by(f64::total_cmp);
    let detected = scores.len();
    let (median, p16, p84) = if scores.is_empty() {
        (None, None, None)
    } else {
        (
            Some(percentile_sorted(&scores, 50.0)),
            Some(percentile_sorted(&scores, 16.0)),
            Some(percentile_sorted(&scores, 84.0)),
        )
    };
    Ok(GroupSummary {
        group: name.to_string(),
        num_classes: present,
        num_detected: detected,
        detection_ratio: if present == 0 {
            0.0
        } else {
            detected as f64 / present as f64
        },
        median,
        p16,
        p84,
    })
}

/// Named class sets, e.g. `{"ribs": [1, 2, 3]}`.
pub type LabelGroups = BTreeMap<String, Vec<Label>>;

pub fn load_label_groups(path: impl AsRef<Path>) -> Result<LabelGroups> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let groups: LabelGroups = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?;
    if let Some((name, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidSpec(format!("group {name:?} is empty")));
    }
    Ok(groups)
}

/// Every foreground class in one group named `all`.
pub fn default_groups(num_classes: usize) -> LabelGroups {
    BTreeMap::from([("all".to_string(), (1..num_classes as Label).collect())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Every voxel of the volume.
    #[default]
    Total,
    /// Reference voxels with a non-background label.
    GtForeground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub scan_id: String,
    pub differing_voxels: u64,
    pub denominator: Denominator,
    pub denominator_voxels: u64,
    pub percentage: f64,
}

/// Voxels where `pred` and `reference` disagree, as a count and a percentage.
pub fn correction_effort(
    pred: &LabelMap,
    reference: &LabelMap,
    denominator: Denominator,
) -> Result<CorrectionReport> {
    pred.geometry()
        .ensure_matches(reference.geometry(), "prediction vs reference")?;
    let (differing, foreground) = pred
        .labels()
        .par_chunks(COUNT_BLOCK)
        .zip(reference.labels().par_chunks(COUNT_BLOCK))
        .map(|(p, r)| {
            p.iter().zip(r).fold((0u64, 0u64), |(d, f), (&p, &r)| {
                (d + (p != r) as u64, f + (r != 0) as u64)
            })
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let denominator_voxels = match denominator {
        Denominator::Total => pred.num_voxels() as u64,
        Denominator::GtForeground => foreground,
    };
    if denominator_voxels == 0 {
        return Err(Error::EmptyDomain(
            "reference has no foreground voxels".into(),
        ));
    }
    Ok(CorrectionReport {
        scan_id: String::new(),
        differing_voxels: differing,
        denominator,
        denominator_voxels,
        percentage: 100.0 * differing as f64 / denominator_voxels as f64,
    })
}
