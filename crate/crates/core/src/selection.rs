//! Ranking scans by ensemble uncertainty and budgeted selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::ScanReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScan {
    pub scan_id: String,
    pub mean_uncertainty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_percentage: Option<f64>,
    /// Annotation cost in any unit (voxels, minutes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

impl From<&ScanReport> for CandidateScan {
    fn from(r: &ScanReport) -> Self {
        Self {
            scan_id: r.scan_id.clone(),
            mean_uncertainty: r.mean_uncertainty,
            correction_percentage: None,
            cost: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Least uncertain first.
    #[default]
    Lowest,
    Highest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Budget {
    /// At most this many scans.
    Count(usize),
    /// Cumulative cost may not exceed this value.
    CostCap(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    pub budget: Budget,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        match self.budget {
            Budget::Count(0) => Err(Error::InvalidSpec(
                "budget must select at least one scan".into(),
            )),
            Budget::CostCap(c) if !(c > 0.0 && c.is_finite()) => Err(Error::InvalidSpec(format!(
                "cost cap must be positive, got {c}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Sorts by mean uncertainty in the requested direction; equal values are
/// ordered by `scan_id`.
pub fn rank(candidates: &[CandidateScan], mode: SelectionMode) -> Vec<CandidateScan> {
    let mut out = candidates.to_vec();
    out.sort_by(|a, b| {
        let by_uc = a.mean_uncertainty.total_cmp(&b.mean_uncertainty);
        let by_uc = match mode {
            SelectionMode::Lowest => by_uc,
            SelectionMode::Highest => by_uc.reverse(),
        };
        by_uc.then_with(|| a.scan_id.cmp(&b.scan_id))
    });
    out
}

/// Longest prefix of the ranking that fits the budget. Under a cost cap the
/// prefix ends at the first scan that no longer fits.
pub fn select(
    candidates: &[CandidateScan],
    policy: &SelectionPolicy,
) -> Result<Vec<CandidateScan>> {
    if candidates.is_empty() {
        return Err(Error::EmptyDomain("no candidate scans".into()));
    }
    policy.validate()?;
    let ranked = rank(candidates, policy.mode);
    match policy.budget {
        Budget::Count(k) => Ok(ranked.into_iter().take(k).collect()),
        Budget::CostCap(cap) => {
            let mut spent = 0.0;
            let mut out = Vec::new();
            for c in ranked {
                let cost = c.cost.ok_or_else(|| {
                    Error::InvalidSpec(format!("scan {:?} has no cost estimate", c.scan_id))
                })?;
                if spent + cost > cap {
                    break;
                }
                spent += cost;
                out.push(c);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedScan {
    pub scan_id: String,
    pub mean_uncertainty: f64,
    /// 1-based position in the ranking.
    pub rank: usize,
    pub selected: bool,
}

/// Full ranking with the selected prefix flagged.
pub fn ranking_table(
    candidates: &[CandidateScan],
    policy: &SelectionPolicy,
) -> Result<Vec<RankedScan>> {
    let chosen = select(candidates, policy)?.len();
    Ok(rank(candidates, policy.mode)
        .into_iter()
        .enumerate()
        .map(|(i, c)| RankedScan {
            scan_id: c.scan_id,
            mean_uncertainty: c.mean_uncertainty,
            rank: i + 1,
            selected: i < chosen,
        })
        .collect())
}

/// Reads candidates from a JSON array file or from every `*.json` report in
/// a directory (sorted by file name).
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateScan>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        return files.iter().map(|f| read_candidate(f)).collect();
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
}

fn read_candidate(path: &Path) -> Result<CandidateScan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} pairs", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of fractional ranks (ties share their average rank).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    pearson(&fractional_ranks(xs), &fractional_ranks(ys))
}

pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Correlation block; coefficients are `None` when undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

impl CorrelationSummary {
    pub fn compute(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let undefined = |e: Error| match e {
            Error::UndefinedCorrelation(reason) => Ok(reason),
            other => Err(other),
        };
        let (pearson, p_err) = match pearson(xs, ys) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(undefined(e)?)),
        };
        let (spearman, s_err) = match spearman(xs, ys) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(undefined(e)?)),
        };
        Ok(Self {
            pearson,
            spearman,
            n: xs.len(),
            undefined_reason: p_err.or(s_err),
        })
    }
}
