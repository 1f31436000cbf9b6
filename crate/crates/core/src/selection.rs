//! Feature selection: missing-proportion filter, zero-entropy filter and
//! accuracy-weighted cumulative importance ranking.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::features::{StatFeatureVector, STAT_FEATURES};
use crate::rng;

/// Importances from one ranking algorithm together with its accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceReport {
    pub algorithm: String,
    pub accuracy: f64,
    pub importances: Vec<f64>,
}

impl ImportanceReport {
    pub fn validate(&self) -> Result<()> {
        if self.importances.len() != STAT_FEATURES {
            return Err(Error::Schema(format!(
                "report {:?} has {} importances, expected {STAT_FEATURES}",
                self.algorithm,
                self.importances.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Schema(format!(
                "report {:?} accuracy {} outside [0, 1]",
                self.algorithm, self.accuracy
            )));
        }
        if let Some(v) = self.importances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Schema(format!(
                "report {:?} has invalid importance {v}",
                self.algorithm
            )));
        }
        let sum: f64 = self.importances.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Schema(format!(
                "report {:?} importances sum to {sum}, expected 1",
                self.algorithm
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ImportanceReport =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("importance report: {e}")))?;
        r.validate()?;
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    Missing,
    ZeroEntropy,
    LowImportance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub index: usize,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub kept_indices: Vec<usize>,
    pub dropped: Vec<Dropped>,
    pub scores: Vec<f64>,
}

fn nonempty(dataset: &[StatFeatureVector]) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::Argument("feature selection needs at least one flow".into()))
    } else {
        Ok(())
    }
}

/// Features whose masked fraction is strictly above `threshold`.
pub fn missing_proportion_filter(dataset: &[StatFeatureVector], threshold: f64) -> Result<BTreeSet<usize>> {
    nonempty(dataset)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("missing threshold {threshold} outside (0, 1)")));
    }
    let n = dataset.len() as f64;
    Ok((0..STAT_FEATURES)
        .filter(|&j| {
            let masked = dataset.iter().filter(|v| v.missing()[j]).count();
            masked as f64 / n > threshold
        })
        .collect())
}

/// Shannon entropy (nats) of an equal-width histogram over `values`.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let Some(&first) = values.first() else {
        return 0.0;
    };
    let (lo, hi) = values
        .iter()
        .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let width = hi - lo;
    for &v in values {
        let b = (((v - lo) / width) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Features whose unmasked values have zero histogram entropy.
pub fn entropy_filter(dataset: &[StatFeatureVector], bins: usize) -> Result<BTreeSet<usize>> {
    nonempty(dataset)?;
    if bins < 2 {
        return Err(Error::Argument(format!("entropy needs at least 2 bins, got {bins}")));
    }
    Ok((0..STAT_FEATURES)
        .filter(|&j| {
            let col: Vec<f64> = dataset.iter().filter_map(|v| v.get(j)).collect();
            histogram_entropy(&col, bins) == 0.0
        })
        .collect())
}

/// `C_j = (1/n) Σ_i acc_i · v_ij` over the reports.
pub fn cumulative_importance(reports: &[ImportanceReport]) -> Result<Vec<f64>> {
    if reports.is_empty() {
        return Err(Error::Argument("cumulative importance needs at least one report".into()));
    }
    for r in reports {
        if r.importances.len() != STAT_FEATURES {
            return Err(Error::Schema(format!(
                "report {:?} has {} importances, expected {STAT_FEATURES}",
                r.algorithm,
                r.importances.len()
            )));
        }
    }
    let n = reports.len() as f64;
    Ok((0..STAT_FEATURES)
        .map(|j| reports.iter().map(|r| r.accuracy * r.importances[j]).sum::<f64>() / n)
        .collect())
}

/// Drops the lowest-scored `⌊drop_fraction · |survivors|⌋` survivors.
///
/// Ranking is by score descending with ties to the lower index. The result
/// lists only the importance-based drops; kept indices are ascending.
pub fn select_by_importance(scores: &[f64], survivors: &BTreeSet<usize>, drop_fraction: f64) -> SelectionResult {
    let mut ranked: Vec<usize> = survivors.iter().copied().collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let drop = (drop_fraction * ranked.len() as f64).floor() as usize;
    let cut = ranked.len() - drop.min(ranked.len());
    let mut kept = ranked[..cut].to_vec();
    kept.sort_unstable();
    let mut dropped: Vec<Dropped> = ranked[cut..]
        .iter()
        .map(|&index| Dropped {
            index,
            reason: DropReason::LowImportance,
        })
        .collect();
    dropped.sort_by_key(|d| d.index);
    SelectionResult {
        kept_indices: kept,
        dropped,
        scores: scores.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub missing_threshold: f64,
    pub entropy_bins: usize,
    pub drop_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            missing_threshold: 0.5,
            entropy_bins: 32,
            drop_fraction: 0.30,
        }
    }
}

/// Runs both filters, then importance ranking over the survivors.
///
/// Every index appears once, either kept or dropped with the first rule
/// that removed it (missing, then zero entropy, then importance).
pub fn select_features(
    dataset: &[StatFeatureVector],
    reports: &[ImportanceReport],
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    if !(0.0..1.0).contains(&cfg.drop_fraction) {
        return Err(Error::Argument(format!(
            "drop fraction {} outside [0, 1)",
            cfg.drop_fraction
        )));
    }
    let missing = missing_proportion_filter(dataset, cfg.missing_threshold)?;
    let flat = entropy_filter(dataset, cfg.entropy_bins)?;
    let scores = cumulative_importance(reports)?;
    let survivors: BTreeSet<usize> = (0..STAT_FEATURES)
        .filter(|j| !missing.contains(j) && !flat.contains(j))
        .collect();
    let mut result = select_by_importance(&scores, &survivors, cfg.drop_fraction);
    for j in 0..STAT_FEATURES {
        let reason = if missing.contains(&j) {
            DropReason::Missing
        } else if flat.contains(&j) {
            DropReason::ZeroEntropy
        } else {
            continue;
        };
        result.dropped.push(Dropped { index: j, reason });
    }
    result.dropped.sort_by_key(|d| d.index);
    Ok(result)
}

/// Importance of each input column as the accuracy lost when that column
/// is shuffled, normalized to sum 1 (uniform when nothing is lost).
pub fn permutation_importance(
    model: &Classifier,
    rows: &[Vec<f64>],
    labels: &[usize],
    seed: u64,
) -> Result<ImportanceReport> {
    let dim = model.scaler.dim();
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Argument(format!(
            "permutation importance needs matching nonempty rows and labels ({} vs {})",
            rows.len(),
            labels.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Argument(format!(
            "rows have {} features, model expects {dim}",
            r.len()
        )));
    }
    let base = model.accuracy(rows, labels)?;
    let mut deltas = Vec::with_capacity(dim);
    let mut shuffled = rows.to_vec();
    for j in 0..dim {
        let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        col.shuffle(&mut rng::stream(seed, "permutation-importance", j as u64));
        for (r, v) in shuffled.iter_mut().zip(&col) {
            r[j] = *v;
        }
        let acc = model.accuracy(&shuffled, labels)?;
        deltas.push((base - acc).max(0.0));
        for (r, orig) in shuffled.iter_mut().zip(rows) {
            r[j] = orig[j];
        }
    }
    let total: f64 = deltas.iter().sum();
    let importances = if total > 0.0 {
        deltas.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / dim as f64; dim]
    };
    Ok(ImportanceReport {
        algorithm: "permutation".into(),
        accuracy: base,
        importances,
    })
}
