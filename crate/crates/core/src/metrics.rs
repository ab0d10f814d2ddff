//! Threshold-free evaluation: ROC-AUC via the Mann-Whitney rank statistic
//! (ties credited 0.5), a brute-force pair-counting oracle, and unweighted
//! macro-averaging across sub-datasets. Point adjustment is deliberately not
//! implemented: it rewrites detections using ground truth and inflates every
//! metric computed after it.

use std::fmt::Write as _;
use std::path::Path;

use crate::detect::ScoreSeries;
use crate::error::{Error, Result};

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "ROC-AUC is undefined with {n_pos} positive and {n_neg} negative labels"
        )));
    }
    Ok((n_pos, n_neg))
}

/// ROC-AUC from raw slices: the probability that a random positive outscores
/// a random negative, computed in O(n log n) from tie-averaged ranks.
pub fn roc_auc_from(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores do not align with {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!(
            "score at position {pos} is not finite"
        )));
    }
    let (n_pos, n_neg) = class_counts(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Walk tie groups, assigning each member the average 1-based rank.
    let mut rank_sum_pos = 0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// O(n^2) oracle: explicit enumeration of (positive, negative) pairs with 0.5
/// credit for ties.
pub fn roc_auc_bruteforce(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores do not align with {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (n_pos, n_neg) = class_counts(labels)?;
    let mut wins = 0f64;
    for (sp, lp) in scores.iter().zip(labels) {
        if *lp != 1 {
            continue;
        }
        for (sn, ln) in scores.iter().zip(labels) {
            if *ln != 0 {
                continue;
            }
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// ROC-AUC of a labeled score series.
pub fn roc_auc(scores: &ScoreSeries) -> Result<f64> {
    let labels = scores
        .labels()
        .ok_or_else(|| Error::Metric("score series carries no labels".into()))?;
    roc_auc_from(scores.scores(), labels)
}

/// Evaluation result for one dataset, or a macro-average over sub-datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset_name: String,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub sub_reports: Vec<EvalReport>,
}

impl EvalReport {
    pub fn from_scores(dataset_name: &str, scores: &ScoreSeries) -> Result<Self> {
        let labels = scores
            .labels()
            .ok_or_else(|| Error::Metric("score series carries no labels".into()))?;
        let auc = roc_auc_from(scores.scores(), labels)?;
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            dataset_name: dataset_name.to_string(),
            auc,
            n_pos,
            n_neg: labels.len() - n_pos,
            sub_reports: Vec::new(),
        })
    }

    /// Human-readable report, one metric per line; sub-dataset blocks follow
    /// the parent.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dataset: {}", self.dataset_name).unwrap();
        writeln!(out, "auc: {:.6}", self.auc).unwrap();
        writeln!(out, "n_pos: {}", self.n_pos).unwrap();
        writeln!(out, "n_neg: {}", self.n_neg).unwrap();
        for sub in &self.sub_reports {
            writeln!(out, "sub_dataset: {}", sub.dataset_name).unwrap();
            writeln!(out, "auc: {:.6}", sub.auc).unwrap();
            writeln!(out, "n_pos: {}", sub.n_pos).unwrap();
            writeln!(out, "n_neg: {}", sub.n_neg).unwrap();
        }
        out
    }

    /// CSV rows `dataset,auc,n_pos,n_neg`: sub-datasets first, then this
    /// report.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        writer
            .write_record(["dataset", "auc", "n_pos", "n_neg"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for report in self.sub_reports.iter().chain(std::iter::once(self)) {
            writer
                .write_record([
                    report.dataset_name.clone(),
                    report.auc.to_string(),
                    report.n_pos.to_string(),
                    report.n_neg.to_string(),
                ])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Unweighted mean of per-sub-dataset AUCs; counts are summed and the
/// sub-reports retained.
pub fn macro_average(name: &str, reports: Vec<EvalReport>) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Metric("cannot macro-average zero reports".into()));
    }
    let auc = reports.iter().map(|r| r.auc).sum::<f64>() / reports.len() as f64;
    Ok(EvalReport {
        dataset_name: name.to_string(),
        auc,
        n_pos: reports.iter().map(|r| r.n_pos).sum(),
        n_neg: reports.iter().map(|r| r.n_neg).sum(),
        sub_reports: reports,
    })
}
