//! Ranking and confusion-matrix metrics. The positive class is always
//! `Label::Abnormal` (+1), so sensitivity is the abnormal detection rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AurocMode {
    /// Mann-Whitney statistic over the labelled scores.
    Binary,
    /// Pools `(score, y == +1)` with `(1 - score, y == -1)`.
    Micro,
}

/// Twice the Mann-Whitney U statistic: each correctly ordered pair counts 2,
/// each tie 1. Returns `(2U, positives, negatives)`.
fn twice_u(pairs: &mut [(f64, bool)]) -> (u128, u128, u128) {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut below_neg, mut acc) = (0u128, 0u128);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        acc += pos * (2 * below_neg + neg);
        below_neg += neg;
        i = j;
    }
    let total_pos = pairs.iter().filter(|p| p.1).count() as u128;
    (acc, total_pos, below_neg)
}

pub fn auroc(scores: &[f64], labels: &[Label], mode: AurocMode) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(labels).map(|(&s, l)| (s, l.is_positive())).collect();
    if mode == AurocMode::Micro {
        pairs.extend(scores.iter().zip(labels).map(|(&s, l)| (1.0 - s, !l.is_positive())));
    }
    let (u2, p, n) = twice_u(&mut pairs);
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {p} positive and {n} negative"
        )));
    }
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        100.0 * (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `None` when there are no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| 100.0 * self.tp as f64 / d as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| 100.0 * self.tn as f64 / d as f64)
    }
}

pub fn confusion_stats(predicted: &[Label], truth: &[Label]) -> Result<Confusion> {
    if predicted.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions but {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("no samples to score".into()));
    }
    let mut c = Confusion::default();
    for (p, t) in predicted.iter().zip(truth) {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-averaged AUROC; `None` when a class is missing.
    pub auroc: Option<f64>,
    pub auroc_binary: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub n_samples: usize,
}

pub const REPORT_CSV_HEADER: &str = "auroc,auroc_binary,accuracy,sensitivity,specificity,tp,fp,tn,fn,n_samples";

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// Scores are thresholded at 0.5 for the confusion counts.
    pub fn from_scores(scores: &[f64], truth: &[Label]) -> Result<Self> {
        let predicted: Vec<Label> = scores
            .iter()
            .map(|&s| if s >= 0.5 { Label::Abnormal } else { Label::Normal })
            .collect();
        let confusion = confusion_stats(&predicted, truth)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            auroc: defined(auroc(scores, truth, AurocMode::Micro))?,
            auroc_binary: defined(auroc(scores, truth, AurocMode::Binary))?,
            accuracy: confusion.accuracy(),
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            confusion,
            n_samples: truth.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        let c = &self.confusion;
        format!(
            "{},{},{:.6},{},{},{},{},{},{},{}",
            fmt_opt(self.auroc),
            fmt_opt(self.auroc_binary),
            self.accuracy,
            fmt_opt(self.sensitivity),
            fmt_opt(self.specificity),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            self.n_samples
        )
    }
}
