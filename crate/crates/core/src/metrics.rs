//! Classification and regression measures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("labels and scores differ in length ({labels} vs {scores})")]
    Length { labels: usize, scores: usize },
    #[error("metric undefined on an empty batch")]
    Empty,
    #[error("AUC needs at least one positive and one negative label")]
    SingleClass,
}

fn check(labels: &[f64], scores: &[f64]) -> Result<(), MetricError> {
    if labels.len() != scores.len() {
        return Err(MetricError::Length {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Global ROC AUC by the rank-sum (Mann-Whitney) formulation; tied scores
/// count one half. Labels `>= 0.5` are positive.
pub fn auc(labels: &[f64], scores: &[f64]) -> Result<f64, MetricError> {
    check(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] >= 0.5).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn confusion(labels: &[f64], scores: &[f64], threshold: f64) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0.0, 0.0, 0.0, 0.0);
    for (&l, &s) in labels.iter().zip(scores) {
        match (l >= 0.5, s >= threshold) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fneg += 1.0,
        }
    }
    (tp, fp, tn, fneg)
}

/// F1 of the predictions `score >= threshold`; zero when precision and recall are both zero.
pub fn f1(labels: &[f64], scores: &[f64], threshold: f64) -> Result<f64, MetricError> {
    check(labels, scores)?;
    let (tp, fp, _, fneg) = confusion(labels, scores, threshold);
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn accuracy(labels: &[f64], scores: &[f64], threshold: f64) -> Result<f64, MetricError> {
    check(labels, scores)?;
    let (tp, _, tn, _) = confusion(labels, scores, threshold);
    Ok((tp + tn) / labels.len() as f64)
}

pub fn rmse(labels: &[f64], scores: &[f64]) -> Result<f64, MetricError> {
    check(labels, scores)?;
    let se: f64 = labels.iter().zip(scores).map(|(l, s)| (l - s) * (l - s)).sum();
    Ok((se / labels.len() as f64).sqrt())
}

pub fn mae(labels: &[f64], scores: &[f64]) -> Result<f64, MetricError> {
    check(labels, scores)?;
    let ae: f64 = labels.iter().zip(scores).map(|(l, s)| (l - s).abs()).sum();
    Ok(ae / labels.len() as f64)
}

/// Metric driving rewards and model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Auc,
    Rmse,
}

impl Metric {
    pub fn evaluate(self, labels: &[f64], scores: &[f64]) -> Result<f64, MetricError> {
        match self {
            Metric::Auc => auc(labels, scores),
            Metric::Rmse => rmse(labels, scores),
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Auc)
    }

    /// Signed improvement from `before` to `after`; positive is better.
    pub fn gain(self, before: f64, after: f64) -> f64 {
        if self.higher_is_better() {
            after - before
        } else {
            before - after
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        self.gain(b, a) > 0.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Rmse => "rmse",
        }
    }
}

/// Every measure at once; AUC is `None` on single-class batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
    pub rmse: f64,
    pub mae: f64,
}

impl EvalReport {
    pub fn compute(labels: &[f64], scores: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            auc: auc(labels, scores).ok(),
            f1: f1(labels, scores, 0.5)?,
            accuracy: accuracy(labels, scores, 0.5)?,
            rmse: rmse(labels, scores)?,
            mae: mae(labels, scores)?,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Auc => self.auc,
            Metric::Rmse => Some(self.rmse),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[1.0, 0.0], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 0.0, 1.0, 0.0], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 1.0], &[0.3, 0.4]), Err(MetricError::SingleClass));
        assert_eq!(auc(&[1.0], &[0.3, 0.4]), Err(MetricError::Length { labels: 1, scores: 2 }));
    }

    #[test]
    fn f1_and_accuracy_hand_confusion() {
        let labels = [1.0, 1.0, 0.0, 0.0];
        let scores = [0.9, 0.4, 0.6, 0.1];
        assert_eq!(accuracy(&labels, &scores, 0.5).unwrap(), 0.5);
        assert_eq!(f1(&labels, &scores, 0.5).unwrap(), 0.5);
        assert_eq!(f1(&labels, &[0.0; 4], 0.5).unwrap(), 0.0);
        assert_eq!(f1(&labels, &labels, 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&labels, &labels, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn regression_metrics() {
        assert_eq!(rmse(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(mae(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(rmse(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(mae(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn metric_direction() {
        assert!(Metric::Auc.gain(0.6, 0.7) > 0.0);
        assert!(Metric::Rmse.gain(0.6, 0.5) > 0.0);
        assert!(Metric::Rmse.better(0.4, 0.5));
    }
}
