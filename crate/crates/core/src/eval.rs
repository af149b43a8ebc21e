//! Per-class IoU, seen/unseen mIoU, hIoU and the seen-unseen bias gap.
//!
//! Every evaluated feature vector plays the role of one pixel.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.n || predicted >= self.n {
            return Err(Error::Invalid(format!(
                "label pair ({truth}, {predicted}) out of range for {} classes",
                self.n
            )));
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn off_diagonal(&self) -> u64 {
        self.total() - (0..self.n).map(|i| self.get(i, i)).sum::<u64>()
    }
}

pub fn confusion(predictions: &[usize], truths: &[usize], n: usize) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut c = ConfusionCounts::zeros(n);
    for (&p, &t) in predictions.iter().zip(truths) {
        c.add(t, p)?;
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)` per class; `None` where the class never occurs.
pub fn iou_per_class(conf: &ConfusionCounts) -> Vec<Option<f64>> {
    let n = conf.n();
    (0..n)
        .map(|k| {
            let tp = conf.get(k, k);
            let fn_: u64 = (0..n).filter(|&j| j != k).map(|j| conf.get(k, j)).sum();
            let fp: u64 = (0..n).filter(|&i| i != k).map(|i| conf.get(i, k)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Harmonic mean of seen and unseen mIoU; zero when either side is zero.
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    if miou_seen <= 0.0 || miou_unseen <= 0.0 {
        return 0.0;
    }
    2.0 * miou_seen * miou_unseen / (miou_seen + miou_unseen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_overall: Option<f64>,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub hiou: Option<f64>,
    /// `miou_seen - miou_unseen`.
    pub bias_gap: Option<f64>,
}

fn mean_present<'a>(values: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn report(conf: &ConfusionCounts, unseen_ids: &BTreeSet<usize>) -> MetricsReport {
    let per_class_iou = iou_per_class(conf);
    let miou_overall = mean_present(per_class_iou.iter());
    let miou_seen = mean_present(
        per_class_iou
            .iter()
            .enumerate()
            .filter(|(k, _)| !unseen_ids.contains(k))
            .map(|(_, v)| v),
    );
    let miou_unseen = mean_present(
        per_class_iou
            .iter()
            .enumerate()
            .filter(|(k, _)| unseen_ids.contains(k))
            .map(|(_, v)| v),
    );
    let (hiou_v, bias_gap) = match (miou_seen, miou_unseen) {
        (Some(s), Some(u)) => (Some(hiou(s, u)), Some(s - u)),
        _ => (None, None),
    };
    MetricsReport {
        per_class_iou,
        miou_overall,
        miou_seen,
        miou_unseen,
        hiou: hiou_v,
        bias_gap,
    }
}
