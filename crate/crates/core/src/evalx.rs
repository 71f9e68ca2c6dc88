//! Accuracy, F1 and the cross-domain gap matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::losses::coral_value;
use crate::ndgraph::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

/// Accuracy and F1 with class 1 as the positive class.
pub fn accuracy_f1(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    accuracy_f1_for(predictions, labels, 1)
}

/// Accuracy and F1 treating `positive` as the positive class. F1 is 0 when
/// `2·tp + fp + fn` is 0.
pub fn accuracy_f1_for(predictions: &[usize], labels: &[usize], positive: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::contract(format!(
            "accuracy_f1 needs equal nonzero lengths, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == positive, y == positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    let denom = 2 * c.tp + c.fp + c.fn_;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    };
    Ok(Metrics {
        accuracy,
        f1,
        confusion: c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapMatrix {
    pub domains: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// Pairwise CORAL distances between domain batches; symmetric with an
/// exactly zero diagonal. Pairs are evaluated under `mode`.
pub fn domain_gap_matrix(features: &[(String, Tensor)], mode: Mode) -> Result<GapMatrix> {
    if features.len() < 2 {
        return Err(Error::contract("gap matrix needs at least two domains"));
    }
    let d = features[0].1.cols();
    for (id, t) in features {
        if t.cols() != d {
            return Err(Error::Shape {
                op: "domain_gap_matrix",
                left: features[0].1.shape(),
                right: t.shape(),
            });
        }
        if t.rows() < 2 {
            return Err(Error::DegenerateBatch(format!("domain {id} has fewer than 2 rows")));
        }
    }
    let k = features.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let values = exec::try_map(mode, &pairs, |&(i, j)| coral_value(&features[i].1, &features[j].1))?;
    let mut matrix = vec![vec![0.0; k]; k];
    for (&(i, j), v) in pairs.iter().zip(values) {
        matrix[i][j] = v;
        matrix[j][i] = v;
    }
    Ok(GapMatrix {
        domains: features.iter().map(|(id, _)| id.clone()).collect(),
        matrix,
    })
}
