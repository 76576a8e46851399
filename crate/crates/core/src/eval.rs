//! Accuracy, prediction entropy, per-client records and adaptation curves.

use serde::Serialize;

use crate::data::TestClient;
use crate::error::{Error, Result};
use crate::fedtta::AdaptStepTrace;
use crate::tensor::{ops, Tensor};

/// Exact correct/count pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Accuracy {
    pub correct: usize,
    pub count: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (m, c) = logits.dims2().ok_or_else(|| Error::Shape {
        op: "argmax_rows",
        shapes: vec![logits.shape().to_vec()],
    })?;
    Ok((0..m)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    let pred = argmax_rows(logits)?;
    if pred.is_empty() {
        return Err(Error::Domain {
            op: "top1_accuracy",
            message: "empty input".into(),
        });
    }
    if pred.len() != labels.len() {
        return Err(Error::Shape {
            op: "top1_accuracy",
            shapes: vec![logits.shape().to_vec(), vec![labels.len()]],
        });
    }
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(Accuracy {
        correct,
        count: labels.len(),
    })
}

/// Mean over rows of the entropy of `softmax(logits)`, natural log.
pub fn mean_prediction_entropy(logits: &Tensor) -> Result<f64> {
    Ok(ops::mean(&ops::entropy_logits(&logits.detach())?).item())
}

/// Scores a new client's predictions. The only place its labels are read.
pub fn score_test_client(client: &TestClient, logits: &Tensor) -> Result<Accuracy> {
    top1_accuracy(logits, client.labels().reveal())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub client: usize,
    pub split: Split,
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
    pub round: usize,
    pub method: String,
}

impl EvalRecord {
    pub fn new(client: usize, split: Split, acc: Accuracy, round: usize, method: &str) -> Self {
        Self {
            client,
            split,
            correct: acc.correct,
            count: acc.count,
            accuracy: acc.fraction(),
            round,
            method: method.to_string(),
        }
    }
}

/// Unweighted mean of per-client accuracies.
pub fn mean_accuracy(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub accuracy: Option<f64>,
    pub personalization_loss: f64,
    pub entropy: f64,
}

/// One row per adaptation step.
pub fn mismatch_curve(trace: &[AdaptStepTrace]) -> Vec<CurveRow> {
    trace
        .iter()
        .map(|t| CurveRow {
            step: t.step,
            accuracy: t.accuracy,
            personalization_loss: t.personalization_loss,
            entropy: t.entropy,
        })
        .collect()
}
