use serde::{Deserialize, Serialize};

use super::MicroDenseNet;
use crate::data::{LabelSet, LabeledImage};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: LabelSet,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: LabelSet) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_pairs(labels: LabelSet, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::validation(format!(
                "{} truths but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(labels);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.counts.len();
        if truth >= k || predicted >= k {
            return Err(Error::validation(format!(
                "class index out of range for {k} classes: ({truth}, {predicted})"
            )));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.counts.len()).map(|k| self.counts[k][k]).sum()
    }

    /// `trace / N`; `None` for an empty matrix.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.correct() as f64 / n as f64)
    }

    /// Recall per class; `None` where the class has no examples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.counts.len())
            .map(|k| {
                let row = self.row_sum(k);
                (row > 0).then(|| self.counts[k][k] as f64 / row as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub predicted: Vec<usize>,
}

pub fn evaluate(model: &MicroDenseNet, images: &[LabeledImage]) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::validation("test set is empty"));
    }
    let pred = model.predict(images)?;
    let truth: Vec<usize> = images.iter().map(|i| i.label.index).collect();
    let predicted: Vec<usize> = pred.labels.iter().map(|l| l.index).collect();
    let confusion = ConfusionMatrix::from_pairs(model.labels().clone(), &truth, &predicted)?;
    Ok(Evaluation {
        overall_accuracy: confusion.overall_accuracy().expect("non-empty"),
        per_class_accuracy: confusion.per_class_recall(),
        confusion,
        predicted,
    })
}
