use crate::error::{Error, Result};

/// `counts[truth · K + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, pred: &[u32], truth: &[u32]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&v| v as usize >= k) {
            return Err(Error::invalid(format!("class id {bad} outside [0, {k})")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let fn_: u64 = (0..k).map(|p| self.count(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.count(t, c)).sum::<u64>() - tp;
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 when no pixel was counted.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Mean IoU of one prediction and the per-class IoU vector.
pub fn miou(pred: &[u32], truth: &[u32], num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if pred.is_empty() {
        return Err(Error::invalid("empty label maps"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, truth)?;
    Ok((cm.mean_iou(), cm.per_class_iou()))
}
