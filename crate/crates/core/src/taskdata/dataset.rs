use ndarray::{Array2, Axis};

use super::TaskDataError;

/// A labeled, dense feature matrix (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self, TaskDataError> {
        if features.nrows() != labels.len() {
            return Err(TaskDataError::SchemaMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(TaskDataError::SchemaMismatch(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(Self {
            features: features.as_standard_layout().to_owned(),
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Rows of every part in order. Parts must agree on dimension and
    /// class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset, TaskDataError> {
        let first = parts
            .first()
            .ok_or_else(|| TaskDataError::SchemaMismatch("nothing to concatenate".into()))?;
        if let Some(p) = parts
            .iter()
            .find(|p| p.dim() != first.dim() || p.class_count != first.class_count)
        {
            return Err(TaskDataError::SchemaMismatch(format!(
                "cannot join {}-dim/{}-class data with {}-dim/{}-class data",
                first.dim(),
                first.class_count,
                p.dim(),
                p.class_count
            )));
        }
        let views: Vec<_> = parts.iter().map(|p| p.features.view()).collect();
        let features =
            ndarray::concatenate(Axis(0), &views).map_err(|e| TaskDataError::SchemaMismatch(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Dataset::new(features, labels, first.class_count)
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Canonical little-endian bytes, used to compare datasets for identity.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.features.len() * 8 + self.labels.len() * 8);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}
