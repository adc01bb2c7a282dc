//! Labeled feature batches: the unit every loss operates on.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Which camera family a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visible,
    Thermal,
}

impl Modality {
    pub fn tag(self) -> char {
        match self {
            Modality::Visible => 'v',
            Modality::Thermal => 't',
        }
    }

    pub fn from_tag(tag: &str) -> Option<Modality> {
        match tag {
            "v" => Some(Modality::Visible),
            "t" => Some(Modality::Thermal),
            _ => None,
        }
    }

    pub fn opposite(self) -> Modality {
        match self {
            Modality::Visible => Modality::Thermal,
            Modality::Thermal => Modality::Visible,
        }
    }
}

/// Features plus per-row identity label and modality tag.
#[derive(Debug, Clone)]
pub struct LabeledBatch<T> {
    pub features: Array2<T>,
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(
        features: Array2<T>,
        identities: Vec<usize>,
        modalities: Vec<Modality>,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 || features.ncols() == 0 {
            return Err(Error::InvalidArgument("labeled batch: empty features".into()));
        }
        if identities.len() != n || modalities.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "labeled batch: {} rows vs {} identities vs {} modality tags",
                n,
                identities.len(),
                modalities.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("labeled batch features".into()));
        }
        Ok(LabeledBatch { features, identities, modalities })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row indices of one modality, in batch order.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.modalities[i] == modality).collect()
    }

    /// Owned feature submatrix of one modality, rows in batch order.
    pub fn features_of(&self, modality: Modality) -> Array2<T> {
        let idx = self.indices_of(modality);
        let mut out = Array2::zeros((idx.len(), self.dim()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
        }
        out
    }

    /// Sub-batch of one modality (features, identities), rows in batch order.
    pub fn split(&self, modality: Modality) -> (Array2<T>, Vec<usize>) {
        let idx = self.indices_of(modality);
        let mut out = Array2::zeros((idx.len(), self.dim()));
        let mut ids = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
            ids.push(self.identities[i]);
        }
        (out, ids)
    }

    /// Distinct identities present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.identities.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Same rows, different feature matrix (labels carried over).
    pub fn with_features(&self, features: Array2<T>) -> Result<Self> {
        LabeledBatch::new(features, self.identities.clone(), self.modalities.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn split_preserves_order_and_labels() {
        let b = LabeledBatch::new(
            array![[1.0], [2.0], [3.0], [4.0]],
            vec![0, 1, 0, 1],
            vec![Modality::Visible, Modality::Thermal, Modality::Visible, Modality::Thermal],
        )
        .unwrap();
        let (fv, iv) = b.split(Modality::Visible);
        assert_eq!(fv, array![[1.0], [3.0]]);
        assert_eq!(iv, vec![0, 0]);
        assert_eq!(b.classes(), vec![0, 1]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let r = LabeledBatch::new(array![[1.0]], vec![0, 1], vec![Modality::Visible]);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }
}
