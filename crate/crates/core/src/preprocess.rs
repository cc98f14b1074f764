//! Length normalization and LDA projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, scatter_stats};
use crate::vecstore::EmbeddingSet;

pub const LDA_FORMAT: &str = "nda-lda";

/// Scales every vector to Euclidean norm √dim.
pub fn length_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let target = (set.dim() as f64).sqrt();
    set.map_vectors(set.dim(), |i, v| length_normalize_vector(v, target).ok_or_else(|| {
        Error::invalid(format!("utterance '{}' is a zero vector and cannot be length-normalized", set.utt_id(i)))
    }))
}

pub(crate) fn length_normalize_vector(v: &[f64], target: f64) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    let s = target / norm;
    Some(v.iter().map(|x| x * s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaTransform {
    mean: Vec<f64>,
    /// `out_dim × in_dim`
    projection: DMatrix<f64>,
}

impl LdaTransform {
    pub fn new(mean: Vec<f64>, projection: DMatrix<f64>) -> Result<Self> {
        if projection.ncols() != mean.len() || projection.nrows() == 0 || projection.nrows() > mean.len() {
            return Err(Error::invalid(format!(
                "LDA projection is {}×{} for input dim {}",
                projection.nrows(),
                projection.ncols(),
                mean.len()
            )));
        }
        if mean.iter().chain(projection.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LDA parameters".into()));
        }
        Ok(LdaTransform { mean, projection })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                found: x.len(),
            });
        }
        let c = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        Ok((&self.projection * c).as_slice().to_vec())
    }

    pub fn to_doc(&self) -> LdaDoc {
        LdaDoc {
            format: LDA_FORMAT.into(),
            version: 1,
            in_dim: self.in_dim(),
            out_dim: self.out_dim(),
            mean: self.mean.clone(),
            projection: linalg::to_row_major(&self.projection),
        }
    }

    pub fn from_doc(doc: &LdaDoc) -> Result<Self> {
        if doc.format != LDA_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!("unsupported LDA document {} v{}", doc.format, doc.version)));
        }
        if doc.mean.len() != doc.in_dim || doc.projection.len() != doc.in_dim * doc.out_dim {
            return Err(Error::invalid("LDA document has inconsistent shapes"));
        }
        LdaTransform::new(doc.mean.clone(), linalg::from_row_major(doc.out_dim, doc.in_dim, &doc.projection))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaDoc {
    pub format: String,
    pub version: u32,
    pub in_dim: usize,
    pub out_dim: usize,
    pub mean: Vec<f64>,
    pub projection: Vec<f64>,
}

/// All generalized eigenvalues of `B v = λ W v`, descending, with the
/// matching W-normalized eigenvectors as rows.
pub fn lda_eigen(train: &EmbeddingSet) -> Result<(Vec<f64>, DMatrix<f64>, Vec<f64>)> {
    let st = scatter_stats(train)?;
    let (t, vals) = linalg::simultaneous_diagonalize(&st.within, &st.between)?;
    Ok((vals, t, st.mean.as_slice().to_vec()))
}

pub fn fit_lda(train: &EmbeddingSet, out_dim: usize) -> Result<LdaTransform> {
    let k = train.num_speakers();
    let max = train.dim().min(k.saturating_sub(1));
    if out_dim == 0 || out_dim > max {
        return Err(Error::invalid(format!(
            "LDA output dim must be in 1..={max} (min of input dim {} and speakers - 1 = {}), got {out_dim}",
            train.dim(),
            k.saturating_sub(1)
        )));
    }
    let (_, t, mean) = lda_eigen(train)?;
    LdaTransform::new(mean, t.rows(0, out_dim).into_owned())
}

pub fn apply_lda(t: &LdaTransform, set: &EmbeddingSet) -> Result<EmbeddingSet> {
    if set.dim() != t.in_dim() {
        return Err(Error::Dimension {
            expected: t.in_dim(),
            found: set.dim(),
        });
    }
    set.map_vectors(t.out_dim(), |_, v| t.apply_vector(v))
}
