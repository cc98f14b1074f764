//! Scatter statistics and simultaneous diagonalization of (W, B) pairs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::vecstore::EmbeddingSet;

/// Relative eigenvalue floor below which W is treated as singular.
const SINGULAR_RTOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ScatterStats {
    /// Global mean over all vectors.
    pub mean: DVector<f64>,
    /// Pooled within-class covariance, denominator N - K.
    pub within: DMatrix<f64>,
    /// Covariance of the class means, denominator K - 1.
    pub between: DMatrix<f64>,
    pub num_vectors: usize,
    pub num_classes: usize,
}

pub fn scatter_stats(set: &EmbeddingSet) -> Result<ScatterStats> {
    let dim = set.dim();
    let groups = set.speaker_groups();
    let k = groups.len();
    let n = set.len();
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 speakers, found {k}")));
    }
    if n <= k {
        return Err(Error::invalid(
            "no within-class degrees of freedom: every speaker has a single utterance",
        ));
    }
    let mut mean = DVector::zeros(dim);
    for v in set.vectors() {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;

    let mut within = DMatrix::zeros(dim, dim);
    let mut class_means = Vec::with_capacity(k);
    for (_, rows) in &groups {
        let mut m = DVector::zeros(dim);
        for &i in rows {
            m += DVector::from_column_slice(set.vector(i));
        }
        m /= rows.len() as f64;
        for &i in rows {
            let d = DVector::from_column_slice(set.vector(i)) - &m;
            within.ger(1.0, &d, &d, 1.0);
        }
        class_means.push(m);
    }
    within /= (n - k) as f64;

    let mut grand = DVector::zeros(dim);
    for m in &class_means {
        grand += m;
    }
    grand /= k as f64;
    let mut between = DMatrix::zeros(dim, dim);
    for m in &class_means {
        let d = m - &grand;
        between.ger(1.0, &d, &d, 1.0);
    }
    between /= (k - 1) as f64;

    Ok(ScatterStats {
        mean,
        within,
        between,
        num_vectors: n,
        num_classes: k,
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
/// Returns `(values, vectors)` with eigenvectors as columns.
pub fn sorted_sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Finds `T` with `T W Tᵀ = I` and `T B Tᵀ = diag(λ)`, λ sorted descending.
///
/// W is whitened through its eigendecomposition, then the whitened B is
/// diagonalized. Eigenvalues are returned unclamped.
pub fn simultaneous_diagonalize(
    within: &DMatrix<f64>,
    between: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (w_vals, w_vecs) = sorted_sym_eigen(within);
    let max = w_vals.first().copied().unwrap_or(0.0);
    let min = w_vals.last().copied().unwrap_or(0.0);
    if !(max > 0.0) || min <= SINGULAR_RTOL * max || !min.is_finite() {
        return Err(Error::Singular(format!(
            "within-class covariance has eigenvalue range [{min:.3e}, {max:.3e}]; \
             reduce dimension (LDA or truncation) first"
        )));
    }
    let scale = DMatrix::from_diagonal(&DVector::from_iterator(
        w_vals.len(),
        w_vals.iter().map(|v| 1.0 / v.sqrt()),
    ));
    let whiten = scale * w_vecs.transpose();
    let wb = symmetrize(&(&whiten * between * whiten.transpose()));
    let (vals, vecs) = sorted_sym_eigen(&wb);
    let t = vecs.transpose() * whiten;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("simultaneous diagonalization".into()));
    }
    Ok((t, vals))
}

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}
