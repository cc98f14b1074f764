//! Two-covariance PLDA.
//!
//! The model lives in a transformed space `y = T (x - m)` where the
//! within-class covariance is the identity and the prior over class means is
//! `N(0, diag(ε))`. For `n` vectors of one class, each dimension `j` is
//! jointly Gaussian with covariance `ε_j J_n + I_n`, which gives the closed
//! form used by [`log_marginal`]:
//!
//! ```text
//! log p(y_1..y_n) = Σ_j [ -n/2 log 2π - 1/2 log(1 + n ε_j)
//!                         - 1/2 (Σ_i y_ij² - n² ε_j / (n ε_j + 1) ŷ_j²) ]
//! ```
//!
//! with `ŷ_j` the per-dimension sample mean of the `n` vectors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, scatter_stats};
use crate::vecstore::EmbeddingSet;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::invalid("marginal of zero vectors is undefined"));
    }
    for r in rows {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: r.len(),
            });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input vector".into()));
        }
    }
    Ok(())
}

/// Exact log density of `rows` under one class of the latent model with
/// prior variances `epsilon` and unit within-class variance.
pub fn log_marginal<R: AsRef<[f64]>>(epsilon: &[f64], rows: &[R]) -> Result<f64> {
    check_rows(epsilon.len(), rows)?;
    let n = rows.len() as f64;
    let mut total = 0.0;
    for (j, &eps) in epsilon.iter().enumerate() {
        let (mut sum, mut sq) = (0.0, 0.0);
        for r in rows {
            let y = r.as_ref()[j];
            sum += y;
            sq += y * y;
        }
        total += -0.5 * n * LN_2PI - 0.5 * (n * eps).ln_1p() - 0.5 * (sq - eps / (1.0 + n * eps) * sum * sum);
    }
    Ok(total)
}

/// Gradients of [`log_marginal`]: value, d/d rows, and d/d log ε.
pub struct MarginalGrad {
    pub value: f64,
    pub rows: Vec<Vec<f64>>,
    pub log_epsilon: Vec<f64>,
}

pub fn log_marginal_grad<R: AsRef<[f64]>>(epsilon: &[f64], rows: &[R]) -> Result<MarginalGrad> {
    let dim = epsilon.len();
    check_rows(dim, rows)?;
    let n = rows.len() as f64;
    let mut value = 0.0;
    let mut grad_rows = vec![vec![0.0; dim]; rows.len()];
    let mut grad_eps = vec![0.0; dim];
    for (j, &eps) in epsilon.iter().enumerate() {
        let (mut sum, mut sq) = (0.0, 0.0);
        for r in rows {
            let y = r.as_ref()[j];
            sum += y;
            sq += y * y;
        }
        let denom = 1.0 + n * eps;
        let shrink = eps / denom;
        value += -0.5 * n * LN_2PI - 0.5 * (n * eps).ln_1p() - 0.5 * (sq - shrink * sum * sum);
        for (g, r) in grad_rows.iter_mut().zip(rows) {
            g[j] = -(r.as_ref()[j] - shrink * sum);
        }
        // d/dε = -n / (2 denom) + S² / (2 denom²); chain through ε = exp(log ε)
        grad_eps[j] = eps * (-0.5 * n / denom + 0.5 * sum * sum / (denom * denom));
    }
    Ok(MarginalGrad {
        value,
        rows: grad_rows,
        log_epsilon: grad_eps,
    })
}

/// Log likelihood ratio `log p(t, e_1..e_n) - log p(t) - log p(e_1..e_n)` in
/// the latent space. The 2π constants and the Σy² terms cancel analytically,
/// so a zero prior variance contributes exactly zero.
pub fn latent_llr<R: AsRef<[f64]>>(epsilon: &[f64], enroll: &[R], test: &[f64]) -> Result<f64> {
    let dim = epsilon.len();
    check_rows(dim, enroll)?;
    check_rows(dim, &[test])?;
    let n = enroll.len() as f64;
    let mut score = 0.0;
    for (j, &eps) in epsilon.iter().enumerate() {
        if eps == 0.0 {
            continue;
        }
        let s: f64 = enroll.iter().map(|r| r.as_ref()[j]).sum();
        let t = test[j];
        let all = s + t;
        score += 0.5 * (-((n + 1.0) * eps).ln_1p() + eps.ln_1p() + (n * eps).ln_1p())
            + 0.5
                * (eps / (1.0 + (n + 1.0) * eps) * all * all
                    - eps / (1.0 + eps) * t * t
                    - eps / (1.0 + n * eps) * s * s);
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mean: Vec<f64>,
    /// `dim × input_dim`
    whiten: DMatrix<f64>,
    epsilon: Vec<f64>,
}

impl PldaModel {
    /// Builds a model from parts. Rows of `whiten` are reordered so that
    /// `epsilon` is descending.
    pub fn from_parts(mean: Vec<f64>, whiten: DMatrix<f64>, epsilon: Vec<f64>) -> Result<Self> {
        if whiten.ncols() != mean.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                found: whiten.ncols(),
            });
        }
        if whiten.nrows() != epsilon.len() {
            return Err(Error::Dimension {
                expected: epsilon.len(),
                found: whiten.nrows(),
            });
        }
        if epsilon.is_empty() {
            return Err(Error::invalid("PLDA model needs at least one dimension"));
        }
        if mean.iter().chain(whiten.iter()).chain(&epsilon).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PLDA parameters".into()));
        }
        if epsilon.iter().any(|&e| e < 0.0) {
            return Err(Error::invalid("prior variances must be non-negative"));
        }
        let mut order: Vec<usize> = (0..epsilon.len()).collect();
        order.sort_by(|&a, &b| epsilon[b].total_cmp(&epsilon[a]));
        let whiten = whiten.select_rows(order.iter());
        let epsilon = order.iter().map(|&i| epsilon[i]).collect();
        Ok(PldaModel {
            mean,
            whiten,
            epsilon,
        })
    }

    /// Latent dimension.
    pub fn dim(&self) -> usize {
        self.epsilon.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn whiten(&self) -> &DMatrix<f64> {
        &self.whiten
    }

    pub fn epsilon(&self) -> &[f64] {
        &self.epsilon
    }

    /// `T (x - m)`
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let centered = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, b)| a - b));
        Ok((&self.whiten * centered).as_slice().to_vec())
    }

    /// Exact log density of already-projected vectors.
    pub fn marginal_log_density<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<f64> {
        log_marginal(&self.epsilon, rows)
    }

    pub fn score_trial<R: AsRef<[f64]>>(&self, enroll: &[R], test: &[f64]) -> Result<f64> {
        if enroll.is_empty() {
            return Err(Error::invalid("trial needs at least one enrollment vector"));
        }
        let e: Vec<Vec<f64>> = enroll.iter().map(|r| self.project(r.as_ref())).collect::<Result<_>>()?;
        let t = self.project(test)?;
        latent_llr(&self.epsilon, &e, &t)
    }

    /// Keeps the `keep` dimensions with the largest ε.
    pub fn truncate_dims(&self, keep: usize) -> Result<PldaModel> {
        if keep == 0 || keep > self.dim() {
            return Err(Error::invalid(format!(
                "truncation must keep between 1 and {} dimensions, got {keep}",
                self.dim()
            )));
        }
        Ok(PldaModel {
            mean: self.mean.clone(),
            whiten: self.whiten.rows(0, keep).into_owned(),
            epsilon: self.epsilon[..keep].to_vec(),
        })
    }

    pub fn to_doc(&self) -> PldaDoc {
        PldaDoc {
            format: PLDA_FORMAT.into(),
            version: 1,
            dim: self.dim(),
            mean: self.mean.clone(),
            whiten: linalg::to_row_major(&self.whiten),
            epsilon: self.epsilon.clone(),
        }
    }

    pub fn from_doc(doc: &PldaDoc) -> Result<Self> {
        if doc.format != PLDA_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported PLDA document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.epsilon.len() != doc.dim || doc.whiten.len() != doc.dim * doc.mean.len() {
            return Err(Error::invalid("PLDA document has inconsistent shapes"));
        }
        Self::from_parts(
            doc.mean.clone(),
            linalg::from_row_major(doc.dim, doc.mean.len(), &doc.whiten),
            doc.epsilon.clone(),
        )
    }
}

pub const PLDA_FORMAT: &str = "nda-plda";

/// Serialized PLDA model; `whiten` is row-major `dim × mean.len()`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PldaDoc {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub whiten: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Moment-based fit: pooled within-class covariance W, covariance of class
/// means B, and `T` with `T W Tᵀ = I`, `T B Tᵀ = diag(ε)`.
pub fn fit_plda(train: &EmbeddingSet) -> Result<PldaModel> {
    let stats = scatter_stats(train)?;
    let (t, vals) = linalg::simultaneous_diagonalize(&stats.within, &stats.between)?;
    // small-sample negative eigenvalues are not variances
    let epsilon = vals.iter().map(|&v| v.max(0.0)).collect();
    PldaModel::from_parts(stats.mean.as_slice().to_vec(), t, epsilon)
}
