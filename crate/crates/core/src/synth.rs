//! Synthetic labelled corpora from a known latent model and warp.
//!
//! Each speaker draws `μ ~ N(0, diag(prior_variances))`, each utterance
//! `z ~ N(μ, I)`, and the observation is `x = warp(z)`. Because the warp is
//! known and invertible, [`OracleModel::score`] gives the Bayes-optimal
//! log likelihood ratio for every trial.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::plda::latent_llr;
use crate::vecstore::{EmbeddingSet, Trial, TrialList};

pub const ORACLE_FORMAT: &str = "nda-oracle";

/// Nontarget trials drawn per target trial.
pub const NONTARGETS_PER_TARGET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarpSpec {
    Identity,
    /// `x = sinh((asinh(z) + skew) / tail)` per coordinate; `tail < 1`
    /// gives heavier-than-Gaussian tails.
    ElementwiseSinhArcsinh { skew: f64, tail: f64 },
    /// `x = c(Q z)` with a seeded random orthogonal `Q` and
    /// `c(t) = t + strength · t³` per coordinate.
    RotationThenCubic { strength: f64 },
}

impl WarpSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            WarpSpec::Identity => Ok(()),
            WarpSpec::ElementwiseSinhArcsinh { skew, tail } => {
                if !skew.is_finite() || !(tail > 0.0 && tail.is_finite()) {
                    return Err(Error::invalid("sinh-arcsinh warp needs finite skew and tail > 0"));
                }
                Ok(())
            }
            WarpSpec::RotationThenCubic { strength } => {
                if !(strength >= 0.0 && strength.is_finite()) {
                    return Err(Error::invalid("cubic warp strength must be >= 0"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_train_speakers: usize,
    pub n_eval_speakers: usize,
    pub utts_per_speaker: usize,
    pub prior_variances: Vec<f64>,
    pub warp: WarpSpec,
    pub seed: u64,
}

impl SynthSpec {
    /// Prior variances spaced geometrically from `hi` down to `lo`.
    pub fn geometric_prior(dim: usize, hi: f64, lo: f64) -> Vec<f64> {
        if dim == 1 {
            return vec![hi];
        }
        (0..dim)
            .map(|j| hi * (lo / hi).powf(j as f64 / (dim - 1) as f64))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_train_speakers == 0 || self.n_eval_speakers == 0 || self.utts_per_speaker == 0 {
            return Err(Error::invalid("dim and all counts must be at least 1"));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::invalid(
                "utts_per_speaker must be at least 2: eval trials need an enrollment and a test utterance",
            ));
        }
        if self.n_eval_speakers < 2 {
            return Err(Error::invalid("nontarget trials need at least 2 eval speakers"));
        }
        if self.prior_variances.len() != self.dim {
            return Err(Error::invalid(format!(
                "prior_variances has {} entries for dim {}",
                self.prior_variances.len(),
                self.dim
            )));
        }
        if self.prior_variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("prior variances must be positive and finite"));
        }
        self.warp.validate()
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dim: 32,
            n_train_speakers: 500,
            n_eval_speakers: 100,
            utts_per_speaker: 20,
            prior_variances: SynthSpec::geometric_prior(32, 2.0, 0.05),
            warp: WarpSpec::ElementwiseSinhArcsinh { skew: 0.0, tail: 0.5 },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warp {
    Identity,
    SinhArcsinh { skew: f64, tail: f64 },
    RotationCubic { rotation: DMatrix<f64>, strength: f64 },
}

/// Real root of `t + a t³ = x` for `a ≥ 0`.
pub fn inverse_cubic(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        return x;
    }
    // depressed cubic t³ + p t + q = 0 with a single real root
    let p = 1.0 / a;
    let half_q = -x / (2.0 * a);
    let disc = (half_q * half_q + p * p * p / 27.0).sqrt();
    let u = (-half_q + disc.copysign(-half_q)).cbrt();
    let mut t = if u == 0.0 { 0.0 } else { u - p / (3.0 * u) };
    for _ in 0..2 {
        t -= (t + a * t * t * t - x) / (1.0 + 3.0 * a * t * t);
    }
    t
}

impl Warp {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Warp::Identity => z.to_vec(),
            Warp::SinhArcsinh { skew, tail } => z.iter().map(|v| ((v.asinh() + skew) / tail).sinh()).collect(),
            Warp::RotationCubic { rotation, strength } => {
                let r = rotation * nalgebra::DVector::from_column_slice(z);
                r.iter().map(|t| t + strength * t * t * t).collect()
            }
        }
    }

    pub fn invert(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<f64> = match self {
            Warp::Identity => x.to_vec(),
            Warp::SinhArcsinh { skew, tail } => x.iter().map(|v| (tail * v.asinh() - skew).sinh()).collect(),
            Warp::RotationCubic { rotation, strength } => {
                let t = nalgebra::DVector::from_iterator(x.len(), x.iter().map(|v| inverse_cubic(*v, *strength)));
                (rotation.transpose() * t).as_slice().to_vec()
            }
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector outside the warp's invertible range".into()));
        }
        Ok(z)
    }
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
fn random_rotation<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// The true generative model of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub warp: Warp,
    pub prior_variances: Vec<f64>,
}

impl OracleModel {
    pub fn dim(&self) -> usize {
        self.prior_variances.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Exact log likelihood ratio using the true warp and prior, σ = 1.
    pub fn score<R: AsRef<[f64]>>(&self, enroll: &[R], test: &[f64]) -> Result<f64> {
        if enroll.is_empty() {
            return Err(Error::invalid("trial needs at least one enrollment vector"));
        }
        let mut ze = Vec::with_capacity(enroll.len());
        for e in enroll {
            self.check(e.as_ref())?;
            ze.push(self.warp.invert(e.as_ref())?);
        }
        self.check(test)?;
        let zt = self.warp.invert(test)?;
        latent_llr(&self.prior_variances, &ze, &zt)
    }

    pub fn to_doc(&self) -> OracleDoc {
        let (warp, rotation) = match &self.warp {
            Warp::Identity => (WarpSpec::Identity, None),
            Warp::SinhArcsinh { skew, tail } => (
                WarpSpec::ElementwiseSinhArcsinh {
                    skew: *skew,
                    tail: *tail,
                },
                None,
            ),
            Warp::RotationCubic { rotation, strength } => (
                WarpSpec::RotationThenCubic { strength: *strength },
                Some(linalg::to_row_major(rotation)),
            ),
        };
        OracleDoc {
            format: ORACLE_FORMAT.into(),
            version: 1,
            prior_variances: self.prior_variances.clone(),
            warp,
            rotation,
        }
    }

    pub fn from_doc(doc: &OracleDoc) -> Result<Self> {
        if doc.format != ORACLE_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!("unsupported oracle document {} v{}", doc.format, doc.version)));
        }
        doc.warp.validate()?;
        let dim = doc.prior_variances.len();
        let warp = match (doc.warp, &doc.rotation) {
            (WarpSpec::Identity, _) => Warp::Identity,
            (WarpSpec::ElementwiseSinhArcsinh { skew, tail }, _) => Warp::SinhArcsinh { skew, tail },
            (WarpSpec::RotationThenCubic { strength }, Some(rot)) if rot.len() == dim * dim => Warp::RotationCubic {
                rotation: linalg::from_row_major(dim, dim, rot),
                strength,
            },
            _ => return Err(Error::invalid("cubic warp needs a dim × dim rotation")),
        };
        Ok(OracleModel {
            warp,
            prior_variances: doc.prior_variances.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleDoc {
    pub format: String,
    pub version: u32,
    pub prior_variances: Vec<f64>,
    pub warp: WarpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: EmbeddingSet,
    pub eval: EmbeddingSet,
    pub trials: TrialList,
    pub oracle: OracleModel,
}

fn speaker_block<R: Rng>(
    rng: &mut R,
    spec: &SynthSpec,
    warp: &Warp,
    prefix: &str,
    count: usize,
) -> Result<EmbeddingSet> {
    let dim = spec.dim;
    let mut utts = Vec::with_capacity(count * spec.utts_per_speaker);
    let mut spks = Vec::with_capacity(count * spec.utts_per_speaker);
    let mut data = Vec::with_capacity(count * spec.utts_per_speaker * dim);
    for s in 0..count {
        let spk = format!("{prefix}{s:05}");
        let mu: Vec<f64> = spec
            .prior_variances
            .iter()
            .map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for u in 0..spec.utts_per_speaker {
            let z: Vec<f64> = mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            data.extend(warp.apply(&z));
            utts.push(format!("{spk}-{u:03}"));
            spks.push(spk.clone());
        }
    }
    EmbeddingSet::new(dim, utts, spks, data)
}

/// Draws train and eval speakers, builds the trial list and returns the
/// oracle. Eval speakers enroll with their first utterance and test with the
/// rest; each target trial is matched by [`NONTARGETS_PER_TARGET`] nontarget
/// trials against other speakers' test utterances (fewer only if the pool is
/// smaller).
pub fn generate_corpus(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let warp = match spec.warp {
        WarpSpec::Identity => Warp::Identity,
        WarpSpec::ElementwiseSinhArcsinh { skew, tail } => Warp::SinhArcsinh { skew, tail },
        WarpSpec::RotationThenCubic { strength } => Warp::RotationCubic {
            rotation: random_rotation(spec.dim, &mut rng),
            strength,
        },
    };
    let train = speaker_block(&mut rng, spec, &warp, "train", spec.n_train_speakers)?;
    let eval = speaker_block(&mut rng, spec, &warp, "eval", spec.n_eval_speakers)?;

    let per = spec.utts_per_speaker;
    let n_spk = spec.n_eval_speakers;
    let mut trials = Vec::new();
    for s in 0..n_spk {
        let enroll = vec![eval.utt_id(s * per).to_string()];
        for u in 1..per {
            trials.push(Trial::new(enroll.clone(), eval.utt_id(s * per + u).to_string(), true)?);
        }
        // other speakers' test utterances
        let pool: Vec<usize> = (0..n_spk)
            .filter(|&o| o != s)
            .flat_map(|o| (1..per).map(move |u| o * per + u))
            .collect();
        let want = (NONTARGETS_PER_TARGET * (per - 1)).min(pool.len());
        let mut picks: Vec<usize> = sample(&mut rng, pool.len(), want).into_iter().map(|k| pool[k]).collect();
        picks.sort_unstable();
        for row in picks {
            trials.push(Trial::new(enroll.clone(), eval.utt_id(row).to_string(), false)?);
        }
    }
    Ok(Corpus {
        train,
        eval,
        trials: TrialList { trials },
        oracle: OracleModel {
            warp,
            prior_variances: spec.prior_variances.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(warp: WarpSpec) -> SynthSpec {
        SynthSpec {
            dim: 3,
            n_train_speakers: 10,
            n_eval_speakers: 8,
            utts_per_speaker: 4,
            prior_variances: vec![2.0, 1.0, 0.5],
            warp,
            seed: 5,
        }
    }

    fn pooled_residual_moments(set: &EmbeddingSet) -> (Vec<f64>, Vec<f64>) {
        // per-dimension variance and excess kurtosis of x - speaker mean
        let dim = set.dim();
        let mut res: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for (_, rows) in set.speaker_groups() {
            for j in 0..dim {
                let m = rows.iter().map(|&i| set.vector(i)[j]).sum::<f64>() / rows.len() as f64;
                res[j].extend(rows.iter().map(|&i| set.vector(i)[j] - m));
            }
        }
        let mut var = Vec::new();
        let mut kurt = Vec::new();
        for r in res {
            let n = r.len() as f64;
            let m2 = r.iter().map(|v| v * v).sum::<f64>() / n;
            let m4 = r.iter().map(|v| v.powi(4)).sum::<f64>() / n;
            var.push(m2);
            kurt.push(m4 / (m2 * m2) - 3.0);
        }
        (var, kurt)
    }

    #[test]
    fn identity_within_covariance_is_unit() {
        let spec = SynthSpec {
            dim: 2,
            n_train_speakers: 2000,
            n_eval_speakers: 2,
            utts_per_speaker: 21,
            prior_variances: vec![1.0, 1.0],
            warp: WarpSpec::Identity,
            seed: 3,
        };
        let c = generate_corpus(&spec).unwrap();
        let st = crate::linalg::scatter_stats(&c.train).unwrap();
        for r in 0..2 {
            for col in 0..2 {
                let id = if r == col { 1.0 } else { 0.0 };
                assert!((st.within[(r, col)] - id).abs() < 0.05, "{}", st.within);
            }
        }
        let (_, kurt) = pooled_residual_moments(&c.train);
        // residuals about the sample mean; 4·10⁴ draws
        assert!(kurt.iter().all(|k| k.abs() < 0.1), "{kurt:?}");
    }

    #[test]
    fn sinh_arcsinh_has_heavy_tails() {
        let spec = SynthSpec {
            dim: 2,
            n_train_speakers: 500,
            n_eval_speakers: 2,
            utts_per_speaker: 20,
            prior_variances: vec![1.0, 1.0],
            warp: WarpSpec::ElementwiseSinhArcsinh { skew: 0.0, tail: 0.5 },
            seed: 4,
        };
        let c = generate_corpus(&spec).unwrap();
        let (_, kurt) = pooled_residual_moments(&c.train);
        assert!(kurt.iter().all(|k| *k > 0.5), "{kurt:?}");
    }

    #[test]
    fn warps_invert() {
        for warp in [
            WarpSpec::Identity,
            WarpSpec::ElementwiseSinhArcsinh { skew: 0.3, tail: 0.6 },
            WarpSpec::RotationThenCubic { strength: 0.4 },
        ] {
            let c = generate_corpus(&small(warp)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..200 {
                let z: Vec<f64> = (0..3).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let back = c.oracle.warp.invert(&c.oracle.warp.apply(&z)).unwrap();
                for (a, b) in back.iter().zip(&z) {
                    assert!((a - b).abs() < 1e-10, "{warp:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn cubic_root_small_and_large() {
        for &x in &[0.0, 1e-12, -3e-7, 0.5, -2.0, 1e6] {
            for &a in &[1e-9, 0.1, 1.0, 50.0] {
                let t = inverse_cubic(x, a);
                assert!((t + a * t * t * t - x).abs() <= 1e-12 * x.abs().max(1.0), "x={x} a={a}");
            }
        }
    }

    #[test]
    fn oracle_fixtures() {
        let oracle = OracleModel {
            warp: Warp::Identity,
            prior_variances: vec![1.0],
        };
        let s = oracle.score(&[[0.0]], &[0.0]).unwrap();
        assert!((s - 0.143_841).abs() < 1e-6);
        let collapsed = OracleModel {
            warp: Warp::Identity,
            prior_variances: vec![1e-12, 1e-12],
        };
        let s = collapsed.score(&[[3.0, -1.0], [0.2, 0.2]], &[-2.0, 5.0]).unwrap();
        assert!(s.abs() < 1e-6);
    }

    #[test]
    fn oracle_is_warp_invariant() {
        let c = generate_corpus(&small(WarpSpec::RotationThenCubic { strength: 0.3 })).unwrap();
        let plain = OracleModel {
            warp: Warp::Identity,
            prior_variances: c.oracle.prior_variances.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let e: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let t: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let warped = c.oracle.score(&[c.oracle.warp.apply(&e)], &c.oracle.warp.apply(&t)).unwrap();
            let direct = plain.score(&[&e], &t).unwrap();
            assert!((warped - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn corpus_shape_and_determinism() {
        let spec = small(WarpSpec::ElementwiseSinhArcsinh { skew: 0.0, tail: 0.5 });
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.eval.len(), 32);
        let targets = a.trials.trials.iter().filter(|t| t.is_target).count();
        let nontargets = a.trials.len() - targets;
        assert_eq!(targets, 8 * 3);
        assert_eq!(nontargets, 5 * targets);
        for s in a.eval.speaker_groups() {
            assert!(a.trials.trials.iter().any(|t| t.is_target && t.enroll[0] == a.eval.utt_id(s.1[0])));
        }
        assert!(a.trials.missing_utts(&a.eval).is_empty());

        let other = generate_corpus(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(other.train, a.train);
        assert_eq!(other.train.len(), a.train.len());
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut s = small(WarpSpec::Identity);
        s.utts_per_speaker = 1;
        assert!(generate_corpus(&s).is_err());
        let mut s = small(WarpSpec::Identity);
        s.prior_variances[1] = 0.0;
        assert!(generate_corpus(&s).is_err());
        assert!(generate_corpus(&small(WarpSpec::ElementwiseSinhArcsinh { skew: 0.0, tail: 0.0 })).is_err());
        assert!(generate_corpus(&small(WarpSpec::RotationThenCubic { strength: -1.0 })).is_err());
    }

    #[test]
    fn oracle_doc_roundtrip() {
        let c = generate_corpus(&small(WarpSpec::RotationThenCubic { strength: 0.2 })).unwrap();
        let json = serde_json::to_string(&c.oracle.to_doc()).unwrap();
        let back = OracleModel::from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, c.oracle);
    }
}
