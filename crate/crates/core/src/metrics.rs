//! Detection metrics and Gaussianality diagnostics.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecstore::EmbeddingSet;

pub const DEFAULT_P_TARGETS: [f64; 2] = [0.01, 0.001];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
    trial_refs: Option<Vec<usize>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i}")));
        }
        let n_target = labels.iter().filter(|l| **l).count();
        if n_target == 0 || n_target == labels.len() {
            return Err(Error::invalid("score set needs at least one target and one nontarget"));
        }
        Ok(ScoreSet {
            scores,
            labels,
            trial_refs: None,
        })
    }

    pub fn with_trial_refs(mut self, refs: Vec<usize>) -> Result<Self> {
        if refs.len() != self.scores.len() {
            return Err(Error::invalid("trial reference count differs from score count"));
        }
        self.trial_refs = Some(refs);
        Ok(self)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn trial_refs(&self) -> Option<&[usize]> {
        self.trial_refs.as_deref()
    }

    pub fn n_target(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.labels.len() - self.n_target()
    }

    /// Operating points `(P_miss, P_fa)` for thresholds −∞, every distinct
    /// score in ascending order, and +∞.
    pub fn operating_points(&self) -> Vec<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].partial_cmp(&self.scores[b]).unwrap_or(Ordering::Equal));
        let nt = self.n_target();
        let nn = self.n_nontarget();
        let (ntf, nnf) = (nt as f64, nn as f64);
        let mut points = Vec::with_capacity(order.len() + 2);
        points.push((0.0, 1.0));
        // targets and nontargets strictly below the current threshold
        let (mut tar_below, mut non_below) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let t = self.scores[order[i]];
            points.push((tar_below as f64 / ntf, (nn - non_below) as f64 / nnf));
            while i < order.len() && self.scores[order[i]] == t {
                if self.labels[order[i]] {
                    tar_below += 1;
                } else {
                    non_below += 1;
                }
                i += 1;
            }
        }
        points.push((1.0, 0.0));
        points
    }
}

pub fn compute_eer(s: &ScoreSet) -> f64 {
    let pts = s.operating_points();
    for w in pts.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        let d0 = m0 - f0;
        let d1 = m1 - f1;
        if d0 == 0.0 {
            return m0;
        }
        if d0 < 0.0 && d1 > 0.0 {
            let a = d0 / (d0 - d1);
            return m0 + a * (m1 - m0);
        }
    }
    // the last point always has P_miss − P_fa = 1, so a crossing is found above
    unreachable!("operating points must cross")
}

pub fn compute_min_dcf(s: &ScoreSet, p_tar: f64) -> Result<f64> {
    if !(p_tar > 0.0 && p_tar < 1.0) {
        return Err(Error::invalid(format!("p_tar must lie in (0, 1), got {p_tar}")));
    }
    let norm = p_tar.min(1.0 - p_tar);
    let best = s
        .operating_points()
        .into_iter()
        .map(|(m, f)| p_tar * m + (1.0 - p_tar) * f)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    #[serde(rename = "min_dcf_1e-2")]
    pub min_dcf_1e_2: f64,
    #[serde(rename = "min_dcf_1e-3")]
    pub min_dcf_1e_3: f64,
    /// minDCF for every requested prior, in request order.
    pub min_dcf: Vec<(f64, f64)>,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl MetricReport {
    pub fn compute(s: &ScoreSet, p_tars: &[f64]) -> Result<Self> {
        let min_dcf = p_tars
            .iter()
            .map(|&p| compute_min_dcf(s, p).map(|v| (p, v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricReport {
            eer: compute_eer(s),
            min_dcf_1e_2: compute_min_dcf(s, 1e-2)?,
            min_dcf_1e_3: compute_min_dcf(s, 1e-3)?,
            min_dcf,
            n_target: s.n_target(),
            n_nontarget: s.n_nontarget(),
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trials      {} target, {} nontarget", self.n_target, self.n_nontarget)?;
        writeln!(f, "EER         {:.3}%", 100.0 * self.eer)?;
        for (p, v) in &self.min_dcf {
            writeln!(f, "minDCF({p})  {v:.3}")?;
        }
        Ok(())
    }
}

/// CSV with one `threshold_index,p_miss,p_fa` row per operating point.
pub fn operating_points_csv(s: &ScoreSet) -> String {
    let mut out = String::from("index,p_miss,p_fa\n");
    for (i, (m, f)) in s.operating_points().into_iter().enumerate() {
        out.push_str(&format!("{i},{m:.17e},{f:.17e}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub skew: f64,
    pub kurt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussReport {
    pub marginal: Moments,
    pub conditional: Moments,
    pub prior: Moments,
    /// Dimensions skipped for zero variance, counted per statistic.
    pub skipped_dimensions: SkippedDims,
    pub aggregation: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDims {
    pub marginal: usize,
    pub conditional: usize,
    pub prior: usize,
}

impl fmt::Display for GaussReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "              skew      kurt")?;
        for (name, m) in [
            ("marginal", self.marginal),
            ("conditional", self.conditional),
            ("prior", self.prior),
        ] {
            writeln!(f, "{name:<12} {:>8.4} {:>9.4}", m.skew, m.kurt)?;
        }
        let s = self.skipped_dimensions;
        if s.marginal + s.conditional + s.prior > 0 {
            writeln!(
                f,
                "skipped zero-variance dims: marginal {}, conditional {}, prior {}",
                s.marginal, s.conditional, s.prior
            )?;
        }
        Ok(())
    }
}

/// Biased skewness and excess kurtosis, or `None` for a zero-variance sample.
pub fn sample_moments(values: &[f64]) -> Option<Moments> {
    let n = values.len() as f64;
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= f64::MIN_POSITIVE.max(1e-24 * mean * mean) {
        return None;
    }
    Some(Moments {
        skew: m3 / m2.powf(1.5),
        kurt: m4 / (m2 * m2) - 3.0,
    })
}

/// Dimension-averaged moments of row-major `rows`.
fn averaged(data: &[f64], dim: usize, what: &str) -> Result<(Moments, usize)> {
    let n = data.len() / dim;
    let mut col = vec![0.0; n];
    let (mut skew, mut kurt, mut used) = (0.0, 0.0, 0usize);
    for j in 0..dim {
        for i in 0..n {
            col[i] = data[i * dim + j];
        }
        if let Some(m) = sample_moments(&col) {
            skew += m.skew;
            kurt += m.kurt;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid(format!(
            "every dimension of the {what} distribution has zero variance"
        )));
    }
    Ok((
        Moments {
            skew: skew / used as f64,
            kurt: kurt / used as f64,
        },
        dim - used,
    ))
}

pub fn gaussianality_report(set: &EmbeddingSet) -> Result<GaussReport> {
    let groups = set.speaker_groups();
    if groups.len() < 2 || groups.iter().any(|(_, idx)| idx.len() < 2) {
        return Err(Error::invalid(
            "Gaussianality diagnostics need at least 2 speakers with at least 2 utterances each",
        ));
    }
    let dim = set.dim();
    let mut residuals = Vec::with_capacity(set.data().len());
    let mut means = Vec::with_capacity(groups.len() * dim);
    for (_, idx) in &groups {
        let mut mu = vec![0.0; dim];
        for &i in idx {
            for (m, v) in mu.iter_mut().zip(set.vector(i)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= idx.len() as f64);
        for &i in idx {
            residuals.extend(set.vector(i).iter().zip(&mu).map(|(v, m)| v - m));
        }
        means.extend(mu);
    }
    let (marginal, sm) = averaged(set.data(), dim, "marginal")?;
    let (conditional, sc) = averaged(&residuals, dim, "conditional")?;
    let (prior, sp) = averaged(&means, dim, "prior")?;
    let skipped = SkippedDims {
        marginal: sm,
        conditional: sc,
        prior: sp,
    };
    if sm + sc + sp > 0 {
        log::warn!("skipped zero-variance dimensions: {skipped:?}");
    }
    Ok(GaussReport {
        marginal,
        conditional,
        prior,
        skipped_dimensions: skipped,
        aggregation: "mean over dimensions of per-dimension biased moments".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn set(tar: &[f64], non: &[f64]) -> ScoreSet {
        let mut s = tar.to_vec();
        s.extend_from_slice(non);
        let mut l = vec![true; tar.len()];
        l.extend(vec![false; non.len()]);
        ScoreSet::new(s, l).unwrap()
    }

    /// Brute force over every threshold, independent of the sweep above.
    fn brute_dcf(tar: &[f64], non: &[f64], p: f64) -> f64 {
        let mut ts: Vec<f64> = tar.iter().chain(non).copied().collect();
        ts.push(f64::NEG_INFINITY);
        ts.push(f64::INFINITY);
        ts.iter()
            .map(|&t| {
                let pm = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
                let pf = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
                (p * pm + (1.0 - p) * pf) / p.min(1.0 - p)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[1.0, 2.0], &[-1.0, -2.0]);
        assert_eq!(compute_eer(&s), 0.0);
        assert_eq!(compute_min_dcf(&s, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn interleaved_fixture() {
        let s = set(&[1.0, 3.0], &[2.0, 4.0]);
        assert_eq!(compute_eer(&s), 0.5);
        // points: (0,1) (0,1) (.5,1) (.5,.5) (1,.5) (1,0); best is reject-all
        let dcf = compute_min_dcf(&s, 0.01).unwrap();
        assert_eq!(dcf, 1.0);
        assert_eq!(dcf, brute_dcf(&[1.0, 3.0], &[2.0, 4.0], 0.01));
        assert_eq!(s.operating_points().len(), 6);
    }

    #[test]
    fn useless_scores() {
        let s = set(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(compute_min_dcf(&s, 0.01).unwrap(), 1.0);
        assert_eq!(compute_min_dcf(&s, 0.3).unwrap(), 1.0);
        assert_eq!(compute_eer(&s), 0.5);
    }

    #[test]
    fn flipped_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal).round()).collect();
            let mut labels: Vec<bool> = (0..40).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let b = ScoreSet::new(scores, labels.iter().map(|l| !l).collect()).unwrap();
            assert!((compute_eer(&a) + compute_eer(&b) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_sets() {
        assert!(ScoreSet::new(vec![1.0, 2.0], vec![true, true]).is_err());
        assert!(ScoreSet::new(vec![1.0], vec![true, false]).is_err());
        assert!(ScoreSet::new(vec![f64::NAN, 1.0], vec![true, false]).is_err());
        let s = set(&[1.0], &[0.0]);
        assert!(compute_min_dcf(&s, 0.0).is_err());
        assert!(compute_min_dcf(&s, 1.0).is_err());
    }

    #[test]
    fn report_json_keys() {
        let s = set(&[1.0, 3.0], &[2.0, 4.0]);
        let r = MetricReport::compute(&s, &DEFAULT_P_TARGETS).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["eer", "min_dcf_1e-2", "min_dcf_1e-3", "n_target", "n_nontarget"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(r.to_string().contains("2 target, 2 nontarget"));
        let csv = operating_points_csv(&s);
        assert_eq!(csv.lines().count(), 7);
    }

    fn random_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(s, mut l)| {
                    l[0] = true;
                    l[1] = false;
                    // coarse grid so ties occur
                    (s.into_iter().map(|x| (x * 4.0).round() / 4.0).collect(), l)
                })
        })
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance((s, l) in random_scores(), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let base = ScoreSet::new(s.clone(), l.clone()).unwrap();
            let aff = ScoreSet::new(s.iter().map(|x| a * x + b).collect(), l.clone()).unwrap();
            let th = ScoreSet::new(s.iter().map(|x| (x / 5.0).tanh()).collect(), l).unwrap();
            for other in [&aff, &th] {
                prop_assert!((compute_eer(&base) - compute_eer(other)).abs() < 1e-12);
                for p in [0.01, 0.001, 0.5] {
                    let d0 = compute_min_dcf(&base, p).unwrap();
                    let d1 = compute_min_dcf(other, p).unwrap();
                    prop_assert!((d0 - d1).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn bounds_and_dcf_vs_eer((s, l) in random_scores(), p in 0.001f64..0.999) {
            let set = ScoreSet::new(s.clone(), l.clone()).unwrap();
            let eer = compute_eer(&set);
            prop_assert!((0.0..=1.0).contains(&eer));
            let d = compute_min_dcf(&set, p).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
            let tar: Vec<f64> = s.iter().zip(&l).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
            let non: Vec<f64> = s.iter().zip(&l).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
            prop_assert!((d - brute_dcf(&tar, &non, p)).abs() < 1e-9);
            // the cost at the interpolated EER point is at most EER / min(p, 1-p)
            prop_assert!(d <= eer / p.min(1.0 - p) + 1e-9);
        }
    }

    fn gaussian_set(seed: u64, speakers: usize, per: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for s in 0..speakers {
            let mu: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for u in 0..per {
                let x = mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
                recs.push((format!("{s}-{u}"), format!("{s}"), x));
            }
        }
        EmbeddingSet::from_records(dim, recs).unwrap()
    }

    #[test]
    fn gaussian_sample_moments_near_zero() {
        // 10^4 speaker means and 10^5 residuals
        let r = gaussianality_report(&gaussian_set(4, 10_000, 10, 3)).unwrap();
        for m in [r.marginal, r.conditional, r.prior] {
            assert!(m.skew.abs() < 0.1 && m.kurt.abs() < 0.1, "{r}");
        }
        assert_eq!(r.skipped_dimensions, SkippedDims::default());
    }

    #[test]
    fn symmetric_sample_has_zero_skew() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v: Vec<f64> = (0..501).map(|_| rng.sample::<f64, _>(StandardNormal).powi(3)).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        v.extend(neg);
        assert!(sample_moments(&v).unwrap().skew.abs() < 1e-12);
    }

    #[test]
    fn known_moments() {
        // two-point ±1: skew 0, kurt 1 - 3
        let m = sample_moments(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(m.skew, 0.0);
        assert_eq!(m.kurt, -2.0);
        assert!(sample_moments(&[2.0, 2.0, 2.0]).is_none());
    }

    #[test]
    fn constant_dimension_is_skipped() {
        let recs = (0..6).map(|i| {
            let s = i / 3;
            (format!("u{i}"), format!("s{s}"), vec![1.0, (i * i) as f64 + s as f64])
        });
        let set = EmbeddingSet::from_records(2, recs).unwrap();
        let r = gaussianality_report(&set).unwrap();
        assert_eq!(r.skipped_dimensions.marginal, 1);
        assert_eq!(r.skipped_dimensions.conditional, 1);
        assert_eq!(r.skipped_dimensions.prior, 1);

        let flat = EmbeddingSet::from_records(1, (0..4).map(|i| (format!("u{i}"), format!("s{}", i / 2), vec![3.0]))).unwrap();
        assert!(gaussianality_report(&flat).is_err());
        let single = EmbeddingSet::from_records(1, vec![("a", "s", vec![1.0]), ("b", "t", vec![2.0])]).unwrap();
        assert!(gaussianality_report(&single).is_err());
    }
}
