//! Neural discriminant analysis: a linear-Gaussian class model in the latent
//! space of an invertible flow.
//!
//! With `z_i = f⁻¹(x_i - m)` the class marginal is
//! `p(x_1..x_n) = Π_i J_{x_i} · p(z_1..z_n)`, where `p(z_1..z_n)` is the
//! closed-form PLDA marginal with prior variances `ε` and unit within-class
//! variance. The Jacobian factors cancel in the likelihood ratio, so trial
//! scores are computed entirely from latent codes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowDoc, FlowModel, ParamGrads};
use crate::optim::Adam;
use crate::plda::{latent_llr, log_marginal, log_marginal_grad};
use crate::vecstore::{partition_speaker_batches, EmbeddingSet};

pub const NDA_FORMAT: &str = "nda-model";

/// Lower bound on the initial prior variances.
const INIT_EPSILON_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NdaModel {
    flow: FlowModel,
    log_epsilon: Vec<f64>,
    mean: Vec<f64>,
}

impl NdaModel {
    pub fn new(flow: FlowModel, log_epsilon: Vec<f64>, mean: Vec<f64>) -> Result<Self> {
        let dim = flow.dim();
        for (name, len) in [("log_epsilon", log_epsilon.len()), ("mean", mean.len())] {
            if len != dim {
                return Err(Error::invalid(format!("{name} has length {len}, flow dim is {dim}")));
            }
        }
        if log_epsilon.iter().chain(&mean).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("NDA parameters".into()));
        }
        if log_epsilon.iter().any(|v| !v.exp().is_finite() || v.exp() <= 0.0) {
            return Err(Error::NonFinite("prior variance out of range".into()));
        }
        Ok(NdaModel {
            flow,
            log_epsilon,
            mean,
        })
    }

    /// Starting point for training: global mean of `train`, per-dimension
    /// variance of the centered speaker means as ε, and the given flow.
    pub fn initial(train: &EmbeddingSet, flow: FlowModel) -> Result<Self> {
        let dim = train.dim();
        if flow.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: flow.dim(),
            });
        }
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut mean = vec![0.0; dim];
        for v in train.vectors() {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= train.len() as f64);
        let groups = train.speaker_groups();
        let mut var = vec![0.0; dim];
        for (_, rows) in &groups {
            for j in 0..dim {
                let mu = rows.iter().map(|&i| train.vector(i)[j]).sum::<f64>() / rows.len() as f64 - mean[j];
                var[j] += mu * mu;
            }
        }
        let log_epsilon = var
            .iter()
            .map(|v| (v / groups.len() as f64).max(INIT_EPSILON_FLOOR).ln())
            .collect();
        NdaModel::new(flow, log_epsilon, mean)
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_epsilon(&self) -> &[f64] {
        &self.log_epsilon
    }

    pub fn epsilon(&self) -> Vec<f64> {
        self.log_epsilon.iter().map(|v| v.exp()).collect()
    }

    /// Prior variances with all but the `keep` largest set to zero. A zero
    /// prior variance removes a latent dimension from the likelihood ratio.
    pub fn truncated_epsilon(&self, keep: usize) -> Result<Vec<f64>> {
        let dim = self.dim();
        if keep == 0 || keep > dim {
            return Err(Error::invalid(format!(
                "truncation must keep between 1 and {dim} dimensions, got {keep}"
            )));
        }
        let eps = self.epsilon();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
        let mut out = vec![0.0; dim];
        for &j in &order[..keep] {
            out[j] = eps[j];
        }
        Ok(out)
    }

    fn centered(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(x.iter().zip(&self.mean).map(|(a, b)| a - b).collect())
    }

    /// `(z, log J_x)` for one observation.
    pub fn latent_with_logdet(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.flow.inverse_with_logdet(&self.centered(x)?)
    }

    pub fn latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.latent_with_logdet(x).map(|(z, _)| z)
    }

    /// `Σ_i log J_{x_i} + log p(z_1..z_n)`.
    pub fn log_marginal<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::invalid("marginal of zero vectors is undefined"));
        }
        let centered: Vec<Vec<f64>> = rows.iter().map(|r| self.centered(r.as_ref())).collect::<Result<_>>()?;
        let (zs, logj) = self.flow.inverse_batch(&centered)?;
        Ok(logj.iter().sum::<f64>() + log_marginal(&self.epsilon(), &zs)?)
    }

    /// Latent-space log likelihood ratio; the Jacobian terms never enter.
    pub fn score_trial<R: AsRef<[f64]>>(&self, enroll: &[R], test: &[f64]) -> Result<f64> {
        self.score_trial_with(&self.epsilon(), enroll, test)
    }

    /// Scores with caller-supplied prior variances, e.g. from
    /// [`NdaModel::truncated_epsilon`].
    pub fn score_trial_with<R: AsRef<[f64]>>(&self, epsilon: &[f64], enroll: &[R], test: &[f64]) -> Result<f64> {
        if enroll.is_empty() {
            return Err(Error::invalid("trial needs at least one enrollment vector"));
        }
        let ze: Vec<Vec<f64>> = enroll.iter().map(|r| self.latent(r.as_ref())).collect::<Result<_>>()?;
        let zt = self.latent(test)?;
        latent_llr(epsilon, &ze, &zt)
    }

    /// One speaker's objective and its gradient with respect to the flow
    /// parameters and `log ε`.
    pub fn speaker_objective_grad<R: AsRef<[f64]> + Sync>(&self, rows: &[R]) -> Result<(f64, ParamGrads, Vec<f64>)> {
        if rows.is_empty() {
            return Err(Error::invalid("speaker with no vectors"));
        }
        let centered: Vec<Vec<f64>> = rows.iter().map(|r| self.centered(r.as_ref())).collect::<Result<_>>()?;
        let (zs, logj, cache) = self.flow.inverse_cached(&centered)?;
        let mg = log_marginal_grad(&self.epsilon(), &zs)?;
        let ones = vec![1.0; rows.len()];
        let (pg, _) = self.flow.backprop_cached(&cache, &mg.rows, &ones)?;
        Ok((mg.value + logj.iter().sum::<f64>(), pg, mg.log_epsilon))
    }

    /// All trainable parameters: flow parameters followed by `log ε`.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut p = self.flow.params();
        p.extend_from_slice(&self.log_epsilon);
        p
    }

    pub fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.flow.param_count();
        if params.len() != n + self.dim() {
            return Err(Error::Dimension {
                expected: n + self.dim(),
                found: params.len(),
            });
        }
        self.flow.set_params(&params[..n])?;
        self.log_epsilon.copy_from_slice(&params[n..]);
        Ok(())
    }

    /// Maps every vector of `set` to its latent code, keeping labels.
    pub fn transform_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: set.dim(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..set.len())
            .into_par_iter()
            .map(|i| self.latent(set.vector(i)))
            .collect::<Result<_>>()?;
        set.with_vectors(self.dim(), rows.concat())
    }

    pub fn to_doc(&self) -> NdaDoc {
        NdaDoc {
            format: NDA_FORMAT.into(),
            version: 1,
            flow: self.flow.to_doc(),
            mean: self.mean.clone(),
            log_epsilon: self.log_epsilon.clone(),
        }
    }

    pub fn from_doc(doc: NdaDoc) -> Result<Self> {
        if doc.format != NDA_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!("unsupported NDA document {} v{}", doc.format, doc.version)));
        }
        NdaModel::new(FlowModel::from_doc(doc.flow)?, doc.log_epsilon, doc.mean)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NdaDoc {
    pub format: String,
    pub version: u32,
    pub flow: FlowDoc,
    pub mean: Vec<f64>,
    pub log_epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub speakers_per_batch: usize,
    /// Speakers whose gradients are accumulated before each update;
    /// `None` means one update per batch.
    pub min_speakers_before_update: Option<usize>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Divide each speaker's objective by its utterance count.
    pub per_speaker_average: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            speakers_per_batch: 200,
            min_speakers_before_update: None,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip_norm: None,
            per_speaker_average: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if self.epochs == 0 || self.speakers_per_batch == 0 {
            return Err(Error::invalid("epochs and speakers_per_batch must be at least 1"));
        }
        if self.min_speakers_before_update == Some(0) {
            return Err(Error::invalid("min_speakers_before_update must be at least 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::invalid("grad_clip_norm must be positive"));
            }
        }
        Ok(())
    }

    fn update_every(&self) -> usize {
        self.min_speakers_before_update.unwrap_or(self.speakers_per_batch)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: NdaModel,
    /// Mean per-speaker objective of the model passed in.
    pub initial_objective: f64,
    /// Mean per-speaker objective over each epoch, every speaker evaluated
    /// at the parameters its gradient was taken at.
    pub loss_trace: Vec<f64>,
    /// Mean per-speaker objective of the returned model.
    pub final_objective: f64,
    /// Speakers consumed by each optimizer step, in order.
    pub step_sizes: Vec<usize>,
}

/// Mean per-speaker objective of `model` over `set`.
pub fn mean_objective(model: &NdaModel, set: &EmbeddingSet, per_speaker_average: bool) -> Result<f64> {
    let groups = set.speaker_groups();
    if groups.is_empty() {
        return Err(Error::invalid("empty set"));
    }
    let values: Vec<f64> = groups
        .par_iter()
        .map(|(_, rows)| {
            let vecs: Vec<&[f64]> = rows.iter().map(|&i| set.vector(i)).collect();
            let v = model.log_marginal(&vecs)?;
            Ok(if per_speaker_average { v / rows.len() as f64 } else { v })
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / groups.len() as f64)
}

fn check_training_set(train: &EmbeddingSet) -> Result<()> {
    let groups = train.speaker_groups();
    if groups.len() < 2 {
        return Err(Error::invalid("NDA training needs at least 2 speakers"));
    }
    if let Some((spk, rows)) = groups.iter().find(|(_, r)| r.len() < 2) {
        return Err(Error::invalid(format!(
            "speaker '{spk}' has {} utterance(s); NDA training needs at least 2",
            rows.len()
        )));
    }
    Ok(())
}

/// Maximum-likelihood training of the flow and `log ε` with Adam, using
/// speaker-grouped batches and deferred updates.
pub fn fit_nda(train: &EmbeddingSet, init: FlowModel, config: &TrainConfig) -> Result<FitReport> {
    fit_nda_from(NdaModel::initial(train, init)?, train, config)
}

/// Continues training from an existing model.
pub fn fit_nda_from(model: NdaModel, train: &EmbeddingSet, config: &TrainConfig) -> Result<FitReport> {
    fit_nda_observed(model, train, config, |_, _| {})
}

/// [`fit_nda_from`], calling `on_epoch(epoch, &model)` after every epoch.
pub fn fit_nda_observed<F: FnMut(usize, &NdaModel)>(
    mut model: NdaModel,
    train: &EmbeddingSet,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<FitReport> {
    config.validate()?;
    check_training_set(train)?;
    if train.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            found: train.dim(),
        });
    }
    let n_flow = model.flow.param_count();
    let mut params = model.trainable_params();
    let mut opt = Adam::new(
        params.len(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let update_every = config.update_every();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step_sizes = Vec::new();

    let initial_objective = mean_objective(&model, train, config.per_speaker_average)?;
    if !initial_objective.is_finite() {
        return Err(Error::Divergence { epoch: 0, batch: 0 });
    }

    for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;

        let batches = partition_speaker_batches(train, config.speakers_per_batch, config.seed.wrapping_add(epoch as u64))?;
        let mut acc = vec![0.0; params.len()];
        let mut pending = 0usize;
        let n_batches = batches.len();
        for (b, batch) in batches.iter().enumerate() {
            let groups = &batch.groups;
            let mut g0 = 0;
            while g0 < groups.len() {
                let take = (update_every - pending).min(groups.len() - g0);
                let chunk = &groups[g0..g0 + take];
                let results: Vec<Result<(f64, ParamGrads, Vec<f64>)>> = chunk
                    .par_iter()
                    .map(|g| {
                        if g.vectors.is_empty() {
                            return Err(Error::invalid(format!("speaker '{}' has no vectors", g.speaker_id)));
                        }
                        model.speaker_objective_grad(&g.vectors)
                    })
                    .collect();
                // fixed reduction order
                for (g, r) in chunk.iter().zip(results) {
                    let (value, pg, ge) = match r {
                        Ok(v) => v,
                        Err(Error::NonFinite(_)) => return Err(Error::Divergence { epoch, batch: b }),
                        Err(e) => return Err(e),
                    };
                    if !value.is_finite() {
                        return Err(Error::Divergence { epoch, batch: b });
                    }
                    let w = if config.per_speaker_average { 1.0 / g.vectors.len() as f64 } else { 1.0 };
                    epoch_total += w * value;
                    for (a, v) in acc[..n_flow].iter_mut().zip(&pg.0) {
                        *a += w * v;
                    }
                    for (a, v) in acc[n_flow..].iter_mut().zip(&ge) {
                        *a += w * v;
                    }
                }
                pending += take;
                g0 += take;
                let last_of_epoch = b + 1 == n_batches && g0 == groups.len();
                if pending >= update_every || (last_of_epoch && pending > 0) {
                    step(&mut opt, &mut params, &mut acc, pending, config.grad_clip_norm);
                    model.set_trainable_params(&params)?;
                    if params.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Divergence { epoch, batch: b });
                    }
                    step_sizes.push(pending);
                    pending = 0;
                }
            }
        }
        let mean = epoch_total / train.num_speakers() as f64;
        log::info!("epoch {}: mean objective {mean:.6}", epoch + 1);
        loss_trace.push(mean);
        on_epoch(epoch, &model);
    }
    let final_objective = mean_objective(&model, train, config.per_speaker_average)?;
    if !final_objective.is_finite() {
        return Err(Error::Divergence {
            epoch: config.epochs,
            batch: 0,
        });
    }
    Ok(FitReport {
        model,
        initial_objective,
        loss_trace,
        final_objective,
        step_sizes,
    })
}

fn step(opt: &mut Adam, params: &mut [f64], acc: &mut [f64], speakers: usize, clip: Option<f64>) {
    let inv = 1.0 / speakers as f64;
    acc.iter_mut().for_each(|g| *g *= inv);
    if let Some(c) = clip {
        let norm = acc.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            let s = c / norm;
            acc.iter_mut().for_each(|g| *g *= s);
        }
    }
    opt.ascend(params, acc);
    acc.iter_mut().for_each(|g| *g = 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::init_flow;
    use crate::plda::PldaModel;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_set(seed: u64, speakers: usize, per: usize, dim: usize) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        for s in 0..speakers {
            let mu: Vec<f64> = (0..dim).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            for u in 0..per {
                let x: Vec<f64> = mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
                recs.push((format!("s{s}u{u}"), format!("s{s}"), x));
            }
        }
        EmbeddingSet::from_records(dim, recs).unwrap()
    }

    #[test]
    fn identity_flow_marginal_is_plda_marginal() {
        let flow = init_flow(3, 2, 4, 0).unwrap();
        let m = NdaModel::new(flow, vec![0.3f64.ln(), 0.0, 1.2f64.ln()], vec![0.0; 3]).unwrap();
        let rows = vec![vec![0.1, -0.4, 2.0], vec![1.0, 0.2, -0.3]];
        let a = m.log_marginal(&rows).unwrap();
        let b = log_marginal(&m.epsilon(), &rows).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_flow_scores_match_plda() {
        let flow = init_flow(4, 3, 5, 1).unwrap();
        let mean = vec![0.5, -0.2, 0.1, 0.0];
        let eps = vec![0.4, 2.0, 0.05, 1.0];
        let m = NdaModel::new(flow, eps.iter().map(|e: &f64| e.ln()).collect(), mean.clone()).unwrap();
        let plda = PldaModel::from_parts(mean, DMatrix::identity(4, 4), m.epsilon()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let e: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let t: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let a = m.score_trial(&[&e], &t).unwrap();
            let b = plda.score_trial(&[&e], &t).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn score_equals_jacobian_inclusive_score() {
        let mut flow = init_flow(4, 4, 6, 3).unwrap();
        flow.perturb(0.3, 7);
        let m = NdaModel::new(flow, vec![0.2, -0.5, 0.9, 0.0], vec![0.1; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..4);
            let e: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let t: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
            let mut all = e.clone();
            all.push(t.clone());
            let long = m.log_marginal(&all).unwrap() - m.log_marginal(&[&t]).unwrap() - m.log_marginal(&e).unwrap();
            assert!((long - m.score_trial(&e, &t).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn truncated_epsilon_zeroes_smallest() {
        let flow = init_flow(4, 1, 2, 0).unwrap();
        let m = NdaModel::new(flow, vec![0.0, 2.0, -1.0, 1.0], vec![0.0; 4]).unwrap();
        let t = m.truncated_epsilon(2).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[2], 0.0);
        assert!(t[1] > 0.0 && t[3] > 0.0);
        assert!(m.truncated_epsilon(0).is_err());
    }

    #[test]
    fn start_objective_is_plda_objective() {
        let set = toy_set(1, 12, 4, 3);
        let flow = init_flow(3, 2, 4, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            speakers_per_batch: 5,
            ..TrainConfig::default()
        };
        let init = NdaModel::initial(&set, flow.clone()).unwrap();
        let eps = init.epsilon();
        let mut expected = 0.0;
        let groups = set.speaker_groups();
        for (_, rows) in &groups {
            let centered: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| set.vector(i).iter().zip(init.mean()).map(|(a, b)| a - b).collect())
                .collect();
            expected += log_marginal(&eps, &centered).unwrap();
        }
        expected /= groups.len() as f64;
        let report = fit_nda(&set, flow, &cfg).unwrap();
        assert!((report.initial_objective - expected).abs() < 1e-8);
        assert_eq!(report.step_sizes, vec![5, 5, 2, 5, 5, 2]);
    }

    #[test]
    fn deferred_updates_span_batches() {
        let set = toy_set(2, 10, 3, 2);
        let flow = init_flow(2, 1, 3, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            speakers_per_batch: 3,
            min_speakers_before_update: Some(4),
            ..TrainConfig::default()
        };
        let report = fit_nda(&set, flow, &cfg).unwrap();
        assert_eq!(report.step_sizes, vec![4, 4, 2]);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let set = toy_set(3, 30, 5, 4);
        let flow = init_flow(4, 2, 8, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            speakers_per_batch: 10,
            learning_rate: 5e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fit_nda(&set, flow.clone(), &cfg).unwrap();
        let b = fit_nda(&set, flow, &cfg).unwrap();
        assert_eq!(a.model.trainable_params(), b.model.trainable_params());
        assert!(a.final_objective > a.initial_objective);
        assert_eq!(a.loss_trace.len(), 8);
        assert!(a.model.epsilon().iter().all(|e| *e > 0.0));
    }

    #[test]
    fn rejects_bad_training_input() {
        let flow = init_flow(2, 1, 2, 0).unwrap();
        let single = EmbeddingSet::from_records(2, vec![("a", "s", vec![0.0, 1.0]), ("b", "s", vec![1.0, 0.0])]).unwrap();
        assert!(fit_nda(&single, flow.clone(), &TrainConfig::default()).is_err());
        let set = toy_set(4, 3, 2, 2);
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(fit_nda(&set, flow.clone(), &bad).is_err());
        let bad = TrainConfig {
            adam_beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(fit_nda(&set, flow, &bad).is_err());
    }

    #[test]
    fn transform_set_identity_and_roundtrip() {
        let set = toy_set(5, 4, 3, 4);
        let flow = init_flow(4, 2, 3, 0).unwrap();
        let m = NdaModel::new(flow, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(m.transform_set(&set).unwrap(), set);

        let mut flow = init_flow(4, 3, 5, 1).unwrap();
        flow.perturb(0.2, 3);
        let m = NdaModel::new(flow, vec![0.0; 4], vec![0.3; 4]).unwrap();
        let z = m.transform_set(&set).unwrap();
        assert_eq!(z.utt_ids(), set.utt_ids());
        for i in 0..set.len() {
            let x = m.flow().forward(z.vector(i)).unwrap();
            for (a, b) in x.iter().zip(m.mean()).zip(set.vector(i)).map(|((a, m), b)| (a + m, b)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn doc_roundtrip() {
        let mut flow = init_flow(3, 2, 3, 0).unwrap();
        flow.perturb(0.1, 1);
        let m = NdaModel::new(flow, vec![0.1, 0.2, 0.3], vec![1.0, 2.0, 3.0]).unwrap();
        let json = serde_json::to_string(&m.to_doc()).unwrap();
        assert_eq!(NdaModel::from_doc(serde_json::from_str(&json).unwrap()).unwrap(), m);
    }
}
