//! Model bundles: a fitted preprocessing chain plus a PLDA or NDA back-end,
//! stored together so scoring always replays the training pipeline.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{init_flow_with, FlowConfig};
use crate::metrics::ScoreSet;
use crate::nda::{fit_nda_from, FitReport, NdaDoc, NdaModel, TrainConfig};
use crate::plda::{fit_plda, latent_llr, PldaDoc, PldaModel};
use crate::preprocess::{fit_lda, length_normalize_vector, LdaDoc, LdaTransform};
use crate::synth::{OracleDoc, OracleModel, ORACLE_FORMAT};
use crate::vecstore::{EmbeddingSet, TrialList};

pub const BUNDLE_FORMAT: &str = "nda-bundle";

/// Preprocessing toggles, applied in the order center, length-norm, LDA,
/// length-norm again.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub center: bool,
    pub length_norm: bool,
    pub lda_dim: Option<usize>,
    pub length_norm_after_lda: bool,
    /// Keep only the dimensions with the largest prior variances.
    pub truncate_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    input_dim: usize,
    center: Option<Vec<f64>>,
    length_norm: bool,
    lda: Option<LdaTransform>,
    post_norm: bool,
}

impl Preprocessor {
    pub fn identity(dim: usize) -> Self {
        Preprocessor {
            input_dim: dim,
            center: None,
            length_norm: false,
            lda: None,
            post_norm: false,
        }
    }

    /// Fits the chain on `train` and returns it with the transformed set.
    pub fn fit(train: &EmbeddingSet, config: &PipelineConfig) -> Result<(Self, EmbeddingSet)> {
        let mut pre = Preprocessor::identity(train.dim());
        if config.center {
            let mut mean = vec![0.0; train.dim()];
            for v in train.vectors() {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= train.len().max(1) as f64);
            pre.center = Some(mean);
        }
        pre.length_norm = config.length_norm;
        let staged = pre.apply_set(train)?;
        if let Some(k) = config.lda_dim {
            pre.lda = Some(fit_lda(&staged, k)?);
        }
        pre.post_norm = config.length_norm_after_lda;
        let out = pre.apply_set(train)?;
        Ok((pre, out))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.lda.as_ref().map_or(self.input_dim, LdaTransform::out_dim)
    }

    pub fn apply_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input vector".into()));
        }
        let mut v = match &self.center {
            Some(m) => x.iter().zip(m).map(|(a, b)| a - b).collect(),
            None => x.to_vec(),
        };
        if self.length_norm {
            v = length_normalize_vector(&v, (v.len() as f64).sqrt())
                .ok_or_else(|| Error::invalid("zero vector cannot be length-normalized"))?;
        }
        if let Some(l) = &self.lda {
            v = l.apply_vector(&v)?;
        }
        if self.post_norm {
            v = length_normalize_vector(&v, (v.len() as f64).sqrt())
                .ok_or_else(|| Error::invalid("zero vector cannot be length-normalized after LDA"))?;
        }
        Ok(v)
    }

    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                found: set.dim(),
            });
        }
        set.map_vectors(self.output_dim(), |i, v| {
            self.apply_vector(v).map_err(|e| match e {
                Error::InvalidInput(m) => Error::invalid(format!("utterance '{}': {m}", set.utt_id(i))),
                other => other,
            })
        })
    }

    fn to_doc(&self) -> PreprocessDoc {
        PreprocessDoc {
            input_dim: self.input_dim,
            center: self.center.clone(),
            length_norm: self.length_norm,
            lda: self.lda.as_ref().map(LdaTransform::to_doc),
            length_norm_after_lda: self.post_norm,
        }
    }

    fn from_doc(doc: &PreprocessDoc) -> Result<Self> {
        if doc.center.as_ref().is_some_and(|c| c.len() != doc.input_dim) {
            return Err(Error::invalid("centering vector length differs from input dim"));
        }
        let lda = doc.lda.as_ref().map(LdaTransform::from_doc).transpose()?;
        if lda.as_ref().is_some_and(|l| l.in_dim() != doc.input_dim) {
            return Err(Error::invalid("LDA input dim differs from bundle input dim"));
        }
        Ok(Preprocessor {
            input_dim: doc.input_dim,
            center: doc.center.clone(),
            length_norm: doc.length_norm,
            lda,
            post_norm: doc.length_norm_after_lda,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Plda(PldaModel),
    Nda { model: NdaModel, truncate_dim: Option<usize> },
}

impl Backend {
    pub fn input_dim(&self) -> usize {
        match self {
            Backend::Plda(m) => m.input_dim(),
            Backend::Nda { model, .. } => model.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub preprocess: Preprocessor,
    pub backend: Backend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessDoc {
    pub input_dim: usize,
    pub center: Option<Vec<f64>>,
    pub length_norm: bool,
    pub lda: Option<LdaDoc>,
    #[serde(default)]
    pub length_norm_after_lda: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDoc {
    Plda {
        model: PldaDoc,
    },
    Nda {
        model: NdaDoc,
        truncate_dim: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleDoc {
    pub format: String,
    pub version: u32,
    pub preprocess: PreprocessDoc,
    pub backend: BackendDoc,
}

impl ModelBundle {
    pub fn new(preprocess: Preprocessor, backend: Backend) -> Result<Self> {
        if preprocess.output_dim() != backend.input_dim() {
            return Err(Error::Dimension {
                expected: backend.input_dim(),
                found: preprocess.output_dim(),
            });
        }
        if let Backend::Nda {
            model,
            truncate_dim: Some(k),
        } = &backend
        {
            model.truncated_epsilon(*k)?;
        }
        Ok(ModelBundle { preprocess, backend })
    }

    pub fn input_dim(&self) -> usize {
        self.preprocess.input_dim()
    }

    pub fn to_doc(&self) -> BundleDoc {
        BundleDoc {
            format: BUNDLE_FORMAT.into(),
            version: 1,
            preprocess: self.preprocess.to_doc(),
            backend: match &self.backend {
                Backend::Plda(m) => BackendDoc::Plda { model: m.to_doc() },
                Backend::Nda { model, truncate_dim } => BackendDoc::Nda {
                    model: model.to_doc(),
                    truncate_dim: *truncate_dim,
                },
            },
        }
    }

    pub fn from_doc(doc: BundleDoc) -> Result<Self> {
        if doc.format != BUNDLE_FORMAT || doc.version != 1 {
            return Err(Error::invalid(format!("unsupported bundle {} v{}", doc.format, doc.version)));
        }
        let preprocess = Preprocessor::from_doc(&doc.preprocess)?;
        let backend = match doc.backend {
            BackendDoc::Plda { model } => Backend::Plda(PldaModel::from_doc(&model)?),
            BackendDoc::Nda { model, truncate_dim } => Backend::Nda {
                model: NdaModel::from_doc(model)?,
                truncate_dim,
            },
        };
        ModelBundle::new(preprocess, backend)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }
}

pub fn train_plda_bundle(train: &EmbeddingSet, config: &PipelineConfig) -> Result<ModelBundle> {
    let (pre, data) = Preprocessor::fit(train, config)?;
    let mut model = fit_plda(&data)?;
    if let Some(k) = config.truncate_dim {
        model = model.truncate_dims(k)?;
    }
    ModelBundle::new(pre, Backend::Plda(model))
}

/// Fits the preprocessing chain, then trains NDA from an identity flow
/// seeded with `train_config.seed`.
pub fn train_nda_bundle(
    train: &EmbeddingSet,
    config: &PipelineConfig,
    flow_config: &FlowConfig,
    train_config: &TrainConfig,
) -> Result<(ModelBundle, FitReport)> {
    train_config.validate()?;
    let (pre, data) = Preprocessor::fit(train, config)?;
    let flow = init_flow_with(data.dim(), flow_config, train_config.seed)?;
    let init = NdaModel::initial(&data, flow)?;
    if let Some(k) = config.truncate_dim {
        init.truncated_epsilon(k)?;
    }
    let report = fit_nda_from(init, &data, train_config)?;
    let bundle = ModelBundle::new(
        pre,
        Backend::Nda {
            model: report.model.clone(),
            truncate_dim: config.truncate_dim,
        },
    )?;
    Ok((bundle, report))
}

/// Anything that can score trials: a trained bundle or a synthetic oracle.
#[derive(Debug, Clone)]
pub enum Scorer {
    Bundle(ModelBundle),
    Oracle(OracleModel),
}

impl Scorer {
    pub fn input_dim(&self) -> usize {
        match self {
            Scorer::Bundle(b) => b.input_dim(),
            Scorer::Oracle(o) => o.dim(),
        }
    }

    /// Maps an input vector to the latent space where scoring happens.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        match self {
            Scorer::Bundle(b) => {
                let v = b.preprocess.apply_vector(x)?;
                match &b.backend {
                    Backend::Plda(m) => m.project(&v),
                    Backend::Nda { model, .. } => model.latent(&v),
                }
            }
            Scorer::Oracle(o) => o.warp.invert(x),
        }
    }

    /// Prior variances used with latent vectors from [`Scorer::embed`].
    pub fn epsilon(&self) -> Vec<f64> {
        match self {
            Scorer::Bundle(b) => match &b.backend {
                Backend::Plda(m) => m.epsilon().to_vec(),
                Backend::Nda { model, truncate_dim } => match truncate_dim {
                    Some(k) => model.truncated_epsilon(*k).expect("validated at construction"),
                    None => model.epsilon(),
                },
            },
            Scorer::Oracle(o) => o.prior_variances.clone(),
        }
    }

    pub fn score_trial<R: AsRef<[f64]>>(&self, enroll: &[R], test: &[f64]) -> Result<f64> {
        if enroll.is_empty() {
            return Err(Error::invalid("trial needs at least one enrollment vector"));
        }
        let e: Vec<Vec<f64>> = enroll.iter().map(|r| self.embed(r.as_ref())).collect::<Result<_>>()?;
        latent_llr(&self.epsilon(), &e, &self.embed(test)?)
    }

    pub fn embed_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let rows: Vec<Vec<f64>> = (0..set.len())
            .into_par_iter()
            .map(|i| self.embed(set.vector(i)))
            .collect::<Result<_>>()?;
        let dim = rows.first().map_or(self.epsilon().len(), Vec::len);
        set.with_vectors(dim, rows.concat())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(BUNDLE_FORMAT) => Ok(Scorer::Bundle(ModelBundle::from_doc(serde_json::from_value(value)?)?)),
            Some(ORACLE_FORMAT) => {
                let doc: OracleDoc = serde_json::from_value(value)?;
                Ok(Scorer::Oracle(OracleModel::from_doc(&doc)?))
            }
            Some(other) => Err(Error::invalid(format!("cannot score with a '{other}' document"))),
            None => Err(Error::invalid("model document has no format field")),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scorer::from_json(&text).map_err(|e| match e {
            Error::InvalidInput(message) => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            Error::Json(j) => Error::Format {
                path: path.to_path_buf(),
                message: j.to_string(),
            },
            other => other,
        })
    }
}

/// Checks that `set` covers every utterance in `trials` and has the
/// scorer's input dimension.
pub fn check_trial_inputs(scorer: &Scorer, set: &EmbeddingSet, trials: &TrialList) -> Result<()> {
    if set.dim() != scorer.input_dim() {
        return Err(Error::Dimension {
            expected: scorer.input_dim(),
            found: set.dim(),
        });
    }
    let missing = trials.missing_utts(set);
    if !missing.is_empty() {
        const SHOWN: usize = 20;
        let mut list = missing.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
        if missing.len() > SHOWN {
            list.push_str(&format!(", ... ({} more)", missing.len() - SHOWN));
        }
        return Err(Error::invalid(format!(
            "trial list references {} utterance(s) not in the embedding set: {list}",
            missing.len()
        )));
    }
    Ok(())
}

/// Scores every trial. Each referenced utterance is embedded once; trials
/// are then scored independently.
pub fn score_trials(scorer: &Scorer, set: &EmbeddingSet, trials: &TrialList) -> Result<Vec<f64>> {
    check_trial_inputs(scorer, set, trials)?;
    let index = set.index();
    let mut needed: Vec<usize> = trials
        .trials
        .iter()
        .flat_map(|t| t.enroll.iter().chain(std::iter::once(&t.test)))
        .map(|u| index[u.as_str()])
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let latents: Vec<Vec<f64>> = needed
        .par_iter()
        .map(|&i| {
            scorer.embed(set.vector(i)).map_err(|e| match e {
                Error::InvalidInput(m) => Error::invalid(format!("utterance '{}': {m}", set.utt_id(i))),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let latent: HashMap<usize, &Vec<f64>> = needed.iter().copied().zip(latents.iter()).collect();
    let eps = scorer.epsilon();
    trials
        .trials
        .par_iter()
        .map(|t| {
            let e: Vec<&Vec<f64>> = t.enroll.iter().map(|u| latent[&index[u.as_str()]]).collect();
            latent_llr(&eps, &e, latent[&index[t.test.as_str()]])
        })
        .collect()
}

/// One `enrolls test score label` line per trial.
pub fn format_scores(trials: &TrialList, scores: &[f64]) -> String {
    let mut out = String::new();
    for (t, s) in trials.trials.iter().zip(scores) {
        out.push_str(&format!(
            "{} {} {s:e} {}\n",
            t.enroll.join(","),
            t.test,
            if t.is_target { "target" } else { "nontarget" }
        ));
    }
    out
}

/// Parses a score file back into a [`ScoreSet`]; errors carry the 1-based row.
pub fn parse_scores(text: &str) -> std::result::Result<ScoreSet, (usize, String)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut refs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err((row, format!("expected 4 fields (enrolls test score label), found {}", f.len())));
        }
        let s: f64 = f[2].parse().map_err(|_| (row, format!("bad score '{}'", f[2])))?;
        if !s.is_finite() {
            return Err((row, format!("non-finite score '{}'", f[2])));
        }
        let l = match f[3] {
            "target" => true,
            "nontarget" => false,
            other => return Err((row, format!("unknown label '{other}'"))),
        };
        scores.push(s);
        labels.push(l);
        refs.push(refs.len());
    }
    ScoreSet::new(scores, labels)
        .and_then(|s| s.with_trial_refs(refs))
        .map_err(|e| (0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::init_flow;
    use crate::synth::{generate_corpus, SynthSpec, WarpSpec};

    fn small_corpus() -> crate::synth::Corpus {
        let spec = SynthSpec {
            dim: 4,
            n_train_speakers: 40,
            n_eval_speakers: 6,
            utts_per_speaker: 5,
            prior_variances: vec![2.0, 1.0, 0.5, 0.25],
            warp: WarpSpec::ElementwiseSinhArcsinh { skew: 0.0, tail: 0.8 },
            seed: 11,
        };
        generate_corpus(&spec).unwrap()
    }

    #[test]
    fn plda_bundle_matches_direct_scoring() {
        let c = small_corpus();
        let bundle = train_plda_bundle(&c.train, &PipelineConfig::default()).unwrap();
        let direct = fit_plda(&c.train).unwrap();
        let scorer = Scorer::Bundle(bundle);
        let scores = score_trials(&scorer, &c.eval, &c.trials).unwrap();
        let idx = c.eval.index();
        for (t, s) in c.trials.trials.iter().zip(&scores) {
            let e: Vec<&[f64]> = t.enroll.iter().map(|u| c.eval.vector(idx[u.as_str()])).collect();
            let d = direct.score_trial(&e, c.eval.vector(idx[t.test.as_str()])).unwrap();
            assert!((s - d).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_nda_bundle_matches_plda_bundle() {
        let c = small_corpus();
        let plda = train_plda_bundle(&c.train, &PipelineConfig::default()).unwrap();
        let Backend::Plda(m) = &plda.backend else { unreachable!() };
        // whiten the data so that PLDA's T is the identity in the new space
        let white = c.train.map_vectors(4, |_, v| m.project(v)).unwrap();
        let eval = c.eval.map_vectors(4, |_, v| m.project(v)).unwrap();
        let pm = fit_plda(&white).unwrap();
        let log_eps: Vec<f64> = pm.epsilon().iter().map(|e| e.ln()).collect();
        let nda = NdaModel::new(init_flow(4, 2, 3, 0).unwrap(), log_eps, pm.mean().to_vec()).unwrap();
        let ps = Scorer::Bundle(ModelBundle::new(Preprocessor::identity(4), Backend::Plda(pm.clone())).unwrap());
        let ns = Scorer::Bundle(
            ModelBundle::new(
                Preprocessor::identity(4),
                Backend::Nda {
                    model: nda,
                    truncate_dim: None,
                },
            )
            .unwrap(),
        );
        let a = score_trials(&ps, &eval, &c.trials).unwrap();
        let b = score_trials(&ns, &eval, &c.trials).unwrap();
        // pm's T is the identity up to estimation noise of order 1e-15
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8, "{x} {y}");
        }
    }

    #[test]
    fn bundle_json_roundtrip_with_full_chain() {
        let c = small_corpus();
        let cfg = PipelineConfig {
            center: true,
            length_norm: true,
            lda_dim: Some(3),
            length_norm_after_lda: true,
            truncate_dim: Some(2),
        };
        let b = train_plda_bundle(&c.train, &cfg).unwrap();
        assert_eq!(b.preprocess.output_dim(), 3);
        let y = b.preprocess.apply_vector(c.eval.vector(0)).unwrap();
        assert!((y.iter().map(|v| v * v).sum::<f64>() - 3.0).abs() < 1e-9);
        let back = Scorer::from_json(&b.to_json().unwrap()).unwrap();
        let Scorer::Bundle(back) = back else { panic!() };
        assert_eq!(back, b);
        let scores = score_trials(&Scorer::Bundle(b), &c.eval, &c.trials).unwrap();
        assert!(scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn oracle_scorer_loads_and_scores() {
        let c = small_corpus();
        let json = serde_json::to_string(&c.oracle.to_doc()).unwrap();
        let s = Scorer::from_json(&json).unwrap();
        let scores = score_trials(&s, &c.eval, &c.trials).unwrap();
        let idx = c.eval.index();
        let t = &c.trials.trials[0];
        let e: Vec<&[f64]> = t.enroll.iter().map(|u| c.eval.vector(idx[u.as_str()])).collect();
        let d = c.oracle.score(&e, c.eval.vector(idx[t.test.as_str()])).unwrap();
        assert_eq!(scores[0], d);
    }

    #[test]
    fn missing_utterances_are_listed() {
        let c = small_corpus();
        let s = Scorer::Oracle(c.oracle.clone());
        let trials = TrialList::parse("ghost1 eval00000-001 target\neval00000-000 ghost2 nontarget\n").unwrap();
        let err = score_trials(&s, &c.eval, &trials).unwrap_err().to_string();
        assert!(err.contains("ghost1") && err.contains("ghost2"), "{err}");
    }

    #[test]
    fn shuffled_trials_give_same_scores() {
        let c = small_corpus();
        let s = Scorer::Oracle(c.oracle.clone());
        let a = score_trials(&s, &c.eval, &c.trials).unwrap();
        let mut rev = c.trials.clone();
        rev.trials.reverse();
        let b = score_trials(&s, &c.eval, &rev).unwrap();
        let mut br = b.clone();
        br.reverse();
        assert_eq!(a, br);
    }

    #[test]
    fn score_text_roundtrip() {
        let trials = TrialList::parse("a,b c target\nd e nontarget\n").unwrap();
        let text = format_scores(&trials, &[1.25, -3.5e-7]);
        assert_eq!(text, "a,b c 1.25e0 target\nd e -3.5e-7 nontarget\n");
        let set = parse_scores(&text).unwrap();
        assert_eq!(set.scores(), &[1.25, -3.5e-7]);
        assert_eq!(parse_scores("a b 1.0\n").unwrap_err().0, 1);
        assert_eq!(parse_scores("a b x target\n").unwrap_err().0, 1);
    }

    #[test]
    fn multi_enrollment_uses_joint_marginal() {
        let c = small_corpus();
        let s = Scorer::Oracle(c.oracle.clone());
        let spk0: Vec<&str> = c.eval.utt_ids()[..3].iter().map(String::as_str).collect();
        let trials = TrialList::parse(&format!("{},{} {} target\n", spk0[0], spk0[1], spk0[2])).unwrap();
        let got = score_trials(&s, &c.eval, &trials).unwrap()[0];
        let idx = c.eval.index();
        let e = [c.eval.vector(idx[spk0[0]]), c.eval.vector(idx[spk0[1]])];
        assert_eq!(got, c.oracle.score(&e, c.eval.vector(idx[spk0[2]])).unwrap());
    }
}
