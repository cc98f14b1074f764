//! Command-line front end. Each subcommand resolves its settings from an
//! optional `--config` JSON file with flag values laid over it.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::metrics::{gaussianality_report, operating_points_csv, MetricReport, DEFAULT_P_TARGETS};
use crate::nda::TrainConfig;
use crate::pipeline::{
    check_trial_inputs, format_scores, parse_scores, score_trials, train_nda_bundle, train_plda_bundle,
    PipelineConfig, Scorer,
};
use crate::synth::{generate_corpus, SynthSpec, WarpSpec};
use crate::vecstore::{read_embedding_set, read_trial_list, write_embedding_set, write_trial_list, EmbeddingSet, Format};

#[derive(Debug, Parser)]
#[command(name = "nda", version, about = "PLDA and NDA back-ends for embedding verification")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, trial list and oracle model.
    Gen(GenArgs),
    /// Fit a PLDA back-end and write a model bundle.
    TrainPlda(TrainPldaArgs),
    /// Train an NDA back-end and write a model bundle and loss trace.
    TrainNda(TrainNdaArgs),
    /// Score a trial list with a model bundle or oracle.
    Score(ScoreArgs),
    /// Compute EER and minDCF from a score file.
    Eval(EvalArgs),
    /// Report skewness and kurtosis before and after a model's transform.
    Diagnose(DiagnoseArgs),
    /// Write the latent vectors a model scores with.
    Transform(TransformArgs),
}

fn skip<T>(v: &Option<T>) -> bool {
    v.is_none()
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out_dir: Option<PathBuf>,
    /// Embedding file format: binary or csv.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub format: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub n_train_speakers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub n_eval_speakers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub utts_per_speaker: Option<usize>,
    /// Largest prior variance when `prior_variances` is not given.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub prior_hi: Option<f64>,
    /// Smallest prior variance when `prior_variances` is not given.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub prior_lo: Option<f64>,
    /// identity, sinh-arcsinh or rotation-cubic.
    #[arg(long)]
    #[serde(skip)]
    pub warp: Option<String>,
    #[arg(long)]
    #[serde(skip)]
    pub skew: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub tail: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub strength: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub out_dir: Option<PathBuf>,
    pub format: String,
    pub dim: usize,
    pub n_train_speakers: usize,
    pub n_eval_speakers: usize,
    pub utts_per_speaker: usize,
    pub prior_variances: Option<Vec<f64>>,
    pub prior_hi: f64,
    pub prior_lo: f64,
    pub warp: WarpSpec,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        GenConfig {
            out_dir: None,
            format: "binary".into(),
            dim: s.dim,
            n_train_speakers: s.n_train_speakers,
            n_eval_speakers: s.n_eval_speakers,
            utts_per_speaker: s.utts_per_speaker,
            prior_variances: None,
            prior_hi: 2.0,
            prior_lo: 0.05,
            warp: s.warp,
            seed: s.seed,
        }
    }
}

impl GenConfig {
    pub fn spec(&self) -> Result<SynthSpec> {
        if !(self.prior_hi > 0.0 && self.prior_lo > 0.0) {
            return Err(Error::invalid("prior_hi and prior_lo must be positive"));
        }
        let spec = SynthSpec {
            dim: self.dim,
            n_train_speakers: self.n_train_speakers,
            n_eval_speakers: self.n_eval_speakers,
            utts_per_speaker: self.utts_per_speaker,
            prior_variances: self
                .prior_variances
                .clone()
                .unwrap_or_else(|| SynthSpec::geometric_prior(self.dim, self.prior_hi, self.prior_lo)),
            warp: self.warp,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineFlags {
    /// Subtract the training mean first.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "skip")]
    pub center: Option<bool>,
    /// Scale every vector to norm sqrt(dim) after centering.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "skip")]
    pub length_norm: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub lda_dim: Option<usize>,
    /// Length-normalize again after LDA.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "skip")]
    pub length_norm_after_lda: Option<bool>,
    /// Score with only the dimensions of largest prior variance.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub truncate_dim: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainPldaArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPldaConfig {
    pub train: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

#[derive(Debug, Args, Serialize)]
pub struct FlowFlags {
    #[arg(long = "layers")]
    #[serde(skip_serializing_if = "skip")]
    pub n_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub depth: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub scale_cap: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub speakers_per_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub min_speakers_before_update: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub grad_clip_norm: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "skip")]
    pub per_speaker_average: Option<bool>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainNdaArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub out: Option<PathBuf>,
    /// Defaults to the model path with a `.loss.txt` suffix.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    pub loss_trace: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    #[command(flatten)]
    pub flow: FlowFlags,
    #[command(flatten)]
    pub training: TrainFlags,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainNdaConfig {
    pub train: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_trace: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub flow: FlowConfig,
    pub training: TrainConfig,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Model bundle or oracle JSON.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Target prior for minDCF; repeatable. Defaults to 0.01 and 0.001.
    #[arg(long = "p-target")]
    pub p_target: Vec<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also write (P_miss, P_fa) operating points as CSV.
    #[arg(long)]
    pub det_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Model whose latent space is diagnosed alongside the raw set.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a subcommand with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_input_error() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, t) => *slot = t,
    }
}

fn resolve<T: DeserializeOwned>(config: Option<&Path>, overrides: Value) -> CliResult<T> {
    let mut base = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => Value::Object(Map::new()),
    };
    merge_json(&mut base, overrides);
    serde_json::from_value(base).map_err(|e| usage(format!("invalid configuration: {e}")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("flag structs serialize")
}

fn require<'a>(v: &'a Option<PathBuf>, name: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| usage(format!("missing required setting '{name}' (flag or config)")))
}

fn require_exists(path: &Path) -> CliResult<()> {
    if !path.exists() {
        return Err(usage(format!("{}: no such file or directory", path.display())));
    }
    Ok(())
}

fn read_set(path: &Path) -> CliResult<EmbeddingSet> {
    require_exists(path)?;
    Ok(read_embedding_set(path, Format::from_path(path))?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn gen_overrides(a: &GenArgs) -> CliResult<Value> {
    let mut v = to_value(a);
    let warp = match a.warp.as_deref() {
        None => {
            // parameters alone refine whatever warp the config selects
            let mut w = Map::new();
            for (k, x) in [("skew", a.skew), ("tail", a.tail), ("strength", a.strength)] {
                if let Some(x) = x {
                    w.insert(k.into(), x.into());
                }
            }
            (!w.is_empty()).then_some(Value::Object(w))
        }
        Some("identity") => Some(serde_json::json!({ "kind": "identity" })),
        Some("sinh-arcsinh") => Some(serde_json::json!({
            "kind": "elementwise_sinh_arcsinh",
            "skew": a.skew.unwrap_or(0.0),
            "tail": a.tail.unwrap_or(0.5),
        })),
        Some("rotation-cubic") => Some(serde_json::json!({
            "kind": "rotation_then_cubic",
            "strength": a.strength.unwrap_or(1.0),
        })),
        Some(other) => return Err(usage(format!("unknown warp '{other}' (identity, sinh-arcsinh, rotation-cubic)"))),
    };
    if let Some(w) = warp {
        v["warp"] = w;
    }
    Ok(v)
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require_exists(c)?;
    }
    let cfg: GenConfig = resolve(a.config.as_deref(), gen_overrides(a)?)?;
    let out_dir = require(&cfg.out_dir, "out_dir")?;
    let format: Format = cfg.format.parse()?;
    let spec = cfg.spec()?;
    let corpus = generate_corpus(&spec)?;
    let ext = match format {
        Format::Csv => "csv",
        Format::Binary => "bin",
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_embedding_set(&corpus.train, out_dir.join(format!("train.{ext}")), format)?;
    write_embedding_set(&corpus.eval, out_dir.join(format!("eval.{ext}")), format)?;
    write_trial_list(&corpus.trials, out_dir.join("trials.txt"))?;
    let oracle = serde_json::to_string_pretty(&corpus.oracle.to_doc()).map_err(Error::from)?;
    write_text(&out_dir.join("oracle.json"), &oracle)?;
    log::info!(
        "wrote {} train and {} eval vectors, {} trials to {}",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.trials.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_train_plda(a: &TrainPldaArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require_exists(c)?;
    }
    let cfg: TrainPldaConfig = resolve(a.config.as_deref(), to_value(a))?;
    let train_path = require(&cfg.train, "train")?;
    let out = require(&cfg.out, "out")?;
    let train = read_set(train_path)?;
    let bundle = train_plda_bundle(&train, &cfg.pipeline)?;
    write_text(out, &bundle.to_json()?)
}

fn cmd_train_nda(a: &TrainNdaArgs) -> CliResult<()> {
    if let Some(c) = &a.config {
        require_exists(c)?;
    }
    let cfg: TrainNdaConfig = resolve(a.config.as_deref(), to_value(a))?;
    let train_path = require(&cfg.train, "train")?;
    let out = require(&cfg.out, "out")?;
    cfg.training.validate()?;
    let trace_path = cfg.loss_trace.clone().unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".loss.txt");
        PathBuf::from(p)
    });
    let train = read_set(train_path)?;
    let (bundle, report) = train_nda_bundle(&train, &cfg.pipeline, &cfg.flow, &cfg.training)?;
    let mut trace = String::new();
    for (e, v) in report.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{} {v}\n", e + 1));
    }
    write_text(out, &bundle.to_json()?)?;
    write_text(&trace_path, &trace)
}

fn cmd_score(a: &ScoreArgs) -> CliResult<()> {
    for p in [&a.model, &a.embeddings, &a.trials] {
        require_exists(p)?;
    }
    let scorer = Scorer::load(&a.model)?;
    let set = read_set(&a.embeddings)?;
    let trials = read_trial_list(&a.trials)?;
    check_trial_inputs(&scorer, &set, &trials)?;
    let scores = score_trials(&scorer, &set, &trials)?;
    write_text(&a.out, &format_scores(&trials, &scores))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    require_exists(&a.scores)?;
    let text = fs::read_to_string(&a.scores).map_err(|e| Error::io(&a.scores, e))?;
    let set = parse_scores(&text).map_err(|(row, message)| {
        CliError::from(Error::Parse {
            path: a.scores.clone(),
            row,
            message,
        })
    })?;
    let p_tars = if a.p_target.is_empty() {
        DEFAULT_P_TARGETS.to_vec()
    } else {
        a.p_target.clone()
    };
    let report = MetricReport::compute(&set, &p_tars)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    print!("{report}");
    if let Some(p) = &a.json {
        write_text(p, &json)?;
    }
    if let Some(p) = &a.det_csv {
        write_text(p, &operating_points_csv(&set))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseReport {
    before: crate::metrics::GaussReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    after: Option<crate::metrics::GaussReport>,
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    require_exists(&a.embeddings)?;
    if let Some(m) = &a.model {
        require_exists(m)?;
    }
    let scorer = a.model.as_ref().map(Scorer::load).transpose()?;
    let set = read_set(&a.embeddings)?;
    if let Some(s) = &scorer {
        if s.input_dim() != set.dim() {
            return Err(Error::Dimension {
                expected: s.input_dim(),
                found: set.dim(),
            }
            .into());
        }
    }
    let before = gaussianality_report(&set)?;
    let after = match &scorer {
        Some(s) => Some(gaussianality_report(&s.embed_set(&set)?)?),
        None => None,
    };
    println!("before transform\n{before}");
    if let Some(r) = &after {
        println!("after transform\n{r}");
    }
    if let Some(p) = &a.json {
        let json = serde_json::to_string_pretty(&DiagnoseReport { before, after }).map_err(Error::from)?;
        write_text(p, &json)?;
    }
    Ok(())
}

fn cmd_transform(a: &TransformArgs) -> CliResult<()> {
    require_exists(&a.model)?;
    let scorer = Scorer::load(&a.model)?;
    let set = read_set(&a.embeddings)?;
    let out = scorer.embed_set(&set)?;
    write_embedding_set(&out, &a.out, Format::from_path(&a.out))?;
    Ok(())
}

pub fn execute(cli: &Cli) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainPlda(a) => cmd_train_plda(a),
        Command::TrainNda(a) => cmd_train_nda(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Transform(a) => cmd_transform(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overrides_nested_values() {
        let mut base = serde_json::json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge_json(&mut base, serde_json::json!({"b": {"c": 5}, "e": true}));
        assert_eq!(base, serde_json::json!({"a": 1, "b": {"c": 5, "d": 3}, "e": true}));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"training": {"epochs": 7, "learning_rate": 0.01}, "pipeline": {"center": true}}"#).unwrap();
        let cli = Cli::try_parse_from([
            "nda", "train-nda", "--config", cfg.to_str().unwrap(), "--epochs", "3", "--train", "t.bin", "--out", "m.json",
        ])
        .unwrap();
        let Command::TrainNda(a) = &cli.command else { panic!() };
        let r: TrainNdaConfig = resolve(a.config.as_deref(), to_value(a)).unwrap();
        assert_eq!(r.training.epochs, 3);
        assert_eq!(r.training.learning_rate, 0.01);
        assert!(r.pipeline.center);
        assert_eq!(r.flow, FlowConfig::default());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let e = resolve::<TrainPldaConfig>(None, serde_json::json!({"bogus": 1})).unwrap_err();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn warp_flags() {
        let cli = Cli::try_parse_from(["nda", "gen", "--warp", "rotation-cubic", "--strength", "0.3"]).unwrap();
        let Command::Gen(a) = &cli.command else { panic!() };
        let cfg: GenConfig = resolve(None, gen_overrides(a).unwrap()).unwrap();
        assert_eq!(cfg.warp, WarpSpec::RotationThenCubic { strength: 0.3 });
        let cli = Cli::try_parse_from(["nda", "gen", "--warp", "spiral"]).unwrap();
        let Command::Gen(a) = &cli.command else { panic!() };
        assert!(gen_overrides(a).is_err());
    }

    #[test]
    fn missing_input_exits_2_naming_path() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.json");
        let code = run(["nda", "train-plda", "--train", "/nonexistent/train.bin", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }
}
