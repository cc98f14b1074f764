//! Speaker-verification back-ends: two-covariance PLDA and its nonlinear
//! extension, PLDA in the latent space of an affine-coupling flow.

pub mod cli;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod metrics;
pub mod nda;
pub mod optim;
pub mod pipeline;
pub mod plda;
pub mod preprocess;
pub mod synth;
pub mod vecstore;

pub use error::{Error, Result};
pub use flow::{init_flow, FlowModel};
pub use metrics::{compute_eer, compute_min_dcf, gaussianality_report, GaussReport, ScoreSet};
pub use nda::{fit_nda, FitReport, NdaModel, TrainConfig};
pub use pipeline::{ModelBundle, PipelineConfig, Scorer};
pub use plda::{fit_plda, PldaModel};
pub use synth::{generate_corpus, SynthSpec, WarpSpec};
pub use vecstore::{EmbeddingSet, Trial, TrialList};
