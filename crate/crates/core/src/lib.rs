//! Evolutionary clustering of categorical streams with temporal multinomial
//! mixtures.
//!
//! The temporal model couples adjacent epochs: an instance at epoch `t` is
//! scored against a pair of clusters `(z_t, z_{t-1})`, with the previous
//! epoch's component distribution damped by a weight `alpha`. Fitting is
//! plain EM with random restarts; no Dirichlet smoothing is involved, only a
//! numerical floor that keeps log-scores finite. A static per-epoch mixture
//! serves as the baseline, aligned across epochs by KL matching.
//!
//! Modules:
//! - [`corpus`]: instance data model, JSONL ingestion, epoch slicing.
//! - [`mixture`]: shared numerics and the static mixture EM.
//! - [`tmm`]: the temporal model (E-step, M-step, score, fit driver).
//! - [`evolution`]: hard assignment, origins, cluster linking, merges.
//! - [`metrics`]: homogeneity, co-occurrence level, unsmoothness, ARI.
//! - [`synth`]: planted-truth corpus generator for testing and evaluation.
//! - [`model`]: the shared model JSON format.

pub mod corpus;
pub mod error;
pub mod evolution;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod synth;
pub mod tmm;

pub use corpus::{Corpus, FeatureDescriptor, Instance, Polarity};
pub use error::{Error, Result};
pub use evolution::{Assignment, EvolutionGraph};
pub use metrics::MetricsReport;
pub use mixture::{EpochParams, FitConfig, FitResult};
pub use model::ModelFile;
pub use synth::{SynthConfig, SynthCorpus};
pub use tmm::{TmmParams, TmmPosteriors};
