//! The on-disk model format shared by the static and temporal fits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureDescriptor};
use crate::error::{Error, Result};
use crate::mixture::EpochParams;
use crate::tmm::TmmParams;

/// Serialized model: per-epoch priors and component rows plus the feature
/// labels they are indexed by. `alpha` is present for temporal models only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    pub alpha: Option<f64>,
    /// `[T][K]`
    pub pi: Vec<Vec<f64>>,
    /// `[T][K][V]`
    pub phi: Vec<Vec<Vec<f64>>>,
    pub features: Vec<String>,
}

impl ModelFile {
    pub fn from_tmm(params: &TmmParams, features: &[FeatureDescriptor]) -> ModelFile {
        ModelFile {
            model: "tmm".into(),
            t: params.t(),
            k: params.k(),
            v: params.v(),
            alpha: Some(params.alpha),
            pi: params.epochs.iter().map(|e| e.pi.clone()).collect(),
            phi: params.epochs.iter().map(|e| e.phi.clone()).collect(),
            features: features.iter().map(|f| f.label.clone()).collect(),
        }
    }

    pub fn from_mm(epochs: &[EpochParams], features: &[FeatureDescriptor]) -> ModelFile {
        ModelFile {
            model: "mm".into(),
            t: epochs.len(),
            k: epochs.first().map_or(0, EpochParams::k),
            v: epochs.first().map_or(0, EpochParams::v),
            alpha: None,
            pi: epochs.iter().map(|e| e.pi.clone()).collect(),
            phi: epochs.iter().map(|e| e.phi.clone()).collect(),
            features: features.iter().map(|f| f.label.clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model != "mm" && self.model != "tmm" {
            return Err(Error::InvalidConfig(format!(
                "unknown model kind {:?}",
                self.model
            )));
        }
        if self.model == "tmm" && self.alpha.is_none() {
            return Err(Error::InvalidConfig("tmm model without alpha".into()));
        }
        if self.features.len() != self.v {
            return Err(Error::ShapeMismatch(format!(
                "V={} but {} feature labels",
                self.v,
                self.features.len()
            )));
        }
        if self.pi.len() != self.t || self.phi.len() != self.t {
            return Err(Error::ShapeMismatch("pi/phi epoch count != T".into()));
        }
        for (pi, phi) in self.pi.iter().zip(&self.phi) {
            if pi.len() != self.k || phi.len() != self.k {
                return Err(Error::ShapeMismatch("cluster count != K".into()));
            }
            let pi_sum: f64 = pi.iter().sum();
            if (pi_sum - 1.0).abs() > 1e-9 || pi.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Numeric("pi is not a distribution".into()));
            }
            for row in phi {
                if row.len() != self.v {
                    return Err(Error::ShapeMismatch("phi row length != V".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::Numeric(
                        "phi row is not a strictly positive distribution".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-epoch parameter containers.
    pub fn to_epoch_params(&self) -> Vec<EpochParams> {
        self.pi
            .iter()
            .zip(&self.phi)
            .map(|(pi, phi)| EpochParams {
                phi: phi.clone(),
                pi: pi.clone(),
            })
            .collect()
    }

    /// Temporal parameters; requires `alpha`.
    pub fn to_tmm_params(&self) -> Result<TmmParams> {
        let alpha = self
            .alpha
            .ok_or_else(|| Error::InvalidConfig("model has no alpha".into()))?;
        Ok(TmmParams {
            epochs: self.to_epoch_params(),
            alpha,
        })
    }

    /// Check this model is usable with `corpus`, naming the first mismatched
    /// dimension.
    pub fn check_compatible(&self, corpus: &Corpus) -> Result<()> {
        if self.v != corpus.v() {
            return Err(Error::ShapeMismatch(format!(
                "V: model has {} features, corpus has {}",
                self.v,
                corpus.v()
            )));
        }
        if self.t != corpus.t() {
            return Err(Error::ShapeMismatch(format!(
                "T: model has {} epochs, corpus has {}",
                self.t,
                corpus.t()
            )));
        }
        for (want, have) in self.features.iter().zip(&corpus.features) {
            if want != &have.label {
                return Err(Error::ShapeMismatch(format!(
                    "feature {}: model has {:?}, corpus has {:?}",
                    have.id, want, have.label
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelFile> {
        let file = File::open(path.as_ref())?;
        let model: ModelFile = serde_json::from_reader(BufReader::new(file))?;
        model.validate()?;
        Ok(model)
    }
}
