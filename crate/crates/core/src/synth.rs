//! Ground-truth generator of drifting temporal mixture corpora.
//!
//! Epoch-1 component rows are concentrated on per-cluster feature blocks
//! (`separation` controls how sharply); later epochs move each row toward a
//! fresh random row by the `drift` fraction. Instances at epoch `t >= 2` draw
//! a previous-epoch cluster as well and emit from the alpha-weighted
//! geometric mixture of the two rows, which is the density the temporal model
//! scores.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::corpus::{Corpus, FeatureDescriptor, RawInstance};
use crate::error::{Error, Result};
use crate::mixture::EpochParams;
use crate::model::ModelFile;
use crate::tmm::TmmParams;

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SynthConfig {
    pub epochs: usize,
    pub clusters: usize,
    pub vocab: usize,
    pub instances_per_epoch: usize,
    /// Mean instance length; lengths are `1 + Poisson(mean - 1)`.
    pub mean_components: f64,
    /// Fraction of each row's mass moved toward a fresh random row per epoch.
    pub drift: f64,
    /// Concentration of epoch-1 rows on their cluster's feature block.
    pub separation: f64,
    /// Previous-epoch emission weight used by the generative process.
    pub alpha: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.clusters == 0 || self.vocab == 0 || self.instances_per_epoch == 0
        {
            return Err(Error::InvalidConfig(
                "epochs, clusters, vocab and instances_per_epoch must be >= 1".into(),
            ));
        }
        if !(self.mean_components >= 1.0) {
            return Err(Error::InvalidConfig("mean_components must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::InvalidConfig(format!(
                "drift must lie in [0, 1], got {}",
                self.drift
            )));
        }
        if !(self.separation >= 0.0) {
            return Err(Error::InvalidConfig("separation must be >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            epochs: 2,
            clusters: 3,
            vocab: 12,
            instances_per_epoch: 100,
            mean_components: 8.0,
            drift: 0.2,
            separation: 4.0,
            alpha: 0.7,
            seed: 0,
        }
    }
}

/// A generated corpus with its generating parameters and planted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub true_params: TmmParams,
    /// Planted current-epoch cluster per instance, in corpus order.
    pub true_labels: Vec<usize>,
}

impl SynthCorpus {
    /// Planted labels for epoch `t`, in slice order.
    pub fn labels_at(&self, t: usize) -> Vec<usize> {
        self.corpus
            .instances
            .iter()
            .zip(&self.true_labels)
            .filter(|(inst, _)| inst.epoch == t)
            .map(|(_, &l)| l)
            .collect()
    }
}

fn draw_simplex_row(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..v).map(|_| 1.0 - rng.random::<f64>()).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= sum);
    row
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Normalized geometric mixture `p ∝ exp(ln a + alpha ln b)`.
fn geometric_mixture(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.ln() + alpha * y.ln()).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Generate a corpus from the temporal generative process. Deterministic
/// given the seed.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (t_max, k, v) = (config.epochs, config.clusters, config.vocab);
    let floor = 1e-9;

    // Epoch-1 rows: uniform draws boosted on the cluster's feature block.
    let mut phi_epochs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(t_max);
    let first: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let lo = c * v / k;
            let hi = ((c + 1) * v / k).max(lo + 1).min(v);
            let mut row: Vec<f64> = (0..v)
                .map(|j| {
                    let base = 1.0 - rng.random::<f64>();
                    if (lo..hi).contains(&j) {
                        base + config.separation
                    } else {
                        base
                    }
                })
                .collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= sum);
            crate::mixture::floor_and_normalize(&mut row, floor);
            row
        })
        .collect();
    phi_epochs.push(first);
    for _ in 2..=t_max {
        let prev = phi_epochs.last().unwrap().clone();
        let next: Vec<Vec<f64>> = prev
            .into_iter()
            .map(|row| {
                if config.drift == 0.0 {
                    return row;
                }
                let fresh = draw_simplex_row(&mut rng, v);
                let mut mixed: Vec<f64> = row
                    .iter()
                    .zip(&fresh)
                    .map(|(&p, &r)| (1.0 - config.drift) * p + config.drift * r)
                    .collect();
                crate::mixture::floor_and_normalize(&mut mixed, floor);
                mixed
            })
            .collect();
        phi_epochs.push(next);
    }
    let true_params = TmmParams {
        epochs: phi_epochs
            .iter()
            .map(|phi| EpochParams {
                phi: phi.clone(),
                pi: vec![1.0 / k as f64; k],
            })
            .collect(),
        alpha: config.alpha,
    };

    let length_dist = if config.mean_components > 1.0 {
        Some(Poisson::new(config.mean_components - 1.0).map_err(|e| {
            Error::InvalidConfig(format!("bad mean_components: {e}"))
        })?)
    } else {
        None
    };

    let mut raw = Vec::with_capacity(t_max * config.instances_per_epoch);
    let mut labels = Vec::with_capacity(t_max * config.instances_per_epoch);
    for t in 1..=t_max {
        for i in 0..config.instances_per_epoch {
            let cluster = sample_categorical(&mut rng, &true_params.epochs[t - 1].pi);
            let emission: Vec<f64> = if t == 1 {
                phi_epochs[0][cluster].clone()
            } else {
                let prev_cluster = sample_categorical(&mut rng, &true_params.epochs[t - 2].pi);
                geometric_mixture(
                    &phi_epochs[t - 1][cluster],
                    &phi_epochs[t - 2][prev_cluster],
                    config.alpha,
                )
            };
            let length = 1 + match &length_dist {
                Some(d) => d.sample(&mut rng) as u64,
                None => 0,
            };
            let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
            for _ in 0..length {
                *counts.entry(sample_categorical(&mut rng, &emission)).or_insert(0) += 1;
            }
            raw.push(RawInstance {
                id: format!("t{t}_i{i}"),
                epoch: t as i64,
                counts: counts.into_iter().collect(),
            });
            labels.push(cluster);
        }
    }

    let corpus = Corpus::build(FeatureDescriptor::anonymous(v), raw)?;
    Ok(SynthCorpus {
        corpus,
        true_params,
        true_labels: labels,
    })
}

/// Write the truth sidecar: `{"labels": {id: cluster}, "params": <model>}`.
pub fn write_truth(synth: &SynthCorpus, writer: impl Write) -> Result<()> {
    let mut labels = serde_json::Map::new();
    for (inst, &label) in synth.corpus.instances.iter().zip(&synth.true_labels) {
        labels.insert(inst.id.clone(), serde_json::json!(label));
    }
    let model = ModelFile::from_tmm(&synth.true_params, &synth.corpus.features);
    let doc = serde_json::json!({
        "labels": labels,
        "params": model,
    });
    serde_json::to_writer_pretty(writer, &doc)?;
    Ok(())
}

/// Write the truth sidecar to a file path.
pub fn write_truth_to_path(synth: &SynthCorpus, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_truth(synth, file)
}
