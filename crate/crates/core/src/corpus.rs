//! Data model and ingestion for epoch-partitioned categorical instance streams.
//!
//! An instance is a sparse bag of feature occurrences attached to one epoch.
//! Input epochs may be arbitrary integers; they are renumbered to a dense
//! `1..=T` (order preserved) because the models only use epoch adjacency.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polarity class of a feature, collapsed over polarity degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
    None,
}

/// One dimension of the categorical feature space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDescriptor {
    /// Dense index in `0..V`.
    pub id: usize,
    pub label: String,
    pub polarity: Polarity,
}

impl FeatureDescriptor {
    /// A vocabulary of `v` unlabeled features `f0..f{v-1}` with no polarity.
    pub fn anonymous(v: usize) -> Vec<FeatureDescriptor> {
        (0..v)
            .map(|id| FeatureDescriptor {
                id,
                label: format!("f{id}"),
                polarity: Polarity::None,
            })
            .collect()
    }
}

/// A sparse bag of feature occurrences at one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    /// Dense epoch index in `1..=T`.
    pub epoch: usize,
    /// `(feature id, count)` pairs, sorted by id, counts >= 1.
    counts: Vec<(usize, u32)>,
    /// Total number of occurrences.
    pub total: u64,
}

impl Instance {
    /// Build an instance from raw `(feature, count)` pairs.
    ///
    /// Pairs are sorted by feature id; zero counts and duplicate ids are
    /// rejected, as is an empty bag.
    pub fn new(id: impl Into<String>, epoch: usize, mut counts: Vec<(usize, u32)>) -> Result<Instance> {
        let id = id.into();
        counts.sort_by_key(|&(j, _)| j);
        for w in counts.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidCorpus(format!(
                    "instance {id:?} repeats feature {}",
                    w[0].0
                )));
            }
        }
        if counts.iter().any(|&(_, n)| n == 0) {
            return Err(Error::InvalidCorpus(format!(
                "instance {id:?} has a zero count"
            )));
        }
        let total: u64 = counts.iter().map(|&(_, n)| u64::from(n)).sum();
        if total == 0 {
            return Err(Error::InvalidCorpus(format!("instance {id:?} is empty")));
        }
        Ok(Instance {
            id,
            epoch,
            counts,
            total,
        })
    }

    /// Sparse counts, sorted by feature id.
    pub fn counts(&self) -> &[(usize, u32)] {
        &self.counts
    }

    /// Number of distinct features present.
    pub fn distinct_features(&self) -> usize {
        self.counts.len()
    }

    /// All unordered pairs of distinct features present in this instance.
    ///
    /// Pairs are presence-based: counts do not multiply them. Returned as
    /// `(lo, hi)` tuples in lexicographic order; size is `C(m, 2)` for `m`
    /// distinct features.
    pub fn cooccurring_pairs(&self) -> Vec<(usize, usize)> {
        let ids: Vec<usize> = self.counts.iter().map(|&(j, _)| j).collect();
        let mut pairs = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
        for (a, &lo) in ids.iter().enumerate() {
            for &hi in &ids[a + 1..] {
                pairs.push((lo, hi));
            }
        }
        pairs
    }
}

/// An instance before epoch renumbering and validation.
#[derive(Debug, Clone)]
pub struct RawInstance {
    pub id: String,
    pub epoch: i64,
    pub counts: Vec<(usize, u32)>,
}

/// A validated, immutable stream of instances over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub features: Vec<FeatureDescriptor>,
    pub instances: Vec<Instance>,
    /// Number of epochs `T` after dense renumbering.
    pub epochs: usize,
    /// Original epoch value for each dense epoch `1..=T`.
    pub original_epochs: Vec<i64>,
    /// Instance indices per dense epoch, in corpus order.
    epoch_index: Vec<Vec<usize>>,
}

impl Corpus {
    /// Validate and assemble a corpus, renumbering epochs densely.
    pub fn build(features: Vec<FeatureDescriptor>, raw: Vec<RawInstance>) -> Result<Corpus> {
        let v = features.len();
        if v == 0 {
            return Err(Error::InvalidCorpus("empty vocabulary".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if f.id != i {
                return Err(Error::InvalidCorpus(format!(
                    "feature ids must be dense 0..V; found id {} at position {i}",
                    f.id
                )));
            }
        }
        {
            let mut seen = HashMap::new();
            for f in &features {
                if seen.insert(f.label.as_str(), ()).is_some() {
                    return Err(Error::InvalidCorpus(format!(
                        "duplicate feature label {:?}",
                        f.label
                    )));
                }
            }
        }
        if raw.is_empty() {
            return Err(Error::InvalidCorpus("no instances".into()));
        }

        let mut originals: Vec<i64> = raw.iter().map(|r| r.epoch).collect();
        originals.sort_unstable();
        originals.dedup();
        let epoch_of: HashMap<i64, usize> = originals
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, i + 1))
            .collect();
        let t_max = originals.len();

        let mut instances = Vec::with_capacity(raw.len());
        let mut seen_ids: HashMap<String, ()> = HashMap::new();
        for r in raw {
            if seen_ids.insert(r.id.clone(), ()).is_some() {
                return Err(Error::InvalidCorpus(format!(
                    "duplicate instance id {:?}",
                    r.id
                )));
            }
            for &(j, _) in &r.counts {
                if j >= v {
                    return Err(Error::InvalidCorpus(format!(
                        "instance {:?} references feature {j} but V={v}",
                        r.id
                    )));
                }
            }
            instances.push(Instance::new(r.id, epoch_of[&r.epoch], r.counts)?);
        }

        let mut epoch_index = vec![Vec::new(); t_max];
        for (i, inst) in instances.iter().enumerate() {
            epoch_index[inst.epoch - 1].push(i);
        }

        Ok(Corpus {
            features,
            instances,
            epochs: t_max,
            original_epochs: originals,
            epoch_index,
        })
    }

    /// Vocabulary size `V`.
    pub fn v(&self) -> usize {
        self.features.len()
    }

    /// Number of epochs `T`.
    pub fn t(&self) -> usize {
        self.epochs
    }

    /// Instances at epoch `t` (1-based), in corpus order.
    pub fn epoch_slice(&self, t: usize) -> Result<Vec<&Instance>> {
        if t == 0 || t > self.epochs {
            return Err(Error::EpochOutOfRange {
                t,
                max: self.epochs,
            });
        }
        Ok(self.epoch_index[t - 1]
            .iter()
            .map(|&i| &self.instances[i])
            .collect())
    }

    /// Polarity of each feature, by id.
    pub fn polarities(&self) -> Vec<Polarity> {
        self.features.iter().map(|f| f.polarity).collect()
    }
}

#[derive(Deserialize)]
struct LineRecord {
    id: String,
    epoch: i64,
    features: IndexMap<String, i64>,
}

#[derive(Deserialize)]
struct TimestampedRecord {
    id: String,
    timestamp: f64,
    features: IndexMap<String, i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryEntry {
    label: String,
    polarity: Polarity,
}

/// Load a feature registry: a JSON array of `{label, polarity}` objects.
pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<FeatureDescriptor>> {
    let file = File::open(path.as_ref())?;
    let entries: Vec<RegistryEntry> = serde_json::from_reader(BufReader::new(file))?;
    if entries.is_empty() {
        return Err(Error::InvalidCorpus("empty feature registry".into()));
    }
    Ok(entries
        .into_iter()
        .enumerate()
        .map(|(id, e)| FeatureDescriptor {
            id,
            label: e.label,
            polarity: e.polarity,
        })
        .collect())
}

struct VocabBuilder {
    registry: Option<HashMap<String, usize>>,
    features: Vec<FeatureDescriptor>,
}

impl VocabBuilder {
    fn new(registry: Option<Vec<FeatureDescriptor>>) -> VocabBuilder {
        match registry {
            Some(features) => {
                let map = features
                    .iter()
                    .map(|f| (f.label.clone(), f.id))
                    .collect();
                VocabBuilder {
                    registry: Some(map),
                    features,
                }
            }
            None => VocabBuilder {
                registry: None,
                features: Vec::new(),
            },
        }
    }

    fn resolve(&mut self, label: &str, line: usize) -> Result<usize> {
        if let Some(map) = &self.registry {
            return map.get(label).copied().ok_or_else(|| Error::UnknownFeature {
                line,
                label: label.to_string(),
            });
        }
        // No registry: ids in first-appearance order.
        if let Some(f) = self.features.iter().find(|f| f.label == label) {
            return Ok(f.id);
        }
        let id = self.features.len();
        self.features.push(FeatureDescriptor {
            id,
            label: label.to_string(),
            polarity: Polarity::None,
        });
        Ok(id)
    }
}

fn parse_counts(
    features: IndexMap<String, i64>,
    vocab: &mut VocabBuilder,
    line: usize,
) -> Result<Vec<(usize, u32)>> {
    let mut counts = Vec::with_capacity(features.len());
    for (label, n) in features {
        if n < 1 {
            return Err(Error::Parse {
                line,
                msg: format!("feature {label:?} has non-positive count {n}"),
            });
        }
        let n = u32::try_from(n).map_err(|_| Error::Parse {
            line,
            msg: format!("feature {label:?} count {n} too large"),
        })?;
        counts.push((vocab.resolve(&label, line)?, n));
    }
    Ok(counts)
}

fn parse_line<T: for<'de> Deserialize<'de>>(text: &str, line: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

/// Load a corpus from a JSON Lines instance file.
///
/// Each line is `{"id": str, "epoch": int>=1, "features": {label: int>=1}}`.
/// With a registry the vocabulary is fixed and unknown labels are errors;
/// without one, the vocabulary is the union of labels in first-appearance
/// order, all with polarity `none`.
pub fn load_corpus(
    path: impl AsRef<Path>,
    registry: Option<impl AsRef<Path>>,
) -> Result<Corpus> {
    let registry = registry.map(load_registry).transpose()?;
    let file = File::open(path.as_ref())?;
    load_corpus_from_reader(BufReader::new(file), registry)
}

fn load_corpus_from_reader(reader: impl BufRead, registry: Option<Vec<FeatureDescriptor>>) -> Result<Corpus> {
    let mut vocab = VocabBuilder::new(registry);
    let mut raw = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: LineRecord = parse_line(&text, line_no)?;
        if record.epoch < 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("epoch must be >= 1, got {}", record.epoch),
            });
        }
        let counts = parse_counts(record.features, &mut vocab, line_no)?;
        if counts.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "instance has no features".into(),
            });
        }
        raw.push(RawInstance {
            id: record.id,
            epoch: record.epoch,
            counts,
        });
    }
    Corpus::build(vocab.features, raw)
}

/// Load a timestamped JSON Lines file, splitting into two epochs at the
/// median timestamp (records at or before the median go to epoch 1).
///
/// Each line is `{"id": str, "timestamp": number, "features": {...}}`.
pub fn load_corpus_split_median(
    path: impl AsRef<Path>,
    registry: Option<impl AsRef<Path>>,
) -> Result<Corpus> {
    let registry = registry.map(load_registry).transpose()?;
    let file = File::open(path.as_ref())?;
    let mut vocab = VocabBuilder::new(registry);
    let mut parsed = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: TimestampedRecord = parse_line(&text, line_no)?;
        if !record.timestamp.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                msg: "timestamp must be finite".into(),
            });
        }
        let counts = parse_counts(record.features, &mut vocab, line_no)?;
        parsed.push((record.id, record.timestamp, counts));
    }
    if parsed.is_empty() {
        return Err(Error::InvalidCorpus("no instances".into()));
    }
    let mut stamps: Vec<f64> = parsed.iter().map(|p| p.1).collect();
    stamps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = stamps[(stamps.len() - 1) / 2];
    let raw = parsed
        .into_iter()
        .map(|(id, ts, counts)| RawInstance {
            id,
            epoch: if ts <= median { 1 } else { 2 },
            counts,
        })
        .collect();
    Corpus::build(vocab.features, raw)
}

/// Parse a corpus from an in-memory JSONL string.
pub fn parse_corpus(text: &str, registry: Option<Vec<FeatureDescriptor>>) -> Result<Corpus> {
    load_corpus_from_reader(BufReader::new(text.as_bytes()), registry)
}

/// Write a corpus back to the JSON Lines instance format.
///
/// Epochs are written with their original values and features in id order,
/// so a reload yields an identical corpus.
pub fn write_corpus(corpus: &Corpus, writer: impl Write) -> Result<()> {
    let mut out = BufWriter::new(writer);
    for inst in &corpus.instances {
        let mut features = serde_json::Map::new();
        for &(j, n) in inst.counts() {
            features.insert(corpus.features[j].label.clone(), serde_json::json!(n));
        }
        let record = serde_json::json!({
            "id": inst.id,
            "epoch": corpus.original_epochs[inst.epoch - 1],
            "features": features,
        });
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Write a corpus to a file; see [`write_corpus`].
pub fn write_corpus_to_path(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, File::create(path.as_ref())?)
}

/// Read a whole reader into a corpus; convenience for tests and pipes.
pub fn read_corpus(mut reader: impl Read, registry: Option<Vec<FeatureDescriptor>>) -> Result<Corpus> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_corpus(&text, registry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_ab() -> Corpus {
        parse_corpus(
            r#"{"id": "x", "epoch": 1, "features": {"a": 2, "b": 1}}
{"id": "y", "epoch": 2, "features": {"c": 1}}
"#,
            None,
        )
        .unwrap()
    }

    #[test]
    fn loads_vocabulary_and_epochs() {
        let c = corpus_ab();
        assert_eq!(c.v(), 3);
        assert_eq!(c.t(), 2);
        assert_eq!(c.features[0].label, "a");
        assert_eq!(c.features[2].label, "c");
        assert_eq!(c.instances[0].total, 3);
    }

    #[test]
    fn renumbers_sparse_epochs_densely() {
        let c = parse_corpus(
            r#"{"id": "x", "epoch": 7, "features": {"a": 1}}
{"id": "y", "epoch": 3, "features": {"a": 1}}"#,
            None,
        )
        .unwrap();
        assert_eq!(c.t(), 2);
        assert_eq!(c.original_epochs, vec![3, 7]);
        assert_eq!(c.instances[0].epoch, 2); // original epoch 7
        assert_eq!(c.instances[1].epoch, 1); // original epoch 3
    }

    #[test]
    fn zero_count_is_an_error_naming_the_line() {
        let err = parse_corpus(
            r#"{"id": "x", "epoch": 1, "features": {"a": 1}}
{"id": "y", "epoch": 1, "features": {"b": 0}}"#,
            None,
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_label_with_registry_is_an_error() {
        let registry = vec![FeatureDescriptor {
            id: 0,
            label: "a".into(),
            polarity: Polarity::Positive,
        }];
        let err = parse_corpus(r#"{"id": "x", "epoch": 1, "features": {"zz": 1}}"#, Some(registry))
            .unwrap_err();
        match err {
            Error::UnknownFeature { line, label } => {
                assert_eq!(line, 1);
                assert_eq!(label, "zz");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_epoch_field_is_an_error() {
        let err = parse_corpus(r#"{"id": "x", "features": {"a": 1}}"#, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicate_instance_id_rejected() {
        let err = parse_corpus(
            r#"{"id": "x", "epoch": 1, "features": {"a": 1}}
{"id": "x", "epoch": 2, "features": {"a": 1}}"#,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidCorpus(_)));
    }

    #[test]
    fn epoch_slice_bounds() {
        let c = corpus_ab();
        assert_eq!(c.epoch_slice(1).unwrap().len(), 1);
        assert_eq!(c.epoch_slice(2).unwrap()[0].id, "y");
        assert!(matches!(
            c.epoch_slice(0),
            Err(Error::EpochOutOfRange { t: 0, max: 2 })
        ));
        assert!(c.epoch_slice(3).is_err());
    }

    #[test]
    fn slices_partition_the_corpus() {
        let c = corpus_ab();
        let total: usize = (1..=c.t()).map(|t| c.epoch_slice(t).unwrap().len()).sum();
        assert_eq!(total, c.instances.len());
    }

    #[test]
    fn cooccurring_pairs_presence_semantics() {
        let i = Instance::new("i", 1, vec![(0, 1), (1, 2), (2, 5)]).unwrap();
        assert_eq!(i.cooccurring_pairs(), vec![(0, 1), (0, 2), (1, 2)]);
        let single = Instance::new("s", 1, vec![(4, 9)]).unwrap();
        assert!(single.cooccurring_pairs().is_empty());
        let two = Instance::new("t", 1, vec![(0, 5), (1, 1)]).unwrap();
        assert_eq!(two.cooccurring_pairs(), vec![(0, 1)]);
    }

    #[test]
    fn roundtrip_preserves_ids_epochs_counts() {
        let src = r#"{"id": "x", "epoch": 3, "features": {"b": 2, "a": 1}}
{"id": "y", "epoch": 8, "features": {"a": 4}}"#;
        let c = parse_corpus(src, None).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let c2 = parse_corpus(std::str::from_utf8(&buf).unwrap(), None).unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn split_median_two_epochs() {
        let src = r#"{"id": "a", "timestamp": 1.0, "features": {"x": 1}}
{"id": "b", "timestamp": 5.0, "features": {"x": 1}}
{"id": "c", "timestamp": 9.0, "features": {"x": 1}}"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ts.jsonl");
        std::fs::write(&path, src).unwrap();
        let c = load_corpus_split_median(&path, None::<&Path>).unwrap();
        assert_eq!(c.t(), 2);
        assert_eq!(c.instances[0].epoch, 1);
        assert_eq!(c.instances[1].epoch, 1);
        assert_eq!(c.instances[2].epoch, 2);
    }
}
