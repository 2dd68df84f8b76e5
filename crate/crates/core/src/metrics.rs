//! The three internal evaluation measures (homogeneity, co-occurrence level,
//! unsmoothness) plus the adjusted Rand index used by synthetic-recovery
//! tests.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::{Corpus, Instance, Polarity};
use crate::error::{Error, Result};
use crate::evolution::Assignment;
use crate::mixture::EpochParams;

/// Polarity balance of a cluster's occurrences:
/// `|#positive - #negative| / (#positive + #negative)`, occurrences weighted
/// by counts, neutral/none ignored. `None` when the cluster carries no
/// polarity mass at all.
pub fn homogeneity<'a>(
    instances: impl IntoIterator<Item = &'a Instance>,
    polarities: &[Polarity],
) -> Option<f64> {
    let mut pos: u64 = 0;
    let mut neg: u64 = 0;
    for inst in instances {
        for &(j, n) in inst.counts() {
            match polarities[j] {
                Polarity::Positive => pos += u64::from(n),
                Polarity::Negative => neg += u64::from(n),
                Polarity::Neutral | Polarity::None => {}
            }
        }
    }
    if pos + neg == 0 {
        return None;
    }
    Some((pos as f64 - neg as f64).abs() / (pos + neg) as f64)
}

/// Co-occurrence counts per cluster, per epoch, and overall.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CooccurrenceReport {
    /// `per_cluster[t - 1][k]`.
    pub per_cluster: Vec<Vec<u64>>,
    pub per_epoch: Vec<u64>,
    pub total: u64,
    /// Total averaged over epochs.
    pub per_epoch_average: f64,
}

/// Count, over each cluster's assigned instances, the observed feature pairs
/// whose both members the cluster supports (`phi_kj > threshold`).
pub fn cooccurrence_level(
    corpus: &Corpus,
    assignments: &[Assignment],
    params: &[EpochParams],
    threshold: f64,
) -> Result<CooccurrenceReport> {
    if params.len() != corpus.t() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter epochs for a corpus with T={}",
            params.len(),
            corpus.t()
        )));
    }
    let k = params.first().map_or(0, EpochParams::k);
    let assigned: HashMap<&str, (usize, usize)> = assignments
        .iter()
        .map(|a| (a.instance_id.as_str(), (a.epoch, a.cluster)))
        .collect();
    let support: Vec<Vec<Vec<bool>>> = params
        .iter()
        .map(|e| {
            e.phi
                .iter()
                .map(|row| row.iter().map(|&x| x > threshold).collect())
                .collect()
        })
        .collect();
    let mut per_cluster = vec![vec![0u64; k]; corpus.t()];
    for inst in &corpus.instances {
        let &(epoch, cluster) = assigned.get(inst.id.as_str()).ok_or_else(|| {
            Error::ShapeMismatch(format!("no assignment for instance {:?}", inst.id))
        })?;
        let sup = &support[epoch - 1][cluster];
        let count = inst
            .cooccurring_pairs()
            .into_iter()
            .filter(|&(a, b)| sup[a] && sup[b])
            .count() as u64;
        per_cluster[epoch - 1][cluster] += count;
    }
    let per_epoch: Vec<u64> = per_cluster.iter().map(|row| row.iter().sum()).collect();
    let total: u64 = per_epoch.iter().sum();
    Ok(CooccurrenceReport {
        per_cluster,
        per_epoch,
        total,
        per_epoch_average: total as f64 / corpus.t() as f64,
    })
}

/// Additively smooth a distribution by `eps` and renormalize.
fn smooth(p: &[f64], eps: f64) -> Vec<f64> {
    let denom = 1.0 + eps * p.len() as f64;
    p.iter().map(|&x| (x + eps) / denom).collect()
}

/// `KL(p || q)` with both distributions eps-smoothed and renormalized.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share support");
    let p = smooth(p, eps);
    let q = smooth(q, eps);
    p.iter()
        .zip(&q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum()
}

/// `KL(p || q) + KL(q || p)`, eps-smoothed.
pub fn symmetric_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    kl_divergence(p, q, eps) + kl_divergence(q, p, eps)
}

/// One cross-epoch cluster pairing: epoch-`t` cluster to its epoch-`t-1`
/// counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LinkRef {
    /// `t >= 2`.
    pub epoch: usize,
    pub cluster: usize,
    pub origin: usize,
}

/// Per-link KL divergences and their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnsmoothnessReport {
    pub per_link: Vec<(LinkRef, f64)>,
    /// `None` when there are no links (single-epoch models).
    pub average: Option<f64>,
}

/// Divergence of each linked cluster from its previous-epoch counterpart:
/// `KL(phi_t[k] || phi_{t-1}[origin])`, eps-smoothed. Set `reverse` to
/// measure the opposite direction instead.
pub fn unsmoothness(
    params: &[EpochParams],
    links: &[LinkRef],
    eps: f64,
    reverse: bool,
) -> UnsmoothnessReport {
    let per_link: Vec<(LinkRef, f64)> = links
        .iter()
        .map(|&l| {
            let curr = &params[l.epoch - 1].phi[l.cluster];
            let prev = &params[l.epoch - 2].phi[l.origin];
            let kl = if reverse {
                kl_divergence(prev, curr, eps)
            } else {
                kl_divergence(curr, prev, eps)
            };
            (l, kl)
        })
        .collect();
    let average = if per_link.is_empty() {
        None
    } else {
        Some(per_link.iter().map(|&(_, kl)| kl).sum::<f64>() / per_link.len() as f64)
    };
    UnsmoothnessReport { per_link, average }
}

fn binom2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings over the same items.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "label vectors differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as u64;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_insert(0) += 1;
        *rows.entry(p).or_insert(0) += 1;
        *cols.entry(t).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| binom2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| binom2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| binom2(c)).sum();
    let pairs = binom2(n);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / pairs;
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// The full measures report, shaped for JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub homogeneity: HomogeneitySection,
    pub cooccurrence_level: CooccurrenceSection,
    pub unsmoothness: UnsmoothnessSection,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogeneitySection {
    /// Size-weighted mean over included clusters; `None` when all excluded.
    pub average: Option<f64>,
    /// Keyed `t<t>_k<k>`.
    pub per_cluster: indexmap::IndexMap<String, f64>,
    /// Clusters with no polarity mass.
    pub excluded: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CooccurrenceSection {
    pub total: u64,
    pub per_epoch: Vec<u64>,
    pub per_epoch_average: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnsmoothnessSection {
    pub average: Option<f64>,
    pub per_link: Vec<LinkEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkEntry {
    pub epoch: usize,
    pub cluster: usize,
    pub origin: usize,
    pub kl: f64,
}

/// Assemble the three measures into one report.
///
/// `polarity_reason` marks the homogeneity section as excluded wholesale
/// (for example when no registry was provided).
pub fn build_report(
    corpus: &Corpus,
    assignments: &[Assignment],
    params: &[EpochParams],
    links: &[LinkRef],
    threshold: f64,
    eps: f64,
    reverse_kl: bool,
    polarity_reason: Option<String>,
) -> Result<MetricsReport> {
    let k = params.first().map_or(0, EpochParams::k);
    let by_id: HashMap<&str, &Instance> = corpus
        .instances
        .iter()
        .map(|i| (i.id.as_str(), i))
        .collect();
    let mut members: HashMap<(usize, usize), Vec<&Instance>> = HashMap::new();
    for a in assignments {
        let inst = by_id.get(a.instance_id.as_str()).ok_or_else(|| {
            Error::ShapeMismatch(format!("assignment for unknown instance {:?}", a.instance_id))
        })?;
        members.entry((a.epoch, a.cluster)).or_default().push(inst);
    }

    let polarities = corpus.polarities();
    let mut per_cluster = indexmap::IndexMap::new();
    let mut excluded = Vec::new();
    let mut weighted = 0.0;
    let mut weight = 0usize;
    for t in 1..=corpus.t() {
        for c in 0..k {
            let name = format!("t{t}_k{c}");
            let Some(insts) = members.get(&(t, c)) else {
                continue;
            };
            match homogeneity(insts.iter().copied(), &polarities) {
                Some(h) if polarity_reason.is_none() => {
                    weighted += h * insts.len() as f64;
                    weight += insts.len();
                    per_cluster.insert(name, h);
                }
                _ => excluded.push(name),
            }
        }
    }
    let homogeneity_section = HomogeneitySection {
        average: (weight > 0).then(|| weighted / weight as f64),
        per_cluster,
        excluded,
        reason: polarity_reason,
    };

    let cooc = cooccurrence_level(corpus, assignments, params, threshold)?;
    let unsmooth = unsmoothness(params, links, eps, reverse_kl);

    Ok(MetricsReport {
        homogeneity: homogeneity_section,
        cooccurrence_level: CooccurrenceSection {
            total: cooc.total,
            per_epoch: cooc.per_epoch,
            per_epoch_average: cooc.per_epoch_average,
        },
        unsmoothness: UnsmoothnessSection {
            average: unsmooth.average,
            per_link: unsmooth
                .per_link
                .into_iter()
                .map(|(l, kl)| LinkEntry {
                    epoch: l.epoch,
                    cluster: l.cluster,
                    origin: l.origin,
                    kl,
                })
                .collect(),
        },
    })
}
