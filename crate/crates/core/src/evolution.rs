//! Hard instance assignment, origin computation, cluster linking across
//! epochs, split/merge tracing, and the KL matching used to align static
//! per-epoch fits.

use std::io::{Read, Write};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::metrics::symmetric_kl;
use crate::mixture::{mm_responsibilities, EpochParams};
use crate::tmm::{current_marginal, previous_marginal, TmmPosteriors};

/// Hard assignment of one instance, with its origin at epochs `t >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub instance_id: String,
    pub epoch: usize,
    /// Argmax of the current-cluster marginal.
    pub cluster: usize,
    /// Argmax of the previous-cluster marginal; absent at epoch 1.
    pub origin: Option<usize>,
    /// Winning marginal probability.
    pub confidence: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// Assign every instance to its most likely cluster by marginalizing the
/// joint posterior; the origin marginalizes out the current cluster instead.
/// Output is epoch-major, corpus order within each epoch.
pub fn assign_instances(corpus: &Corpus, post: &TmmPosteriors) -> Vec<Assignment> {
    assert_eq!(post.t(), corpus.t(), "posteriors cover all epochs");
    let mut out = Vec::with_capacity(corpus.instances.len());
    for (inst, row) in corpus
        .epoch_slice(1)
        .unwrap()
        .iter()
        .zip(&post.first_epoch)
    {
        let cluster = argmax(row);
        out.push(Assignment {
            instance_id: inst.id.clone(),
            epoch: 1,
            cluster,
            origin: None,
            confidence: row[cluster],
        });
    }
    for t in 2..=corpus.t() {
        for (inst, joint) in corpus
            .epoch_slice(t)
            .unwrap()
            .iter()
            .zip(&post.later[t - 2])
        {
            let curr = current_marginal(joint);
            let prev = previous_marginal(joint);
            let cluster = argmax(&curr);
            out.push(Assignment {
                instance_id: inst.id.clone(),
                epoch: t,
                cluster,
                origin: Some(argmax(&prev)),
                confidence: curr[cluster],
            });
        }
    }
    out
}

/// The link from one cluster to its most frequent origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLink {
    /// Previous-epoch cluster receiving the most origins; ties to the lowest.
    pub origin: usize,
    /// Origin frequencies over all previous-epoch clusters.
    pub histogram: Vec<usize>,
}

/// Per-epoch cluster sizes, links to the previous epoch, and maximal chains.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionGraph {
    pub k: usize,
    pub t: usize,
    /// `sizes[t - 1][k]`: members of cluster `k` at epoch `t`.
    pub sizes: Vec<Vec<usize>>,
    /// `links[t - 2][k]` for `t` in `2..=T`; `None` flags an empty cluster.
    pub links: Vec<Vec<Option<ClusterLink>>>,
    /// Maximal backward link paths as ascending `(epoch, cluster)` runs.
    pub chains: Vec<Vec<(usize, usize)>>,
}

impl EvolutionGraph {
    /// Flatten the links for the unsmoothness measure.
    pub fn link_refs(&self) -> Vec<crate::metrics::LinkRef> {
        let mut out = Vec::new();
        for (i, epoch_links) in self.links.iter().enumerate() {
            for (k, link) in epoch_links.iter().enumerate() {
                if let Some(l) = link {
                    out.push(crate::metrics::LinkRef {
                        epoch: i + 2,
                        cluster: k,
                        origin: l.origin,
                    });
                }
            }
        }
        out
    }
}

/// Relate every epoch-`t` cluster to the previous epoch by the mode of its
/// members' origins. Multiple clusters may share an origin, which is how a
/// division shows up; empty clusters get no link.
pub fn link_clusters(assignments: &[Assignment], k: usize, t: usize) -> EvolutionGraph {
    let mut sizes = vec![vec![0usize; k]; t];
    let mut histograms = vec![vec![vec![0usize; k]; k]; t.saturating_sub(1)];
    for a in assignments {
        sizes[a.epoch - 1][a.cluster] += 1;
        if a.epoch >= 2 {
            if let Some(origin) = a.origin {
                histograms[a.epoch - 2][a.cluster][origin] += 1;
            }
        }
    }
    let links: Vec<Vec<Option<ClusterLink>>> = histograms
        .into_iter()
        .enumerate()
        .map(|(i, per_cluster)| {
            per_cluster
                .into_iter()
                .enumerate()
                .map(|(c, histogram)| {
                    if sizes[i + 1][c] == 0 || histogram.iter().all(|&n| n == 0) {
                        None
                    } else {
                        Some(ClusterLink {
                            origin: argmax_usize(&histogram),
                            histogram,
                        })
                    }
                })
                .collect()
        })
        .collect();

    let chains = build_chains(&sizes, &links, k, t);
    EvolutionGraph {
        k,
        t,
        sizes,
        links,
        chains,
    }
}

/// Maximal backward paths through the links. A chain head is any non-empty
/// cluster no later cluster links to; an empty predecessor breaks the chain.
fn build_chains(
    sizes: &[Vec<usize>],
    links: &[Vec<Option<ClusterLink>>],
    k: usize,
    t: usize,
) -> Vec<Vec<(usize, usize)>> {
    let mut has_successor = vec![vec![false; k]; t];
    for (i, epoch_links) in links.iter().enumerate() {
        for link in epoch_links.iter().flatten() {
            has_successor[i][link.origin] = true;
        }
    }
    let mut chains = Vec::new();
    for epoch in (1..=t).rev() {
        for c in 0..k {
            if sizes[epoch - 1][c] == 0 || has_successor[epoch - 1][c] {
                continue;
            }
            let mut chain = vec![(epoch, c)];
            let (mut cur_t, mut cur_c) = (epoch, c);
            while cur_t >= 2 {
                match &links[cur_t - 2][cur_c] {
                    Some(link) if sizes[cur_t - 2][link.origin] > 0 => {
                        cur_t -= 1;
                        cur_c = link.origin;
                        chain.push((cur_t, cur_c));
                    }
                    _ => break,
                }
            }
            chain.reverse();
            chains.push(chain);
        }
    }
    chains.sort();
    chains
}

/// Evolution graph for per-epoch static fits: links come from the optimal
/// KL matching between adjacent epochs' parameters instead of instance
/// origins, so their histograms are empty.
pub fn link_static_clusters(
    assignments: &[Assignment],
    params: &[EpochParams],
    eps: f64,
) -> EvolutionGraph {
    let t = params.len();
    let k = params.first().map_or(0, EpochParams::k);
    let mut sizes = vec![vec![0usize; k]; t];
    for a in assignments {
        sizes[a.epoch - 1][a.cluster] += 1;
    }
    let links: Vec<Vec<Option<ClusterLink>>> = (2..=t)
        .map(|epoch| {
            let perm = match_static_clusters(&params[epoch - 2], &params[epoch - 1], eps);
            perm.into_iter()
                .map(|origin| {
                    Some(ClusterLink {
                        origin,
                        histogram: Vec::new(),
                    })
                })
                .collect()
        })
        .collect();
    let chains = build_chains(&sizes, &links, k, t);
    EvolutionGraph {
        k,
        t,
        sizes,
        links,
        chains,
    }
}

fn argmax_usize(values: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

/// Ranked origins of one cluster, with merge detection.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginRanking {
    /// `(origin, count)` by descending count (ties to the lower index),
    /// at most `top_m` entries, zero counts omitted.
    pub ranked: Vec<(usize, usize)>,
    /// True when at least two origins each cover `threshold` of the cluster.
    pub merge: bool,
    /// Qualifying origins beyond the primary one.
    pub secondary_origins: Vec<usize>,
}

/// For each `(t, k)` with `t >= 2`, the `top_m` origins by frequency.
/// A merge is flagged when two or more origins each cover at least
/// `threshold` of the cluster's members.
pub fn detect_merges(
    assignments: &[Assignment],
    k: usize,
    t: usize,
    top_m: usize,
    threshold: f64,
) -> Vec<Vec<OriginRanking>> {
    assert!(top_m >= 1, "top_m must be >= 1");
    let graph = link_clusters(assignments, k, t);
    graph
        .links
        .iter()
        .enumerate()
        .map(|(i, epoch_links)| {
            epoch_links
                .iter()
                .enumerate()
                .map(|(c, link)| {
                    let size = graph.sizes[i + 1][c];
                    let histogram: &[usize] = match link {
                        Some(l) => &l.histogram,
                        None => return OriginRanking {
                            ranked: Vec::new(),
                            merge: false,
                            secondary_origins: Vec::new(),
                        },
                    };
                    let mut ranked: Vec<(usize, usize)> = histogram
                        .iter()
                        .copied()
                        .enumerate()
                        .filter(|&(_, n)| n > 0)
                        .collect();
                    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                    let need = (threshold * size as f64).ceil() as usize;
                    let qualifying: Vec<usize> = ranked
                        .iter()
                        .filter(|&&(_, n)| n >= need.max(1))
                        .map(|&(o, _)| o)
                        .collect();
                    ranked.truncate(top_m);
                    OriginRanking {
                        ranked,
                        merge: qualifying.len() >= 2,
                        secondary_origins: qualifying.into_iter().skip(1).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

/// Optimal one-to-one matching of `curr` clusters onto `prev` clusters,
/// minimizing total symmetric KL between component rows (eps-smoothed).
/// Returns `perm` with `perm[k_curr] = k_prev`.
///
/// Exact subset-DP assignment; intended for the model's cluster counts
/// (K <= 24).
pub fn match_static_clusters(prev: &EpochParams, curr: &EpochParams, eps: f64) -> Vec<usize> {
    let k = curr.k();
    assert_eq!(prev.k(), k, "cluster counts must match");
    assert!(k <= 24, "matching supports at most 24 clusters");
    if k == 0 {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| symmetric_kl(&curr.phi[i], &prev.phi[j], eps))
                .collect()
        })
        .collect();

    // dp[mask]: minimal cost of assigning curr rows 0..popcount(mask) to the
    // prev columns in mask.
    let full = 1usize << k;
    let mut dp = vec![f64::INFINITY; full];
    let mut parent = vec![0u8; full];
    dp[0] = 0.0;
    for mask in 1..full {
        let row = (mask as u32).count_ones() as usize - 1;
        for j in 0..k {
            if mask & (1 << j) == 0 {
                continue;
            }
            let prev_mask = mask ^ (1 << j);
            let cand = dp[prev_mask] + cost[row][j];
            if cand < dp[mask] {
                dp[mask] = cand;
                parent[mask] = j as u8;
            }
        }
    }
    let mut perm = vec![0usize; k];
    let mut mask = full - 1;
    for row in (0..k).rev() {
        let j = parent[mask] as usize;
        perm[row] = j;
        mask ^= 1 << j;
    }
    perm
}

/// Hard assignments for per-epoch static fits: cluster by responsibility
/// argmax, no origins. Output matches [`assign_instances`]' ordering.
pub fn assign_instances_static(corpus: &Corpus, fits: &[EpochParams]) -> Vec<Assignment> {
    assert_eq!(fits.len(), corpus.t(), "one parameter set per epoch");
    let mut out = Vec::with_capacity(corpus.instances.len());
    for t in 1..=corpus.t() {
        let slice = corpus.epoch_slice(t).unwrap();
        let resp = mm_responsibilities(&slice, &fits[t - 1]);
        for (inst, row) in slice.iter().zip(&resp) {
            let cluster = argmax(row);
            out.push(Assignment {
                instance_id: inst.id.clone(),
                epoch: t,
                cluster,
                origin: None,
                confidence: row[cluster],
            });
        }
    }
    out
}

const CSV_HEADER: [&str; 5] = ["instance_id", "epoch", "cluster", "origin", "confidence"];

/// Write assignments as CSV with the header
/// `instance_id,epoch,cluster,origin,confidence`; origin is empty at epoch 1.
pub fn write_assignments_csv(writer: impl Write, assignments: &[Assignment]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for a in assignments {
        w.write_record([
            a.instance_id.as_str(),
            &a.epoch.to_string(),
            &a.cluster.to_string(),
            &a.origin.map(|o| o.to_string()).unwrap_or_default(),
            &format!("{}", a.confidence),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Read assignments back from the CSV format.
pub fn read_assignments_csv(reader: impl Read) -> Result<Vec<Assignment>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2; // header is line 1
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::Parse {
                line,
                msg: "missing CSV field".into(),
            })
        };
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad {what}: {s:?}"),
            })
        };
        let origin_raw = field(3)?;
        out.push(Assignment {
            instance_id: field(0)?.to_string(),
            epoch: parse_usize(field(1)?, "epoch")?,
            cluster: parse_usize(field(2)?, "cluster")?,
            origin: if origin_raw.is_empty() {
                None
            } else {
                Some(parse_usize(origin_raw, "origin")?)
            },
            confidence: field(4)?.parse().map_err(|_| Error::Parse {
                line,
                msg: "bad confidence".into(),
            })?,
        });
    }
    Ok(out)
}

/// Write the evolution graph in DOT form: one node per `(epoch, cluster)`
/// labeled `t<t>_k<k> (n=<size>)`, solid edges for links, dashed edges for
/// secondary merge origins.
pub fn write_evolution_dot(
    mut writer: impl Write,
    graph: &EvolutionGraph,
    merges: Option<&[Vec<OriginRanking>]>,
) -> std::io::Result<()> {
    writeln!(writer, "digraph evolution {{")?;
    writeln!(writer, "  rankdir=LR;")?;
    for (e, sizes) in graph.sizes.iter().enumerate() {
        let t = e + 1;
        for (c, &n) in sizes.iter().enumerate() {
            writeln!(writer, "  t{t}_k{c} [label=\"t{t}_k{c} (n={n})\"];")?;
        }
    }
    for (i, epoch_links) in graph.links.iter().enumerate() {
        let t = i + 2;
        for (c, link) in epoch_links.iter().enumerate() {
            if let Some(l) = link {
                writeln!(writer, "  t{}_k{} -> t{t}_k{c};", t - 1, l.origin)?;
            }
        }
    }
    if let Some(merges) = merges {
        for (i, epoch) in merges.iter().enumerate() {
            let t = i + 2;
            for (c, ranking) in epoch.iter().enumerate() {
                for &o in &ranking.secondary_origins {
                    writeln!(
                        writer,
                        "  t{}_k{o} -> t{t}_k{c} [style=dashed];",
                        t - 1
                    )?;
                }
            }
        }
    }
    writeln!(writer, "}}")?;
    Ok(())
}
