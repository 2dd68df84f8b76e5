//! Exhaustive-evaluation oracles for the temporal model's E-step, M-step,
//! and score, compared against the library on randomized small problems.
//!
//! The oracle works in direct (non-log) arithmetic straight from the update
//! formulas and shares no code with the implementation under test.

use evoclust_core::corpus::{Corpus, FeatureDescriptor, RawInstance};
use evoclust_core::mixture::EpochParams;
use evoclust_core::tmm::{
    score_log_likelihood, tmm_e_step, tmm_m_step, TmmParams, TmmPosteriors,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod oracle {
    use super::*;

    /// Independent floor-and-renormalize: entries at the floor stay pinned,
    /// the rest rescale until the row is a distribution again.
    pub fn floor_row(mut row: Vec<f64>, floor: f64) -> Vec<f64> {
        let v = row.len();
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return vec![1.0 / v as f64; v];
        }
        for x in &mut row {
            *x /= sum;
        }
        loop {
            let pinned: Vec<bool> = row.iter().map(|&x| x <= floor).collect();
            let np = pinned.iter().filter(|&&b| b).count();
            if np == 0 {
                return row;
            }
            let target = 1.0 - np as f64 * floor;
            let free: f64 = row
                .iter()
                .zip(&pinned)
                .filter(|&(_, &p)| !p)
                .map(|(&x, _)| x)
                .sum();
            let mut changed = false;
            for i in 0..v {
                if pinned[i] {
                    if row[i] != floor {
                        changed = true;
                        row[i] = floor;
                    }
                } else {
                    let next = row[i] * target / free;
                    if next <= floor {
                        changed = true;
                    }
                    row[i] = next;
                }
            }
            if !changed {
                return row;
            }
        }
    }

    /// Product-form emission times priors for one epoch-1 instance.
    pub fn first_epoch_posterior(counts: &[(usize, u32)], params: &EpochParams) -> Vec<f64> {
        let k = params.k();
        let mut u = vec![0.0; k];
        for (c, out) in u.iter_mut().enumerate() {
            let mut p = params.pi[c];
            for &(j, n) in counts {
                p *= params.phi[c][j].powi(n as i32);
            }
            *out = p;
        }
        let z: f64 = u.iter().sum();
        u.iter_mut().for_each(|x| *x /= z);
        u
    }

    /// Joint posterior over all (current, previous) cluster pairs.
    pub fn joint_posterior(
        counts: &[(usize, u32)],
        curr: &EpochParams,
        prev: &EpochParams,
        alpha: f64,
    ) -> Vec<Vec<f64>> {
        let k = curr.k();
        let mut u = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in 0..k {
                let mut p = curr.pi[a] * prev.pi[b];
                for &(j, n) in counts {
                    p *= curr.phi[a][j].powi(n as i32)
                        * prev.phi[b][j].powf(alpha * f64::from(n));
                }
                u[a][b] = p;
            }
        }
        let z: f64 = u.iter().flatten().sum();
        for row in &mut u {
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        u
    }

    pub struct Posteriors {
        pub first: Vec<Vec<f64>>,
        /// `[t - 2][i][current][previous]`
        pub later: Vec<Vec<Vec<Vec<f64>>>>,
    }

    pub fn e_step(corpus: &Corpus, params: &TmmParams) -> Posteriors {
        let first = corpus
            .epoch_slice(1)
            .unwrap()
            .iter()
            .map(|inst| first_epoch_posterior(inst.counts(), &params.epochs[0]))
            .collect();
        let later = (2..=corpus.t())
            .map(|t| {
                corpus
                    .epoch_slice(t)
                    .unwrap()
                    .iter()
                    .map(|inst| {
                        joint_posterior(
                            inst.counts(),
                            &params.epochs[t - 1],
                            &params.epochs[t - 2],
                            params.alpha,
                        )
                    })
                    .collect()
            })
            .collect();
        Posteriors { first, later }
    }

    /// Direct evaluation of the coupled M-step update formulas.
    pub fn m_step(
        corpus: &Corpus,
        post: &Posteriors,
        k: usize,
        alpha: f64,
        floor: f64,
    ) -> Vec<EpochParams> {
        let v = corpus.v();
        let t_max = corpus.t();
        (1..=t_max)
            .map(|t| {
                let slice = corpus.epoch_slice(t).unwrap();
                let mut phi_num = vec![vec![0.0; v]; k];
                let mut pi_num = vec![0.0; k];
                // own-epoch term
                for (i, inst) in slice.iter().enumerate() {
                    for c in 0..k {
                        let q_sum: f64 = if t == 1 {
                            post.first[i][c]
                        } else {
                            (0..k).map(|b| post.later[t - 2][i][c][b]).sum()
                        };
                        for &(j, n) in inst.counts() {
                            phi_num[c][j] += f64::from(n) * q_sum;
                        }
                        pi_num[c] += q_sum;
                    }
                }
                // flow-back from the next epoch
                if t < t_max {
                    let next = corpus.epoch_slice(t + 1).unwrap();
                    for (i, inst) in next.iter().enumerate() {
                        for c in 0..k {
                            let q_sum: f64 = (0..k).map(|a| post.later[t - 1][i][a][c]).sum();
                            for &(j, n) in inst.counts() {
                                phi_num[c][j] += alpha * f64::from(n) * q_sum;
                            }
                            pi_num[c] += q_sum;
                        }
                    }
                }
                let phi: Vec<Vec<f64>> = phi_num
                    .into_iter()
                    .map(|row| floor_row(row, floor))
                    .collect();
                let pi_denom: f64 = pi_num.iter().sum();
                let pi = pi_num.into_iter().map(|x| x / pi_denom).collect();
                EpochParams { phi, pi }
            })
            .collect()
    }

    /// Direct score: log of the direct marginal sums per instance.
    pub fn score(corpus: &Corpus, params: &TmmParams) -> f64 {
        let mut total = 0.0;
        for inst in corpus.epoch_slice(1).unwrap() {
            let mut z = 0.0;
            for c in 0..params.k() {
                let mut p = params.epochs[0].pi[c];
                for &(j, n) in inst.counts() {
                    p *= params.epochs[0].phi[c][j].powi(n as i32);
                }
                z += p;
            }
            total += z.ln();
        }
        for t in 2..=corpus.t() {
            for inst in corpus.epoch_slice(t).unwrap() {
                let mut z = 0.0;
                for a in 0..params.k() {
                    for b in 0..params.k() {
                        let mut p = params.epochs[t - 1].pi[a] * params.epochs[t - 2].pi[b];
                        for &(j, n) in inst.counts() {
                            p *= params.epochs[t - 1].phi[a][j].powi(n as i32)
                                * params.epochs[t - 2].phi[b][j].powf(params.alpha * f64::from(n));
                        }
                        z += p;
                    }
                }
                total += z.ln();
            }
        }
        total
    }
}

/// Random small problem: corpus, parameters, and cluster count.
fn random_case(seed: u64) -> (Corpus, TmmParams, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3usize);
    let v = rng.random_range(2..=4usize);
    let t = rng.random_range(1..=3usize);
    let mut raw = Vec::new();
    for epoch in 1..=t {
        let n_inst = rng.random_range(1..=5usize);
        for i in 0..n_inst {
            let n_feats = rng.random_range(1..=v);
            let mut ids: Vec<usize> = (0..v).collect();
            for pos in 0..n_feats {
                let swap = rng.random_range(pos..v);
                ids.swap(pos, swap);
            }
            let counts: Vec<(usize, u32)> = ids[..n_feats]
                .iter()
                .map(|&j| (j, rng.random_range(1..=4u32)))
                .collect();
            raw.push(RawInstance {
                id: format!("t{epoch}_i{i}"),
                epoch: epoch as i64,
                counts,
            });
        }
    }
    let corpus = Corpus::build(FeatureDescriptor::anonymous(v), raw).unwrap();
    let epochs = (0..t)
        .map(|_| {
            let phi = (0..k)
                .map(|_| {
                    let mut row: Vec<f64> = (0..v).map(|_| 0.05 + rng.random::<f64>()).collect();
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    row
                })
                .collect();
            let mut pi: Vec<f64> = (0..k).map(|_| 0.1 + rng.random::<f64>()).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|x| *x /= s);
            EpochParams { phi, pi }
        })
        .collect();
    let alpha = 0.05 + 0.95 * rng.random::<f64>();
    (corpus, TmmParams { epochs, alpha }, k)
}

const TOL: f64 = 1e-10;

fn assert_close(a: f64, b: f64, what: &str, seed: u64) {
    assert!(
        (a - b).abs() <= TOL,
        "seed {seed}: {what} differs: {a} vs {b}"
    );
}

#[test]
fn e_step_matches_exhaustive_oracle() {
    for seed in 0..50 {
        let (corpus, params, k) = random_case(seed);
        let got = tmm_e_step(&corpus, &params);
        let want = oracle::e_step(&corpus, &params);
        for (g, w) in got.first_epoch.iter().zip(&want.first) {
            for c in 0..k {
                assert_close(g[c], w[c], "first-epoch posterior", seed);
            }
        }
        for (ge, we) in got.later.iter().zip(&want.later) {
            for (g, w) in ge.iter().zip(we) {
                for a in 0..k {
                    for b in 0..k {
                        assert_close(g[a][b], w[a][b], "joint posterior", seed);
                    }
                }
            }
        }
    }
}

#[test]
fn m_step_matches_exhaustive_oracle() {
    for seed in 0..50 {
        let (corpus, params, k) = random_case(seed);
        let post = tmm_e_step(&corpus, &params);
        let updated = tmm_m_step(&corpus, &post, params.alpha, 1e-9);
        // feed the oracle its own posteriors so both routes are independent
        let oracle_post = oracle::e_step(&corpus, &params);
        let want = oracle::m_step(&corpus, &oracle_post, k, params.alpha, 1e-9);
        for (ge, we) in updated.epochs.iter().zip(&want) {
            for c in 0..k {
                for j in 0..corpus.v() {
                    assert_close(ge.phi[c][j], we.phi[c][j], "phi update", seed);
                }
                assert_close(ge.pi[c], we.pi[c], "pi update", seed);
            }
        }
    }
}

#[test]
fn score_matches_exhaustive_oracle() {
    for seed in 0..50 {
        let (corpus, params, _) = random_case(seed);
        let got = score_log_likelihood(&corpus, &params);
        let want = oracle::score(&corpus, &params);
        assert_close(got, want, "score", seed);
    }
}

#[test]
fn posterior_slices_are_normalized() {
    for seed in [3u64, 17, 40] {
        let (corpus, params, _) = random_case(seed);
        let post: TmmPosteriors = tmm_e_step(&corpus, &params);
        for row in &post.first_epoch {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for epoch in &post.later {
            for joint in epoch {
                let s: f64 = joint.iter().flatten().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
