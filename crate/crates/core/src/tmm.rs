//! The temporal multinomial mixture: joint-posterior E-step, temporally
//! coupled M-steps, the score objective, and the multi-restart fit driver.
//!
//! Epoch `t >= 2` instances are scored against the pair of clusters
//! `(z_t, z_{t-1})`; the previous epoch's component distribution enters the
//! emission damped by `alpha`. Epoch 1 degenerates to the static mixture, as
//! does the whole model when `T = 1`.

use rayon::prelude::*;

use crate::corpus::{Corpus, Instance};
use crate::error::{Error, Result};
use crate::mixture::{
    best_restart, init_random, lse, mm_log_likelihood, mm_m_step, mm_responsibilities, mm_scores,
    run_em, EpochParams, FitConfig, FitResult,
};

/// Full temporal model parameters: one [`EpochParams`] per epoch plus the
/// previous-epoch emission weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TmmParams {
    pub epochs: Vec<EpochParams>,
    pub alpha: f64,
}

impl TmmParams {
    pub fn t(&self) -> usize {
        self.epochs.len()
    }

    pub fn k(&self) -> usize {
        self.epochs.first().map_or(0, EpochParams::k)
    }

    pub fn v(&self) -> usize {
        self.epochs.first().map_or(0, EpochParams::v)
    }

    pub fn validate(&self, floor_phi: f64) -> Result<()> {
        if self.epochs.is_empty() {
            return Err(Error::ShapeMismatch("no epochs".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        for e in &self.epochs {
            e.validate(floor_phi)?;
            if e.k() != self.k() || e.v() != self.v() {
                return Err(Error::ShapeMismatch(
                    "epochs disagree on K or V".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-instance posteriors: a `K` vector per epoch-1 instance and a `K x K`
/// joint slice (rows: current cluster, columns: previous cluster) per
/// instance at later epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TmmPosteriors {
    pub first_epoch: Vec<Vec<f64>>,
    /// `later[t - 2][i][k][k_prev]` for `t` in `2..=T`.
    pub later: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TmmPosteriors {
    pub fn t(&self) -> usize {
        self.later.len() + 1
    }
}

/// Marginal over the previous cluster: current-epoch responsibilities.
pub fn current_marginal(joint: &[Vec<f64>]) -> Vec<f64> {
    joint.iter().map(|row| row.iter().sum()).collect()
}

/// Marginal over the current cluster: the origin distribution.
pub fn previous_marginal(joint: &[Vec<f64>]) -> Vec<f64> {
    let k = joint.len();
    let mut out = vec![0.0; k];
    for row in joint {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

/// Unnormalized log joint score of `(z_t = k, z_{t-1} = k_prev)` for one
/// instance at epoch `t >= 2`:
/// `sum_j n_j (ln phi_t[k][j] + alpha ln phi_{t-1}[k_prev][j]) + ln pi_t[k] + ln pi_{t-1}[k_prev]`.
///
/// The per-instance constant of the emission is dropped; it is constant in
/// `(k, k_prev)` and cancels under normalization.
pub fn joint_log_score(
    instance: &Instance,
    t: usize,
    k: usize,
    k_prev: usize,
    params: &TmmParams,
) -> f64 {
    assert!(t >= 2 && t <= params.t(), "joint score requires 2 <= t <= T");
    let curr = &params.epochs[t - 1];
    let prev = &params.epochs[t - 2];
    let mut s = crate::mixture::ln_floored(curr.pi[k]) + crate::mixture::ln_floored(prev.pi[k_prev]);
    for &(j, n) in instance.counts() {
        s += f64::from(n) * (curr.phi[k][j].ln() + params.alpha * prev.phi[k_prev][j].ln());
    }
    s
}

/// Log tables for one epoch transition, shared by the E-step and the score.
struct PairTables {
    ln_phi_curr: Vec<Vec<f64>>,
    ln_pi_curr: Vec<f64>,
    ln_phi_prev: Vec<Vec<f64>>,
    ln_pi_prev: Vec<f64>,
    alpha: f64,
}

impl PairTables {
    fn new(params: &TmmParams, t: usize) -> PairTables {
        PairTables {
            ln_phi_curr: params.epochs[t - 1].ln_phi(),
            ln_pi_curr: params.epochs[t - 1].ln_pi(),
            ln_phi_prev: params.epochs[t - 2].ln_phi(),
            ln_pi_prev: params.epochs[t - 2].ln_pi(),
            alpha: params.alpha,
        }
    }

    /// The flattened `K x K` matrix of unnormalized log joint scores.
    fn scores(&self, instance: &Instance) -> Vec<f64> {
        let k = self.ln_pi_curr.len();
        // Per-cluster dot products against the instance, then combine.
        let a: Vec<f64> = (0..k)
            .map(|c| {
                let mut s = self.ln_pi_curr[c];
                for &(j, n) in instance.counts() {
                    s += f64::from(n) * self.ln_phi_curr[c][j];
                }
                s
            })
            .collect();
        let b: Vec<f64> = (0..k)
            .map(|c| {
                let mut s = 0.0;
                for &(j, n) in instance.counts() {
                    s += f64::from(n) * self.ln_phi_prev[c][j];
                }
                self.ln_pi_prev[c] + self.alpha * s
            })
            .collect();
        let mut out = Vec::with_capacity(k * k);
        for &ak in &a {
            for &bk in &b {
                out.push(ak + bk);
            }
        }
        out
    }
}

/// Compute all posteriors for the current parameters.
///
/// Epoch 1 uses the static responsibilities; later epochs normalize the
/// joint scores over all `K^2` cluster pairs.
pub fn tmm_e_step(corpus: &Corpus, params: &TmmParams) -> TmmPosteriors {
    assert_eq!(params.t(), corpus.t(), "params epochs match corpus");
    assert_eq!(params.v(), corpus.v(), "params vocabulary matches corpus");
    let k = params.k();
    let first_epoch = mm_responsibilities(&corpus.epoch_slice(1).unwrap(), &params.epochs[0]);
    let later = (2..=corpus.t())
        .map(|t| {
            let tables = PairTables::new(params, t);
            corpus
                .epoch_slice(t)
                .unwrap()
                .iter()
                .map(|inst| {
                    let mut flat = tables.scores(inst);
                    let norm = lse(&flat);
                    debug_assert!(norm.is_finite());
                    for s in flat.iter_mut() {
                        *s = (*s - norm).exp();
                    }
                    flat.chunks(k).map(<[f64]>::to_vec).collect()
                })
                .collect()
        })
        .collect();
    TmmPosteriors { first_epoch, later }
}

/// M-step accumulation for an epoch that receives flow-back from `t + 1`.
///
/// `resp` are the epoch's own responsibilities, `flowback[i][k]` the
/// previous-cluster marginals of the next epoch's posteriors. The component
/// numerator gains `alpha * n` from next-epoch instances; the prior
/// numerator gains their unweighted mass, so the denominator is
/// `|D_t| + |D_{t+1}|`.
fn m_step_with_flowback(
    slice: &[&Instance],
    resp: &[Vec<f64>],
    next_slice: &[&Instance],
    flowback: &[Vec<f64>],
    alpha: f64,
    floor_phi: f64,
    v: usize,
) -> EpochParams {
    let k = resp.first().map_or(0, Vec::len);
    let mut phi = vec![vec![0.0; v]; k];
    let mut pi = vec![0.0; k];
    for (inst, r) in slice.iter().zip(resp) {
        for (c, (row, p)) in r.iter().zip(phi.iter_mut().zip(pi.iter_mut())) {
            for &(j, n) in inst.counts() {
                row[j] += f64::from(n) * c;
            }
            *p += c;
        }
    }
    for (inst, fb) in next_slice.iter().zip(flowback) {
        for (c, (row, p)) in fb.iter().zip(phi.iter_mut().zip(pi.iter_mut())) {
            for &(j, n) in inst.counts() {
                row[j] += alpha * f64::from(n) * c;
            }
            *p += c;
        }
    }
    for row in phi.iter_mut() {
        crate::mixture::floor_and_normalize(row, floor_phi);
    }
    let denom = (slice.len() + next_slice.len()) as f64;
    for p in pi.iter_mut() {
        *p /= denom;
    }
    EpochParams { phi, pi }
}

/// Update all epochs' parameters from the posteriors.
///
/// Interior epochs combine their own expected counts with the
/// `alpha`-damped flow-back from the next epoch's joint posteriors; the
/// final epoch reduces to the static M-step, and a one-epoch corpus
/// reproduces it exactly.
pub fn tmm_m_step(
    corpus: &Corpus,
    post: &TmmPosteriors,
    alpha: f64,
    floor_phi: f64,
) -> TmmParams {
    let t_max = corpus.t();
    assert_eq!(post.t(), t_max, "posteriors match corpus epochs");
    let v = corpus.v();
    let epochs = (1..=t_max)
        .map(|t| {
            let slice = corpus.epoch_slice(t).unwrap();
            let resp: Vec<Vec<f64>> = if t == 1 {
                post.first_epoch.clone()
            } else {
                post.later[t - 2].iter().map(|j| current_marginal(j)).collect()
            };
            if t == t_max {
                mm_m_step(&slice, &resp, floor_phi, v)
            } else {
                let next_slice = corpus.epoch_slice(t + 1).unwrap();
                let flowback: Vec<Vec<f64>> = post.later[t - 1]
                    .iter()
                    .map(|j| previous_marginal(j))
                    .collect();
                m_step_with_flowback(&slice, &resp, &next_slice, &flowback, alpha, floor_phi, v)
            }
        })
        .collect();
    TmmParams { epochs, alpha }
}

/// The fit objective: summed per-instance log marginals of the pair scores,
/// `sum_{t>=2} sum_i ln sum_{k,k'} exp(joint) + sum_{i in D^1} ln sum_k exp(.)`.
pub fn score_log_likelihood(corpus: &Corpus, params: &TmmParams) -> f64 {
    let mut total = mm_log_likelihood(&corpus.epoch_slice(1).unwrap(), &params.epochs[0]);
    for t in 2..=corpus.t() {
        let tables = PairTables::new(params, t);
        for inst in corpus.epoch_slice(t).unwrap() {
            total += lse(&tables.scores(inst));
        }
    }
    total
}

/// Expected complete-data log-likelihood under `post` (constant emission
/// factor dropped). Both epochs' prior terms are included, so the M-step is
/// its exact maximizer over the simplex constraints.
pub fn surrogate_objective(
    corpus: &Corpus,
    post: &TmmPosteriors,
    params: &TmmParams,
    alpha: f64,
) -> f64 {
    let mut total = 0.0;
    {
        let ln_phi = params.epochs[0].ln_phi();
        let ln_pi = params.epochs[0].ln_pi();
        for (inst, q) in corpus.epoch_slice(1).unwrap().iter().zip(&post.first_epoch) {
            let scores = mm_scores(inst, &ln_phi, &ln_pi);
            for (qk, s) in q.iter().zip(&scores) {
                total += qk * s;
            }
        }
    }
    for t in 2..=corpus.t() {
        let curr = &params.epochs[t - 1];
        let prev = &params.epochs[t - 2];
        let ln_phi_curr = curr.ln_phi();
        let ln_pi_curr = curr.ln_pi();
        let ln_phi_prev = prev.ln_phi();
        let ln_pi_prev = prev.ln_pi();
        let k = curr.k();
        for (inst, joint) in corpus.epoch_slice(t).unwrap().iter().zip(&post.later[t - 2]) {
            let a: Vec<f64> = (0..k)
                .map(|c| {
                    let mut s = ln_pi_curr[c];
                    for &(j, n) in inst.counts() {
                        s += f64::from(n) * ln_phi_curr[c][j];
                    }
                    s
                })
                .collect();
            let b: Vec<f64> = (0..k)
                .map(|c| {
                    let mut s = 0.0;
                    for &(j, n) in inst.counts() {
                        s += f64::from(n) * ln_phi_prev[c][j];
                    }
                    ln_pi_prev[c] + alpha * s
                })
                .collect();
            for (row, &ak) in joint.iter().zip(&a) {
                for (q, &bk) in row.iter().zip(&b) {
                    total += q * (ak + bk);
                }
            }
        }
    }
    total
}

/// Fit the temporal model with multiple restarts, returning the restart with
/// the highest [`score_log_likelihood`] (ties to the lowest index).
pub fn fit_tmm(corpus: &Corpus, config: &FitConfig, alpha: f64) -> Result<FitResult<TmmParams>> {
    config.validate(corpus.v())?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let runs: Vec<(TmmParams, Vec<f64>, usize)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let init = TmmParams {
                epochs: init_random(corpus, config, config.seed.wrapping_add(r as u64)),
                alpha,
            };
            run_em(
                init,
                |p| tmm_m_step(corpus, &tmm_e_step(corpus, p), alpha, config.floor_phi),
                |p| score_log_likelihood(corpus, p),
                config.max_iter,
                config.tol,
            )
        })
        .collect();
    let finals: Vec<f64> = runs.iter().map(|(_, tr, _)| *tr.last().unwrap()).collect();
    let best = best_restart(&finals);
    let (params, objective_trace, iterations) = runs.into_iter().nth(best).unwrap();
    Ok(FitResult {
        params,
        objective_trace,
        restart_index: best,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use crate::mixture::{fit_mm, mm_m_step};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_epoch_corpus() -> Corpus {
        parse_corpus(
            r#"{"id": "a", "epoch": 1, "features": {"x": 2, "y": 1}}
{"id": "b", "epoch": 1, "features": {"z": 3}}
{"id": "c", "epoch": 2, "features": {"x": 1, "z": 2}}
{"id": "d", "epoch": 2, "features": {"y": 2}}"#,
            None,
        )
        .unwrap()
    }

    fn random_params(t: usize, k: usize, v: usize, alpha: f64, seed: u64) -> TmmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
        TmmParams { epochs, alpha }
    }

    #[test]
    fn joint_score_alpha_one_matches_term_by_term_product() {
        let c = two_epoch_corpus();
        let params = random_params(2, 2, 3, 1.0, 5);
        let inst = &c.epoch_slice(2).unwrap()[0];
        for k in 0..2 {
            for kp in 0..2 {
                let mut expected = params.epochs[1].pi[k].ln() + params.epochs[0].pi[kp].ln();
                for &(j, n) in inst.counts() {
                    expected += f64::from(n)
                        * (params.epochs[1].phi[k][j].ln() + params.epochs[0].phi[kp][j].ln());
                }
                let got = joint_log_score(inst, 2, k, kp, &params);
                assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn e_step_k1_is_degenerate() {
        let c = two_epoch_corpus();
        let params = random_params(2, 1, 3, 0.7, 9);
        let post = tmm_e_step(&c, &params);
        for row in &post.first_epoch {
            assert_eq!(row, &vec![1.0]);
        }
        for joint in &post.later[0] {
            assert_abs_diff_eq!(joint[0][0], 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn e_step_uniform_params_give_uniform_joint() {
        let c = two_epoch_corpus();
        let uniform = EpochParams {
            phi: vec![vec![1.0 / 3.0; 3]; 2],
            pi: vec![0.5, 0.5],
        };
        let params = TmmParams {
            epochs: vec![uniform.clone(), uniform],
            alpha: 0.7,
        };
        let post = tmm_e_step(&c, &params);
        for joint in &post.later[0] {
            for row in joint {
                for &q in row {
                    assert_abs_diff_eq!(q, 0.25, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn e_step_matches_softmax_of_joint_log_score() {
        let c = two_epoch_corpus();
        let params = random_params(2, 3, 3, 0.6, 11);
        let post = tmm_e_step(&c, &params);
        let slice = c.epoch_slice(2).unwrap();
        for (inst, joint) in slice.iter().zip(&post.later[0]) {
            let mut scores = Vec::new();
            for k in 0..3 {
                for kp in 0..3 {
                    scores.push(joint_log_score(inst, 2, k, kp, &params));
                }
            }
            let norm = crate::mixture::log_sum_exp(&scores).unwrap();
            let mut total = 0.0;
            for k in 0..3 {
                for kp in 0..3 {
                    let expected = (scores[k * 3 + kp] - norm).exp();
                    assert_abs_diff_eq!(joint[k][kp], expected, epsilon = 1e-12);
                    total += joint[k][kp];
                }
            }
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn alpha_zero_marginals_equal_static_responsibilities() {
        let c = two_epoch_corpus();
        let params = random_params(2, 3, 3, 0.0, 13);
        let post = tmm_e_step(&c, &params);
        let slice = c.epoch_slice(2).unwrap();
        let mm = mm_responsibilities(&slice, &params.epochs[1]);
        for (joint, mm_row) in post.later[0].iter().zip(&mm) {
            let marg = current_marginal(joint);
            for (a, b) in marg.iter().zip(mm_row) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alpha_zero_phi_update_equals_static_update() {
        let c = two_epoch_corpus();
        let params = random_params(2, 2, 3, 0.0, 17);
        let post = tmm_e_step(&c, &params);
        let updated = tmm_m_step(&c, &post, 0.0, 1e-9);
        for t in 1..=2 {
            let slice = c.epoch_slice(t).unwrap();
            let resp: Vec<Vec<f64>> = if t == 1 {
                post.first_epoch.clone()
            } else {
                post.later[t - 2].iter().map(|j| current_marginal(j)).collect()
            };
            let mm = mm_m_step(&slice, &resp, 1e-9, 3);
            for k in 0..2 {
                for j in 0..3 {
                    assert_abs_diff_eq!(
                        updated.epochs[t - 1].phi[k][j],
                        mm.phi[k][j],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn single_epoch_m_step_reduces_to_static() {
        let c = parse_corpus(
            r#"{"id": "a", "epoch": 1, "features": {"x": 2, "y": 1}}
{"id": "b", "epoch": 1, "features": {"y": 3}}"#,
            None,
        )
        .unwrap();
        let params = random_params(1, 2, 2, 0.7, 23);
        let post = tmm_e_step(&c, &params);
        let updated = tmm_m_step(&c, &post, 0.7, 1e-9);
        let slice = c.epoch_slice(1).unwrap();
        let mm = mm_m_step(&slice, &post.first_epoch, 1e-9, 2);
        assert_eq!(updated.epochs[0], mm);
    }

    #[test]
    fn score_k1_two_epochs_closed_form() {
        let c = two_epoch_corpus();
        let alpha = 0.7;
        let params = random_params(2, 1, 3, alpha, 29);
        // K=1: priors are 1, the pair sum has a single term.
        let mut expected = 0.0;
        for inst in c.epoch_slice(1).unwrap() {
            for &(j, n) in inst.counts() {
                expected += f64::from(n) * params.epochs[0].phi[0][j].ln();
            }
        }
        for inst in c.epoch_slice(2).unwrap() {
            for &(j, n) in inst.counts() {
                expected += f64::from(n)
                    * (params.epochs[1].phi[0][j].ln() + alpha * params.epochs[0].phi[0][j].ln());
            }
        }
        assert_abs_diff_eq!(score_log_likelihood(&c, &params), expected, epsilon = 1e-10);
    }

    #[test]
    fn score_invariant_under_joint_relabeling() {
        let c = two_epoch_corpus();
        let params = random_params(2, 3, 3, 0.5, 31);
        let perm = [2usize, 0, 1];
        let relabeled = TmmParams {
            epochs: params
                .epochs
                .iter()
                .map(|e| EpochParams {
                    phi: perm.iter().map(|&k| e.phi[k].clone()).collect(),
                    pi: perm.iter().map(|&k| e.pi[k]).collect(),
                })
                .collect(),
            alpha: params.alpha,
        };
        assert_abs_diff_eq!(
            score_log_likelihood(&c, &params),
            score_log_likelihood(&c, &relabeled),
            epsilon = 1e-9
        );
    }

    #[test]
    fn score_relabeling_single_epoch_only() {
        // Permuting one epoch's clusters (and nothing else) leaves the score
        // unchanged: the pair sum runs over all (k, k') combinations.
        let c = two_epoch_corpus();
        let params = random_params(2, 3, 3, 0.5, 37);
        let perm = [1usize, 2, 0];
        let mut relabeled = params.clone();
        relabeled.epochs[0] = EpochParams {
            phi: perm.iter().map(|&k| params.epochs[0].phi[k].clone()).collect(),
            pi: perm.iter().map(|&k| params.epochs[0].pi[k]).collect(),
        };
        assert_abs_diff_eq!(
            score_log_likelihood(&c, &params),
            score_log_likelihood(&c, &relabeled),
            epsilon = 1e-9
        );
    }

    #[test]
    fn surrogate_hard_posteriors_sum_joint_scores() {
        let c = two_epoch_corpus();
        let params = random_params(2, 2, 3, 0.8, 41);
        // Hard posteriors: epoch-1 instances on cluster 1, pairs on (0, 1).
        let post = TmmPosteriors {
            first_epoch: vec![vec![0.0, 1.0]; 2],
            later: vec![vec![vec![vec![0.0, 1.0], vec![0.0, 0.0]]; 2]],
        };
        let slice1 = c.epoch_slice(1).unwrap();
        let mut expected = 0.0;
        for inst in &slice1 {
            let mut s = params.epochs[0].pi[1].ln();
            for &(j, n) in inst.counts() {
                s += f64::from(n) * params.epochs[0].phi[1][j].ln();
            }
            expected += s;
        }
        for inst in c.epoch_slice(2).unwrap() {
            expected += joint_log_score(inst, 2, 0, 1, &params);
        }
        assert_abs_diff_eq!(
            surrogate_objective(&c, &post, &params, 0.8),
            expected,
            epsilon = 1e-10
        );
    }

    #[test]
    fn surrogate_is_additive_across_epoch_blocks() {
        let c = two_epoch_corpus();
        let params = random_params(2, 2, 3, 0.6, 43);
        let post = tmm_e_step(&c, &params);
        let full = surrogate_objective(&c, &post, &params, 0.6);

        // Zeroing the epoch-2 posteriors removes exactly their block.
        let mut first_only = post.clone();
        for joint in first_only.later[0].iter_mut() {
            for row in joint.iter_mut() {
                row.iter_mut().for_each(|q| *q = 0.0);
            }
        }
        let part1 = surrogate_objective(&c, &first_only, &params, 0.6);
        let mut second_only = post.clone();
        for row in second_only.first_epoch.iter_mut() {
            row.iter_mut().for_each(|q| *q = 0.0);
        }
        let part2 = surrogate_objective(&c, &second_only, &params, 0.6);
        assert_abs_diff_eq!(full, part1 + part2, epsilon = 1e-10);
    }

    #[test]
    fn m_step_maximizes_surrogate_against_perturbations() {
        let c = two_epoch_corpus();
        let alpha = 0.7;
        let start = random_params(2, 2, 3, alpha, 47);
        let post = tmm_e_step(&c, &start);
        let opt = tmm_m_step(&c, &post, alpha, 1e-9);
        let base = surrogate_objective(&c, &post, &opt, alpha);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let perturbed = TmmParams {
                epochs: opt
                    .epochs
                    .iter()
                    .map(|e| {
                        let phi = e
                            .phi
                            .iter()
                            .map(|row| {
                                let mut r: Vec<f64> = row
                                    .iter()
                                    .map(|&x| x * (0.2 + rng.random::<f64>()))
                                    .collect();
                                let s: f64 = r.iter().sum();
                                r.iter_mut().for_each(|x| *x /= s);
                                r
                            })
                            .collect();
                        let mut pi: Vec<f64> = e
                            .pi
                            .iter()
                            .map(|&x| (x + 1e-6) * (0.2 + rng.random::<f64>()))
                            .collect();
                        let s: f64 = pi.iter().sum();
                        pi.iter_mut().for_each(|x| *x /= s);
                        EpochParams { phi, pi }
                    })
                    .collect(),
                alpha,
            };
            let val = surrogate_objective(&c, &post, &perturbed, alpha);
            assert!(
                base >= val - 1e-10,
                "perturbation beat the M-step: {val} > {base}"
            );
        }
    }

    #[test]
    fn fit_single_epoch_equals_static_fit_exactly() {
        let c = parse_corpus(
            r#"{"id": "a", "epoch": 1, "features": {"x": 2, "y": 1}}
{"id": "b", "epoch": 1, "features": {"y": 3, "z": 1}}
{"id": "c", "epoch": 1, "features": {"z": 2, "x": 1}}"#,
            None,
        )
        .unwrap();
        let mut cfg = FitConfig::new(2);
        cfg.seed = 3;
        cfg.restarts = 4;
        let tmm = fit_tmm(&c, &cfg, 0.7).unwrap();
        let mm = fit_mm(&c, &cfg).unwrap().remove(0);
        assert_eq!(tmm.params.epochs[0], mm.params);
        assert_eq!(tmm.objective_trace, mm.objective_trace);
        assert_eq!(tmm.restart_index, mm.restart_index);
        assert_eq!(tmm.iterations, mm.iterations);
    }

    #[test]
    fn fit_trace_monotone_and_normalized() {
        let c = two_epoch_corpus();
        let mut cfg = FitConfig::new(2);
        cfg.restarts = 3;
        cfg.seed = 11;
        let fit = fit_tmm(&c, &cfg, 0.7).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {w:?}");
        }
        fit.params.validate(cfg.floor_phi).unwrap();
        let post = tmm_e_step(&c, &fit.params);
        for row in &post.first_epoch {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
        for joint in &post.later[0] {
            let total: f64 = joint.iter().flatten().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_rejects_bad_alpha() {
        let c = two_epoch_corpus();
        let cfg = FitConfig::new(2);
        assert!(fit_tmm(&c, &cfg, 0.0).is_err());
        assert!(fit_tmm(&c, &cfg, 1.5).is_err());
    }
}
