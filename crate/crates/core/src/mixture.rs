//! Shared numerics, parameter containers, and the static multinomial
//! mixture (MM) EM used as the per-epoch baseline.
//!
//! All probability products are evaluated as `n * ln p` sums in log space;
//! component rows are kept on the simplex with a small positive floor so
//! log-scores stay finite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Corpus, Instance};
use crate::error::{Error, Result};

/// Floor applied to priors inside log-score computation only; stored priors
/// may be exactly zero.
pub const EPS_PI_LOG: f64 = 1e-12;

/// Cluster component distributions and priors for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochParams {
    /// `K x V`; each row sums to one and is floored away from zero.
    pub phi: Vec<Vec<f64>>,
    /// Length `K`; sums to one, entries may be zero.
    pub pi: Vec<f64>,
}

impl EpochParams {
    pub fn k(&self) -> usize {
        self.phi.len()
    }

    pub fn v(&self) -> usize {
        self.phi.first().map_or(0, |row| row.len())
    }

    /// Check the simplex invariants: rows and priors sum to one within 1e-9,
    /// phi entries at or above `floor_phi`, priors non-negative.
    pub fn validate(&self, floor_phi: f64) -> Result<()> {
        if self.pi.len() != self.k() {
            return Err(Error::ShapeMismatch(format!(
                "pi has length {} but phi has {} rows",
                self.pi.len(),
                self.k()
            )));
        }
        for (k, row) in self.phi.iter().enumerate() {
            if row.len() != self.v() {
                return Err(Error::ShapeMismatch(format!("phi row {k} has wrong length")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("phi row {k} sums to {sum}")));
            }
            if row.iter().any(|&x| !x.is_finite() || x < floor_phi) {
                return Err(Error::Numeric(format!(
                    "phi row {k} has an entry below the floor {floor_phi}"
                )));
            }
        }
        let sum: f64 = self.pi.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("pi sums to {sum}")));
        }
        if self.pi.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::Numeric("pi has a negative entry".into()));
        }
        Ok(())
    }

    /// Element-wise natural log of `phi`.
    pub(crate) fn ln_phi(&self) -> Vec<Vec<f64>> {
        self.phi
            .iter()
            .map(|row| row.iter().map(|&x| x.ln()).collect())
            .collect()
    }

    /// Natural log of priors, floored at [`EPS_PI_LOG`].
    pub(crate) fn ln_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|&x| ln_floored(x)).collect()
    }
}

/// Log of a prior with the score-side floor applied.
#[inline]
pub(crate) fn ln_floored(x: f64) -> f64 {
    x.max(EPS_PI_LOG).ln()
}

/// Settings for an EM fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FitConfig {
    /// Number of clusters `K`.
    pub k: usize,
    pub max_iter: usize,
    /// Relative objective-change convergence threshold.
    pub tol: f64,
    /// Number of random restarts; the best objective wins.
    pub restarts: usize,
    pub seed: u64,
    /// Floor for component probabilities.
    pub floor_phi: f64,
}

impl FitConfig {
    pub fn new(k: usize) -> FitConfig {
        FitConfig {
            k,
            max_iter: 200,
            tol: 1e-6,
            restarts: 10,
            seed: 0,
            floor_phi: 1e-9,
        }
    }

    pub fn validate(&self, v: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig(
                "max_iter and restarts must be >= 1".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be > 0".into()));
        }
        if !(self.floor_phi > 0.0 && self.floor_phi < 1.0 / v as f64) {
            return Err(Error::InvalidConfig(format!(
                "floor_phi must lie in (0, 1/V); got {} with V={v}",
                self.floor_phi
            )));
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig::new(1)
    }
}

/// Outcome of a multi-restart EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<P> {
    pub params: P,
    /// Objective after initialization and after every (E, M) iteration.
    pub objective_trace: Vec<f64>,
    /// Which restart won.
    pub restart_index: usize,
    /// Number of (E, M) iterations the winning restart ran.
    pub iterations: usize,
}

impl<P> FitResult<P> {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("non-empty trace")
    }
}

/// `log sum_i exp(v_i)` with max-shift.
///
/// Errors when the input is empty or every value is negative infinity.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let out = lse(values);
    if out == f64::NEG_INFINITY {
        return Err(Error::Numeric(
            "log_sum_exp of all -inf (or empty) input".into(),
        ));
    }
    Ok(out)
}

/// Infallible log-sum-exp; returns -inf on all -inf input. Internal paths
/// feed it floored log-scores, which are always finite.
#[inline]
pub(crate) fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Clamp every entry of `row` to at least `floor` and renormalize so the row
/// still sums to one. Pinned entries keep exactly `floor`; the rest scale.
/// A row with no positive mass becomes uniform.
pub(crate) fn floor_and_normalize(row: &mut [f64], floor: f64) {
    let v = row.len();
    debug_assert!(v > 0);
    let uniform = 1.0 / v as f64;
    let sum: f64 = row.iter().sum();
    if !sum.is_finite() || sum <= 0.0 || floor >= uniform {
        row.fill(uniform);
        return;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    let mut pinned = vec![false; v];
    loop {
        let mut newly = false;
        for (x, p) in row.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *x <= floor {
                *p = true;
                *x = floor;
                newly = true;
            }
        }
        if !newly {
            return;
        }
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let target = 1.0 - n_pinned as f64 * floor;
        let free_sum: f64 = row
            .iter()
            .zip(&pinned)
            .filter(|&(_, &p)| !p)
            .map(|(&x, _)| x)
            .sum();
        if free_sum <= 0.0 {
            // every entry pinned; only possible when floor ~ 1/v
            row.fill(uniform);
            return;
        }
        let scale = target / free_sum;
        for (x, &p) in row.iter_mut().zip(&pinned) {
            if !p {
                *x *= scale;
            }
        }
    }
}

/// Random initialization: phi rows are normalized positive uniform draws,
/// priors are uniform `1/K`. Deterministic given the seed; draws are consumed
/// epoch-major, then cluster, then feature.
pub fn init_random(corpus: &Corpus, config: &FitConfig, seed: u64) -> Vec<EpochParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, v) = (config.k, corpus.v());
    (0..corpus.t())
        .map(|_| {
            let phi = (0..k)
                .map(|_| {
                    let mut row: Vec<f64> = (0..v).map(|_| 1.0 - rng.random::<f64>()).collect();
                    floor_and_normalize(&mut row, config.floor_phi);
                    row
                })
                .collect();
            EpochParams {
                phi,
                pi: vec![1.0 / k as f64; k],
            }
        })
        .collect()
}

/// Unnormalized log-scores `ln pi_k + sum_j n_ij ln phi_kj` for one instance.
pub(crate) fn mm_scores(instance: &Instance, ln_phi: &[Vec<f64>], ln_pi: &[f64]) -> Vec<f64> {
    ln_pi
        .iter()
        .zip(ln_phi)
        .map(|(&lp, row)| {
            let mut s = lp;
            for &(j, n) in instance.counts() {
                s += f64::from(n) * row[j];
            }
            s
        })
        .collect()
}

/// Posterior cluster responsibilities for each instance, rows normalized.
pub fn mm_responsibilities(slice: &[&Instance], params: &EpochParams) -> Vec<Vec<f64>> {
    let ln_phi = params.ln_phi();
    let ln_pi = params.ln_pi();
    slice
        .iter()
        .map(|inst| {
            let mut scores = mm_scores(inst, &ln_phi, &ln_pi);
            let norm = lse(&scores);
            debug_assert!(norm.is_finite());
            for s in scores.iter_mut() {
                *s = (*s - norm).exp();
            }
            scores
        })
        .collect()
}

/// One M-step of the static mixture: `phi_kj ∝ sum_i n_ij r_ik` (floored,
/// renormalized) and `pi_k = sum_i r_ik / |D|`. `v` is the vocabulary size.
pub fn mm_m_step(slice: &[&Instance], resp: &[Vec<f64>], floor_phi: f64, v: usize) -> EpochParams {
    assert_eq!(slice.len(), resp.len(), "responsibility rows match slice");
    let k = resp.first().map_or(0, |r| r.len());
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
    for row in phi.iter_mut() {
        floor_and_normalize(row, floor_phi);
    }
    let denom = slice.len() as f64;
    for p in pi.iter_mut() {
        *p /= denom;
    }
    EpochParams { phi, pi }
}

/// Observed-data log-likelihood `sum_i ln sum_k pi_k prod_j phi_kj^n_ij`.
pub fn mm_log_likelihood(slice: &[&Instance], params: &EpochParams) -> f64 {
    let ln_phi = params.ln_phi();
    let ln_pi = params.ln_pi();
    slice
        .iter()
        .map(|inst| lse(&mm_scores(inst, &ln_phi, &ln_pi)))
        .sum()
}

/// Relative objective-change convergence test.
#[inline]
pub(crate) fn converged(prev: f64, curr: f64, tol: f64) -> bool {
    (curr - prev).abs() / (curr.abs() + 1.0) < tol
}

/// Generic EM loop: record the objective of the initial parameters, then
/// alternate `step` and objective evaluation until the relative change drops
/// below `tol` or `max_iter` iterations have run.
pub(crate) fn run_em<P>(
    init: P,
    mut step: impl FnMut(&P) -> P,
    mut objective: impl FnMut(&P) -> f64,
    max_iter: usize,
    tol: f64,
) -> (P, Vec<f64>, usize) {
    let mut params = init;
    let mut trace = vec![objective(&params)];
    let mut iterations = 0;
    for _ in 0..max_iter {
        params = step(&params);
        let obj = objective(&params);
        trace.push(obj);
        iterations += 1;
        if converged(trace[trace.len() - 2], obj, tol) {
            break;
        }
    }
    (params, trace, iterations)
}

/// Index of the best final objective; ties go to the lowest restart index.
pub(crate) fn best_restart(finals: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in finals.iter().enumerate().skip(1) {
        if s > finals[best] {
            best = i;
        }
    }
    best
}

/// Fit the static multinomial mixture independently per epoch.
///
/// Each restart draws a full per-epoch initialization from seed
/// `config.seed + restart`, so a one-epoch corpus fits identically to the
/// temporal model given the same seed.
pub fn fit_mm(corpus: &Corpus, config: &FitConfig) -> Result<Vec<FitResult<EpochParams>>> {
    config.validate(corpus.v())?;
    let v = corpus.v();
    (1..=corpus.t())
        .map(|t| {
            let slice = corpus.epoch_slice(t)?;
            let runs: Vec<(EpochParams, Vec<f64>, usize)> = (0..config.restarts)
                .into_par_iter()
                .map(|r| {
                    let init = init_random(corpus, config, config.seed.wrapping_add(r as u64))
                        .swap_remove(t - 1);
                    run_em(
                        init,
                        |p| mm_m_step(&slice, &mm_responsibilities(&slice, p), config.floor_phi, v),
                        |p| mm_log_likelihood(&slice, p),
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
        })
        .collect()
}
