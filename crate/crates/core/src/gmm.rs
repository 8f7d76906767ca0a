//! Gaussian mixture over `(time, output)` fitted by EM, and Gaussian mixture
//! regression producing the time-indexed reference distribution.

use std::f64::consts::PI;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::DemoSet;
use crate::linalg::{floor_spd, log_sum_exp, matrix_to_rows, rows_to_matrix, symmetrize};

/// Eigenvalue floor applied to every mixture and regression covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("need at least {needed} samples for {k} components, got {got}")]
    InsufficientData { needed: usize, got: usize, k: usize },
    #[error("demonstration set must be aligned before fitting")]
    NotAligned,
    #[error("component count must be positive")]
    ZeroComponents,
    #[error("component {component} collapsed repeatedly")]
    DegenerateComponent { component: usize },
    #[error("component {component} has non-positive input variance")]
    SingularInputVariance { component: usize },
    #[error("invalid mixture: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    priors: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tolerance: f64,
    pub covariance_floor: f64,
    /// Re-seeding budget for collapsed components before giving up.
    pub max_reseeds: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tolerance: 1e-8,
            covariance_floor: COVARIANCE_FLOOR,
            max_reseeds: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmTrace {
    /// Total data log-likelihood after each E-step, starting from the initial model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Conditional distribution of the output given one input value.
#[derive(Debug, Clone)]
pub struct Conditional {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub responsibilities: Vec<f64>,
}

impl Gmm {
    pub fn new(
        priors: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, GmmError> {
        let k = priors.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        if means.len() != k || covariances.len() != k {
            return Err(GmmError::Invalid("component counts differ".into()));
        }
        let d = means[0].len();
        if d < 2 {
            return Err(GmmError::Invalid(
                "need one input and at least one output dimension".into(),
            ));
        }
        if priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(GmmError::Invalid("priors must be non-negative".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::Invalid(format!("priors sum to {total}")));
        }
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(GmmError::Invalid(format!(
                    "component {i} has wrong dimensions"
                )));
            }
            if Cholesky::new(symmetrize(c)).is_none() {
                return Err(GmmError::Invalid(format!(
                    "component {i} covariance is not SPD"
                )));
            }
        }
        Ok(Self {
            priors,
            means,
            covariances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Range of the input dimension covered by the component means.
    fn input_range(&self) -> (f64, f64) {
        self.means
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                (lo.min(m[0]), hi.max(m[0]))
            })
    }

    /// Condition the mixture on input `s`.
    pub fn condition(&self, s: f64) -> Result<Conditional, GmmError> {
        let out = self.dim() - 1;
        let mut log_w = Vec::with_capacity(self.n_components());
        let mut cond_means = Vec::with_capacity(self.n_components());
        let mut cond_covs = Vec::with_capacity(self.n_components());
        for (k, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            let var_s = c[(0, 0)];
            if !(var_s > 0.0) {
                return Err(GmmError::SingularInputVariance { component: k });
            }
            let diff = s - m[0];
            log_w.push(self.priors[k].ln() - 0.5 * ((2.0 * PI * var_s).ln() + diff * diff / var_s));
            let cross = c.view((1, 0), (out, 1)).column(0).into_owned();
            cond_means.push(m.rows(1, out) + &cross * (diff / var_s));
            cond_covs.push(c.view((1, 1), (out, out)) - &cross * cross.transpose() / var_s);
        }
        let norm = log_sum_exp(&log_w);
        let resp: Vec<f64> = log_w.iter().map(|w| (w - norm).exp()).collect();

        let mut mean = DVector::zeros(out);
        for (h, m) in resp.iter().zip(&cond_means) {
            mean += m * *h;
        }
        let mut second = DMatrix::zeros(out, out);
        for ((h, m), c) in resp.iter().zip(&cond_means).zip(&cond_covs) {
            second += (c + m * m.transpose()) * *h;
        }
        let covariance = floor_spd(&(second - &mean * mean.transpose()), COVARIANCE_FLOOR);
        Ok(Conditional {
            mean,
            covariance,
            responsibilities: resp,
        })
    }
}

/// Probabilistic reference trajectory `{s_n, mean_n, cov_n}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    inputs: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl ReferenceTrajectory {
    pub fn new(
        inputs: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, GmmError> {
        if inputs.is_empty() {
            return Err(GmmError::Invalid("empty reference".into()));
        }
        if means.len() != inputs.len() || covariances.len() != inputs.len() {
            return Err(GmmError::Invalid("reference lengths differ".into()));
        }
        if inputs.iter().any(|s| !s.is_finite()) || inputs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GmmError::Invalid(
                "inputs must be finite and strictly increasing".into(),
            ));
        }
        let dim = means[0].len();
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim || c.shape() != (dim, dim) {
                return Err(GmmError::Invalid("inconsistent output dimension".into()));
            }
            if m.iter().chain(c.iter()).any(|x| !x.is_finite()) {
                return Err(GmmError::Invalid("non-finite reference value".into()));
            }
        }
        Ok(Self {
            inputs,
            means,
            covariances,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
}

/// Gaussian mixture regression of the outputs on the input, evaluated at `inputs`.
pub fn gmr(gmm: &Gmm, inputs: &[f64]) -> Result<ReferenceTrajectory, GmmError> {
    let (lo, hi) = gmm.input_range();
    let mut means = Vec::with_capacity(inputs.len());
    let mut covariances = Vec::with_capacity(inputs.len());
    let mut warned = false;
    for &s in inputs {
        if !warned && (s < lo || s > hi) {
            warn!("GMR query s={s} outside component range [{lo}, {hi}]; extrapolating");
            warned = true;
        }
        let c = gmm.condition(s)?;
        means.push(c.mean);
        covariances.push(c.covariance);
    }
    ReferenceTrajectory::new(inputs.to_vec(), means, covariances)
}

pub fn fit_gmm(set: &DemoSet, k: usize, rng_seed: u64) -> Result<Gmm, GmmError> {
    fit_gmm_traced(set, k, rng_seed, &EmOptions::default()).map(|(g, _)| g)
}

pub fn fit_gmm_traced(
    set: &DemoSet,
    k: usize,
    rng_seed: u64,
    opts: &EmOptions,
) -> Result<(Gmm, EmTrace), GmmError> {
    if !set.is_aligned() {
        return Err(GmmError::NotAligned);
    }
    fit_gmm_data(&set.joint_data(), k, rng_seed, opts)
}

/// EM on raw rows whose first coordinate is the input variable.
///
/// Initialisation bins the data into `k` equal-width input intervals. The
/// M-step covariance is the sample covariance with its spectrum clipped at the
/// floor, the exact maximiser over covariances bounded below by the floor, so
/// the recorded log-likelihood never decreases.
pub fn fit_gmm_data(
    data: &[DVector<f64>],
    k: usize,
    rng_seed: u64,
    opts: &EmOptions,
) -> Result<(Gmm, EmTrace), GmmError> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    let n = data.len();
    if n < 10 * k {
        return Err(GmmError::InsufficientData {
            needed: 10 * k,
            got: n,
            k,
        });
    }
    let d = data[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let global_cov = weighted_covariance(data, &vec![1.0; n], &mean_of(data, &vec![1.0; n]));
    let global_cov = floor_spd(&global_cov, opts.covariance_floor);

    // time-binned initialisation
    let (s_lo, s_hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x[0]), hi.max(x[0]))
        });
    let width = (s_hi - s_lo) / k as f64;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, x) in data.iter().enumerate() {
        let b = if width > 0.0 {
            (((x[0] - s_lo) / width) as usize).min(k - 1)
        } else {
            i * k / n
        };
        bins[b].push(i);
    }
    let mut priors = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for bin in &bins {
        if bin.len() < 2 {
            let pick = rng.random_range(0..n);
            priors.push(1.0 / k as f64);
            means.push(data[pick].clone());
            covs.push(global_cov.clone());
            continue;
        }
        let pts: Vec<DVector<f64>> = bin.iter().map(|&i| data[i].clone()).collect();
        let w = vec![1.0; pts.len()];
        let m = mean_of(&pts, &w);
        priors.push(bin.len() as f64 / n as f64);
        covs.push(floor_spd(
            &weighted_covariance(&pts, &w, &m),
            opts.covariance_floor,
        ));
        means.push(m);
    }
    normalize(&mut priors);

    let mut resp = DMatrix::zeros(n, k);
    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    let mut ll = e_step(data, &priors, &means, &covs, &mut resp)?;
    trace.push(ll);

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        // M-step
        for j in 0..k {
            let w: Vec<f64> = resp.column(j).iter().copied().collect();
            let nk: f64 = w.iter().sum();
            if nk < 1e-8 * n as f64 || nk < 1.0 {
                reseeds += 1;
                if reseeds > opts.max_reseeds {
                    return Err(GmmError::DegenerateComponent { component: j });
                }
                debug!("re-seeding collapsed component {j}");
                means[j] = data[rng.random_range(0..n)].clone();
                covs[j] = global_cov.clone();
                priors[j] = 1.0 / k as f64;
                continue;
            }
            let m = mean_of(data, &w);
            covs[j] = floor_spd(&weighted_covariance(data, &w, &m), opts.covariance_floor);
            means[j] = m;
            priors[j] = nk / n as f64;
        }
        normalize(&mut priors);

        let new_ll = e_step(data, &priors, &means, &covs, &mut resp)?;
        trace.push(new_ll);
        let delta = new_ll - ll;
        ll = new_ll;
        if delta.abs() < opts.tolerance {
            converged = true;
            break;
        }
    }
    debug!("EM finished after {iterations} iterations, log-likelihood {ll}");
    debug_assert!(means.iter().all(|m| m.len() == d));

    let gmm = Gmm::new(priors, means, covs)?;
    Ok((
        gmm,
        EmTrace {
            log_likelihood: trace,
            iterations,
            converged,
        },
    ))
}

fn normalize(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= total;
    }
}

fn mean_of(data: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut m = DVector::zeros(data[0].len());
    let mut total = 0.0;
    for (x, wi) in data.iter().zip(w) {
        m.axpy(*wi, x, 1.0);
        total += wi;
    }
    m / total
}

fn weighted_covariance(data: &[DVector<f64>], w: &[f64], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut c = DMatrix::zeros(d, d);
    let mut total = 0.0;
    for (x, wi) in data.iter().zip(w) {
        let diff = x - mean;
        c.ger(*wi, &diff, &diff, 1.0);
        total += wi;
    }
    symmetrize(&(c / total))
}

/// Fills responsibilities and returns the total log-likelihood.
fn e_step(
    data: &[DVector<f64>],
    priors: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    resp: &mut DMatrix<f64>,
) -> Result<f64, GmmError> {
    let d = means[0].len() as f64;
    let factors: Vec<(Cholesky<f64, Dyn>, f64)> = covs
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let ch =
                Cholesky::new(c.clone()).ok_or(GmmError::DegenerateComponent { component: j })?;
            let log_det = 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Ok((ch, log_det))
        })
        .collect::<Result<_, GmmError>>()?;
    let mut total = 0.0;
    let mut row = vec![0.0; priors.len()];
    for (i, x) in data.iter().enumerate() {
        for (j, (ch, log_det)) in factors.iter().enumerate() {
            let diff = x - &means[j];
            let mut z = diff.clone();
            ch.l_dirty().solve_lower_triangular_mut(&mut z);
            row[j] = priors[j].ln() - 0.5 * (d * (2.0 * PI).ln() + log_det + z.norm_squared());
        }
        let lse = log_sum_exp(&row);
        total += lse;
        for (j, v) in row.iter().enumerate() {
            resp[(i, j)] = (v - lse).exp();
        }
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmFile {
    priors: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl Serialize for Gmm {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        GmmFile {
            priors: self.priors.clone(),
            means: self
                .means
                .iter()
                .map(|m| m.iter().copied().collect())
                .collect(),
            covariances: self.covariances.iter().map(matrix_to_rows).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Gmm {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let f = GmmFile::deserialize(deserializer)?;
        let covs = f
            .covariances
            .iter()
            .map(|rows| rows_to_matrix(rows).ok_or_else(|| D::Error::custom("ragged covariance")))
            .collect::<Result<Vec<_>, _>>()?;
        let means = f.means.into_iter().map(DVector::from_vec).collect();
        Gmm::new(f.priors, means, covs).map_err(D::Error::custom)
    }
}
