//! Kernelized movement primitive: dual-form mean prediction from a
//! probabilistic reference and adaptation through inserted via-points.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::ReferenceTrajectory;
use crate::linalg::{matrix_to_rows, rows_to_matrix, symmetrize};

/// Covariance given to via-points that do not specify one.
pub const DEFAULT_VIA_COVARIANCE: f64 = 1e-6;

const JITTER: [f64; 2] = [1e-10, 1e-8];

#[derive(Debug, Error)]
pub enum KmpError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("reference trajectory is empty")]
    EmptyReference,
    #[error("invalid reference: {0}")]
    InvalidReference(String),
    #[error("(K + lambda*Sigma) is not positive definite even with jitter {jitter:e}")]
    FactorizationFailure { jitter: f64 },
    #[error("via-point {index} is invalid: {reason}")]
    InvalidViaPoint { index: usize, reason: String },
    #[error("via-points {first} (s={s_first}) and {second} (s={s_second}) target the same input")]
    ConflictingViaPoints {
        first: usize,
        second: usize,
        s_first: f64,
        s_second: f64,
    },
    #[error("malformed model file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// Inverse squared length scale `h` in `exp(-h (s_i - s_j)^2)`, in 1/s^2.
    pub bandwidth: f64,
    pub lambda: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            bandwidth: 2.0,
            lambda: 10.0,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), KmpError> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(KmpError::InvalidParams(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(KmpError::InvalidParams(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        (-self.bandwidth * d * d).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViaPoint {
    pub s: f64,
    pub mean: Vec<f64>,
    /// Row-major covariance; `None` means `1e-6 * I`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl ViaPoint {
    pub fn new(s: f64, mean: DVector<f64>) -> Self {
        Self {
            s,
            mean: mean.iter().copied().collect(),
            covariance: None,
        }
    }

    pub fn with_covariance(mut self, cov: &DMatrix<f64>) -> Self {
        self.covariance = Some(matrix_to_rows(cov));
        self
    }

    fn resolve(&self, index: usize, dim: usize) -> Result<(DVector<f64>, DMatrix<f64>), KmpError> {
        let bad = |reason: String| KmpError::InvalidViaPoint { index, reason };
        if !self.s.is_finite() {
            return Err(bad("input is not finite".into()));
        }
        if self.mean.len() != dim {
            return Err(bad(format!(
                "mean has {} entries, expected {dim}",
                self.mean.len()
            )));
        }
        if self.mean.iter().any(|x| !x.is_finite()) {
            return Err(bad("mean is not finite".into()));
        }
        let cov = match &self.covariance {
            None => DMatrix::identity(dim, dim) * DEFAULT_VIA_COVARIANCE,
            Some(rows) => {
                let m = rows_to_matrix(rows).ok_or_else(|| bad("ragged covariance".into()))?;
                if m.shape() != (dim, dim) {
                    return Err(bad(format!("covariance must be {dim}x{dim}")));
                }
                if m.iter().any(|x| !x.is_finite())
                    || (&m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax())
                    || Cholesky::new(m.clone()).is_none()
                {
                    return Err(bad("covariance is not symmetric positive definite".into()));
                }
                m
            }
        };
        Ok((DVector::from_column_slice(&self.mean), cov))
    }
}

/// Trained KMP. Immutable; every prediction is `sum_i k(s*, s_i) alpha_i`
/// with `alpha = (K + lambda Sigma)^-1 mu` computed once at training.
#[derive(Debug, Clone)]
pub struct KmpModel {
    params: KernelParams,
    inputs: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    mu_stack: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    /// Column `i` holds the `O`-dimensional weight block of reference point `i`.
    alpha: DMatrix<f64>,
    jitter: f64,
}

impl KmpModel {
    pub fn train(reference: &ReferenceTrajectory, params: KernelParams) -> Result<Self, KmpError> {
        Self::train_points(
            params,
            reference.inputs().to_vec(),
            reference.means().to_vec(),
            reference.covariances().to_vec(),
        )
    }

    /// Train on reference points in any order. Inputs must be distinct.
    pub fn train_points(
        params: KernelParams,
        inputs: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self, KmpError> {
        params.validate()?;
        let n = inputs.len();
        if n == 0 {
            return Err(KmpError::EmptyReference);
        }
        if means.len() != n || covariances.len() != n {
            return Err(KmpError::InvalidReference("lengths differ".into()));
        }
        let o = means[0].len();
        if o == 0 {
            return Err(KmpError::InvalidReference("zero output dimension".into()));
        }
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != o || c.shape() != (o, o) {
                return Err(KmpError::InvalidReference(format!(
                    "point {i} has wrong dimensions"
                )));
            }
            if !inputs[i].is_finite() || m.iter().chain(c.iter()).any(|x| !x.is_finite()) {
                return Err(KmpError::InvalidReference(format!(
                    "point {i} is not finite"
                )));
            }
        }

        let dim = n * o;
        let mut system = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                let k = params.kernel(inputs[i], inputs[j]);
                for d in 0..o {
                    system[(i * o + d, j * o + d)] = k;
                }
            }
            let block = symmetrize(&covariances[i]) * params.lambda;
            let mut diag = system.view_mut((i * o, i * o), (o, o));
            diag += &block;
        }
        let mut mu_stack = DVector::zeros(dim);
        for (i, m) in means.iter().enumerate() {
            mu_stack.rows_mut(i * o, o).copy_from(m);
        }

        let (factor, jitter) = factorize(&system)?;
        let flat = factor.solve(&mu_stack);
        let alpha = DMatrix::from_column_slice(o, n, flat.as_slice());
        Ok(Self {
            params,
            inputs,
            means,
            covariances,
            mu_stack,
            factor,
            alpha,
            jitter,
        })
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.alpha.nrows()
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

    pub fn mu_stack(&self) -> &DVector<f64> {
        &self.mu_stack
    }

    /// Diagonal jitter that was needed for the factorisation (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Solve `(K + lambda Sigma) x = v` with the stored factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    /// Reassemble `K + lambda Sigma` (plus any jitter) from the factor.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let l = self.factor.l();
        &l * l.transpose()
    }

    pub fn predict_mean(&self, s_star: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.output_dim());
        for (i, &s) in self.inputs.iter().enumerate() {
            out.axpy(self.params.kernel(s_star, s), &self.alpha.column(i), 1.0);
        }
        out
    }

    /// Return a model retrained with `via` merged into the reference.
    ///
    /// A via-point within half a grid step of an existing input replaces that
    /// point; otherwise it is inserted. Two via-points landing on the same
    /// input are rejected.
    pub fn adapt(&self, via: &[ViaPoint]) -> Result<Self, KmpError> {
        if via.is_empty() {
            return Ok(self.clone());
        }
        let o = self.output_dim();
        let resolved = via
            .iter()
            .enumerate()
            .map(|(i, v)| v.resolve(i, o))
            .collect::<Result<Vec<_>, _>>()?;
        let half = self.half_step();

        for i in 0..via.len() {
            for j in (i + 1)..via.len() {
                if (via[i].s - via[j].s).abs() < half {
                    return Err(KmpError::ConflictingViaPoints {
                        first: i,
                        second: j,
                        s_first: via[i].s,
                        s_second: via[j].s,
                    });
                }
            }
        }

        let mut inputs = self.inputs.clone();
        let mut means = self.means.clone();
        let mut covs = self.covariances.clone();
        let mut replaced_by: Vec<Option<usize>> = vec![None; inputs.len()];
        let mut appended = Vec::new();
        for (vi, (v, (m, c))) in via.iter().zip(resolved).enumerate() {
            let nearest = nearest_index(&self.inputs, v.s);
            if (self.inputs[nearest] - v.s).abs() < half {
                if let Some(prev) = replaced_by[nearest] {
                    return Err(KmpError::ConflictingViaPoints {
                        first: prev,
                        second: vi,
                        s_first: via[prev].s,
                        s_second: v.s,
                    });
                }
                replaced_by[nearest] = Some(vi);
                debug!(
                    "via-point {vi} replaces reference point at s={}",
                    self.inputs[nearest]
                );
                inputs[nearest] = v.s;
                means[nearest] = m;
                covs[nearest] = c;
            } else {
                appended.push((v.s, m, c));
            }
        }
        for (s, m, c) in appended {
            inputs.push(s);
            means.push(m);
            covs.push(c);
        }
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by(|&a, &b| inputs[a].total_cmp(&inputs[b]));
        Self::train_points(
            self.params,
            order.iter().map(|&i| inputs[i]).collect(),
            order.iter().map(|&i| means[i].clone()).collect(),
            order.iter().map(|&i| covs[i].clone()).collect(),
        )
    }

    fn half_step(&self) -> f64 {
        let n = self.inputs.len();
        if n < 2 {
            return f64::EPSILON;
        }
        let (lo, hi) = self
            .inputs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
                (a.min(s), b.max(s))
            });
        0.5 * (hi - lo) / (n - 1) as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, KmpError> {
        let f: KmpFile =
            serde_json::from_str(text).map_err(|e| KmpError::Malformed(e.to_string()))?;
        let n = f.inputs.len();
        let o = f.mu_stack.len().checked_div(n).unwrap_or(0);
        if n == 0 || o * n != f.mu_stack.len() || f.covariances.len() != n {
            return Err(KmpError::Malformed("inconsistent model dimensions".into()));
        }
        let means = (0..n)
            .map(|i| DVector::from_column_slice(&f.mu_stack[i * o..(i + 1) * o]))
            .collect();
        let covs = f
            .covariances
            .iter()
            .map(|rows| {
                rows_to_matrix(rows)
                    .filter(|m| m.shape() == (o, o))
                    .ok_or_else(|| KmpError::Malformed("bad covariance shape".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::train_points(f.params, f.inputs, means, covs)
    }

    fn to_file(&self) -> KmpFile {
        KmpFile {
            params: self.params,
            inputs: self.inputs.clone(),
            mu_stack: self.mu_stack.iter().copied().collect(),
            covariances: self.covariances.iter().map(matrix_to_rows).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KmpFile {
    params: KernelParams,
    inputs: Vec<f64>,
    mu_stack: Vec<f64>,
    covariances: Vec<Vec<Vec<f64>>>,
}

fn nearest_index(inputs: &[f64], s: f64) -> usize {
    inputs
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn factorize(system: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), KmpError> {
    if let Some(c) = Cholesky::new(system.clone()) {
        return Ok((c, 0.0));
    }
    let n = system.nrows();
    for j in JITTER {
        if let Some(c) = Cholesky::new(system + DMatrix::identity(n, n) * j) {
            debug!("KMP factorisation needed jitter {j:e}");
            return Ok((c, j));
        }
    }
    Err(KmpError::FactorizationFailure {
        jitter: JITTER[JITTER.len() - 1],
    })
}
