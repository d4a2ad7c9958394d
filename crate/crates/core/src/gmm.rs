//! Gaussian mixtures on the product manifold `time × pose`: density, EM
//! fitting and Gaussian mixture regression on time.
//!
//! Every component keeps its covariance in the tangent space at its own
//! mean. Densities use the flat tangent-space normalizer
//! `(2π)^{-D/2} |Σ|^{-1/2}` with `u = log_μ(x)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{Manifold, ManifoldError, ManifoldSpec, Point};
use crate::skeleton::PoseEncoding;

pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Smallest eigenvalue kept in a fitted covariance.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;
/// Allowed decrease of the average log-likelihood between EM iterations.
const MIN_TIME_VARIANCE: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("covariance of component {0} is not positive definite")]
    SingularCovariance(usize),
    #[error("every component density underflows for this point")]
    AllZeroDensity,
    #[error("time bin {0} received no points at initialization; use fewer components")]
    EmptyBin(usize),
    #[error("time variance of component {0} is too small to condition on")]
    SingularTimeVariance(usize),
    #[error("invalid training input: {0}")]
    InvalidInput(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// A pose together with its (raw) timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPose {
    pub time: f64,
    pub pose: Point,
}

pub type PoseSequence = Vec<TimedPose>;

/// Maps strictly increasing timestamps onto `[0, 1]`; a single timestamp maps to 0.
pub fn phase_normalize(times: &[f64]) -> Result<Vec<f64>, GmmError> {
    if times.is_empty() {
        return Err(GmmError::InvalidInput("empty sequence".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(GmmError::InvalidInput("non-finite timestamp".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GmmError::InvalidInput("timestamps must be strictly increasing".into()));
    }
    if times.len() == 1 {
        return Ok(vec![0.0]);
    }
    let (t0, span) = (times[0], times[times.len() - 1] - times[0]);
    let mut phases: Vec<f64> = times.iter().map(|t| (t - t0) / span).collect();
    *phases.last_mut().expect("non-empty") = 1.0;
    Ok(phases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub components: usize,
    pub max_iterations: usize,
    pub ll_tolerance: f64,
    pub regularization: f64,
    /// Recorded in the model metadata. Initialization is by time binning and
    /// consumes no randomness.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            components: 5,
            max_iterations: 200,
            ll_tolerance: 1e-6,
            regularization: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub demo_count: usize,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub converged: bool,
    /// Settings the model was fitted with, so it can be refitted on a
    /// subset of the demos.
    pub config: TrainingConfig,
}

/// A Gaussian in the tangent space at its mean, with a cached factorization.
#[derive(Debug, Clone)]
struct TangentGaussian {
    mean: Point,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl TangentGaussian {
    fn new(mean: Point, covariance: DMatrix<f64>, index: usize) -> Result<Self, GmmError> {
        let chol = Cholesky::new(covariance.clone()).ok_or(GmmError::SingularCovariance(index))?;
        let d = covariance.nrows() as f64;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(GmmError::SingularCovariance(index));
        }
        Ok(Self {
            mean,
            covariance,
            chol,
            log_norm: -0.5 * (d * LN_2PI + log_det),
        })
    }

    fn log_density(&self, manifold: &Manifold, x: &Point) -> Result<f64, GmmError> {
        let u = manifold.log(&self.mean, x)?;
        Ok(self.log_density_tangent(&u))
    }

    fn log_density_tangent(&self, u: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(u)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }
}

/// Tangent-space Gaussian density at `x` for a covariance given in the
/// tangent space at `mean`.
pub fn gaussian_density(manifold: &Manifold, x: &Point, mean: &Point, covariance: &DMatrix<f64>) -> Result<f64, GmmError> {
    gaussian_log_density(manifold, x, mean, covariance).map(f64::exp)
}

pub fn gaussian_log_density(manifold: &Manifold, x: &Point, mean: &Point, covariance: &DMatrix<f64>) -> Result<f64, GmmError> {
    check_square(covariance, manifold.tangent_dim(), 0)?;
    TangentGaussian::new(mean.clone(), covariance.clone(), 0)?.log_density(manifold, x)
}

fn check_square(m: &DMatrix<f64>, n: usize, index: usize) -> Result<(), GmmError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(GmmError::InvalidModel(format!(
            "covariance {index} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `ln Σ exp(aᵢ)` with max subtraction; `-∞` when every term is `-∞`.
pub(crate) fn log_sum_exp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + a.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mixture model on `Euclidean(1) × pose`.
#[derive(Debug, Clone)]
pub struct GmmModel {
    joint: Manifold,
    pose: Manifold,
    encoding: Option<PoseEncoding>,
    weights: Vec<f64>,
    components: Vec<TangentGaussian>,
    meta: TrainingMeta,
}

impl GmmModel {
    /// Assembles and validates a model. `means` are joint points (time first).
    pub fn new(
        pose_spec: ManifoldSpec,
        weights: Vec<f64>,
        means: Vec<Point>,
        covariances: Vec<DMatrix<f64>>,
        meta: TrainingMeta,
    ) -> Result<Self, GmmError> {
        let pose = Manifold::new(pose_spec.clone())?;
        let joint = Manifold::new(joint_spec(pose_spec))?;
        let k = weights.len();
        if k == 0 {
            return Err(GmmError::InvalidModel("at least one component required".into()));
        }
        if means.len() != k || covariances.len() != k {
            return Err(GmmError::InvalidModel("weights, means and covariances must have equal length".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GmmError::InvalidModel("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidModel(format!("weights sum to {total}, expected 1")));
        }
        let mut components = Vec::with_capacity(k);
        for (i, (mean, cov)) in means.into_iter().zip(covariances).enumerate() {
            joint.check_point(&mean)?;
            check_square(&cov, joint.tangent_dim(), i)?;
            if (&cov - cov.transpose()).amax() > 1e-9 {
                return Err(GmmError::InvalidModel(format!("covariance {i} is not symmetric")));
            }
            components.push(TangentGaussian::new(mean, cov, i)?);
        }
        Ok(Self {
            joint,
            pose,
            encoding: None,
            weights,
            components,
            meta,
        })
    }

    /// Attaches the pose encoding the model was trained with.
    pub fn with_encoding(mut self, encoding: PoseEncoding) -> Result<Self, GmmError> {
        if encoding.manifold_spec() != *self.pose.spec() {
            return Err(GmmError::InvalidModel("encoding does not match the pose manifold".into()));
        }
        self.encoding = Some(encoding);
        Ok(self)
    }

    pub fn encoding(&self) -> Option<PoseEncoding> {
        self.encoding
    }

    pub fn joint_manifold(&self) -> &Manifold {
        &self.joint
    }

    pub fn pose_manifold(&self) -> &Manifold {
        &self.pose
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> impl Iterator<Item = &Point> {
        self.components.iter().map(|c| &c.mean)
    }

    pub fn covariances(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.components.iter().map(|c| &c.covariance)
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    /// Builds the joint point `(time, pose)`.
    pub fn joint_point(&self, time: f64, pose: &Point) -> Point {
        joint_point(time, pose)
    }

    /// `ln φ_k + ln N(x | μ_k, Σ_k)` for every component.
    pub fn component_log_terms(&self, x: &Point) -> Result<Vec<f64>, GmmError> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.log_density(&self.joint, x)?))
            .collect()
    }

    /// `ln Σ_k φ_k N(x | μ_k, Σ_k)`; `-∞` when every component underflows.
    pub fn log_density(&self, x: &Point) -> Result<f64, GmmError> {
        Ok(log_sum_exp(&self.component_log_terms(x)?))
    }

    /// Like [`log_density`](Self::log_density), but a component whose mean is
    /// antipodal to `x` on some sphere factor contributes zero density
    /// instead of failing.
    pub fn frame_log_likelihood(&self, x: &Point) -> Result<f64, GmmError> {
        let mut terms = Vec::with_capacity(self.component_count());
        for (w, c) in self.weights.iter().zip(&self.components) {
            match c.log_density(&self.joint, x) {
                Ok(ld) => terms.push(w.ln() + ld),
                Err(GmmError::Manifold(ManifoldError::AntipodalPoint(_))) => terms.push(f64::NEG_INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(log_sum_exp(&terms))
    }

    /// Posterior component probabilities of a joint point.
    pub fn responsibilities(&self, x: &Point) -> Result<Vec<f64>, GmmError> {
        let terms = self.component_log_terms(x)?;
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(GmmError::AllZeroDensity);
        }
        Ok(normalize_log_terms(&terms, lse))
    }

    /// Gaussian mixture regression of the pose on time.
    pub fn condition(&self, t: f64) -> Result<GmrResult, GmmError> {
        if !t.is_finite() {
            return Err(GmmError::InvalidInput("conditioning time must be finite".into()));
        }
        let k = self.component_count();
        let pd = self.pose.tangent_dim();
        let mut log_h = Vec::with_capacity(k);
        for (i, (w, c)) in self.weights.iter().zip(&self.components).enumerate() {
            let var = c.covariance[(0, 0)];
            if !(var >= MIN_TIME_VARIANCE) {
                return Err(GmmError::SingularTimeVariance(i));
            }
            let dt = t - c.mean[0];
            log_h.push(w.ln() - 0.5 * (LN_2PI + var.ln()) - 0.5 * dt * dt / var);
        }
        let lse = log_sum_exp(&log_h);
        if !lse.is_finite() {
            return Err(GmmError::AllZeroDensity);
        }
        let activations = normalize_log_terms(&log_h, lse);

        let mut cond_means = Vec::with_capacity(k);
        let mut cond_covs = Vec::with_capacity(k);
        for c in &self.components {
            let var = c.covariance[(0, 0)];
            let cross = c.covariance.view((1, 0), (pd, 1)).column(0).into_owned();
            let pose_mean = c.mean.rows(1, self.pose.ambient_dim()).into_owned();
            let shift = &cross * ((t - c.mean[0]) / var);
            let y = self.pose.exp(&pose_mean, &shift)?;
            let yy = c.covariance.view((1, 1), (pd, pd)).into_owned();
            let schur = yy - &cross * cross.transpose() / var;
            // The conditional covariance lives at the component mean; carry it
            // to the conditional mean first.
            let a = self.pose.transport_matrix(&pose_mean, &y)?;
            cond_covs.push(&a * schur * a.transpose());
            cond_means.push(y);
        }

        let mean = self.pose.frechet_mean(&cond_means, &activations)?;
        let mut covariance = DMatrix::zeros(pd, pd);
        for ((y, s), &h) in cond_means.iter().zip(&cond_covs).zip(&activations) {
            if h == 0.0 {
                continue;
            }
            let a = self.pose.transport_matrix(y, &mean)?;
            let l = self.pose.log(&mean, y)?;
            covariance += (&a * s * a.transpose() + &l * l.transpose()) * h;
        }
        symmetrize(&mut covariance);
        Ok(GmrResult {
            mean,
            covariance,
            activations,
        })
    }
}

/// Outcome of conditioning the mixture on a time value.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrResult {
    /// Pose point.
    pub mean: Point,
    /// Covariance in the tangent space at `mean`.
    pub covariance: DMatrix<f64>,
    pub activations: Vec<f64>,
}

pub fn gmr_condition(model: &GmmModel, t: f64) -> Result<GmrResult, GmmError> {
    model.condition(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub pose: Point,
    pub covariance: DMatrix<f64>,
}

/// Evaluates the regression at `frame_count` evenly spaced phases in `[0, 1]`.
pub fn generate_trajectory(model: &GmmModel, frame_count: usize) -> Result<Vec<TrajectoryPoint>, GmmError> {
    if frame_count < 2 {
        return Err(GmmError::InvalidInput("frame_count must be at least 2".into()));
    }
    (0..frame_count)
        .map(|i| {
            let time = if i + 1 == frame_count {
                1.0
            } else {
                i as f64 / (frame_count - 1) as f64
            };
            let r = model.condition(time)?;
            Ok(TrajectoryPoint {
                time,
                pose: r.mean,
                covariance: r.covariance,
            })
        })
        .collect()
}

fn joint_spec(pose: ManifoldSpec) -> ManifoldSpec {
    ManifoldSpec::Product(vec![ManifoldSpec::Euclidean(1), pose])
}

pub fn joint_point(time: f64, pose: &Point) -> Point {
    let mut x = DVector::zeros(pose.len() + 1);
    x[0] = time;
    x.rows_mut(1, pose.len()).copy_from(pose);
    x
}

fn normalize_log_terms(terms: &[f64], lse: f64) -> Vec<f64> {
    let mut r: Vec<f64> = terms.iter().map(|a| (a - lse).exp()).collect();
    let s: f64 = r.iter().sum();
    r.iter_mut().for_each(|x| *x /= s);
    r
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for c in 0..n {
        for r in 0..c {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Adds `λI` and raises eigenvalues below [`EIGENVALUE_FLOOR`].
fn regularize(mut cov: DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    for i in 0..cov.nrows() {
        cov[(i, i)] += lambda;
    }
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.min() < EIGENVALUE_FLOOR {
        let floored = eig.eigenvalues.map(|e| e.max(EIGENVALUE_FLOOR));
        cov = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        symmetrize(&mut cov);
    }
    cov
}

/// Result of [`fit_em_traced`]: the model plus the average log-likelihood
/// after initialization and after every accepted M-step.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
    /// Objective of an M-step that was rejected for lowering the
    /// log-likelihood, which ends the fit.
    pub rejected_step: Option<f64>,
}

/// Fits a mixture to demonstrations (see [`fit_em_traced`]).
pub fn fit_em(sequences: &[PoseSequence], pose_spec: &ManifoldSpec, config: &TrainingConfig) -> Result<GmmModel, GmmError> {
    fit_em_traced(sequences, pose_spec, config).map(|f| f.model)
}

/// EM on the joint `time × pose` manifold.
///
/// Each sequence is phase-normalized to `[0, 1]` and all points are pooled.
/// Component `k` starts from the points whose phase falls in `[k/K, (k+1)/K)`.
/// Each M-step takes responsibility-weighted Fréchet means and tangent
/// covariances (plus `λI`). Iteration stops when the average log-likelihood
/// improves by less than `ll_tolerance`, when an M-step would lower it (that
/// step is discarded), or after `max_iterations` M-steps.
pub fn fit_em_traced(sequences: &[PoseSequence], pose_spec: &ManifoldSpec, config: &TrainingConfig) -> Result<EmFit, GmmError> {
    validate_config(config)?;
    let pose = Manifold::new(pose_spec.clone())?;
    let joint = Manifold::new(joint_spec(pose_spec.clone()))?;
    if sequences.is_empty() {
        return Err(GmmError::InvalidInput("at least one sequence required".into()));
    }
    let mut points = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        if seq.len() < 2 {
            return Err(GmmError::InvalidInput(format!("sequence {s} has fewer than 2 frames")));
        }
        let times: Vec<f64> = seq.iter().map(|p| p.time).collect();
        let phases = phase_normalize(&times).map_err(|e| GmmError::InvalidInput(format!("sequence {s}: {e}")))?;
        for (phase, tp) in phases.into_iter().zip(seq) {
            pose.check_point(&tp.pose)?;
            points.push(joint_point(phase, &tp.pose));
        }
    }

    let k = config.components;
    let n = points.len();
    let mut resp = vec![vec![0.0; n]; k];
    for (i, x) in points.iter().enumerate() {
        let bin = ((x[0] * k as f64).floor() as usize).min(k - 1);
        resp[bin][i] = 1.0;
    }
    if let Some(empty) = resp.iter().position(|r| r.iter().all(|w| *w == 0.0)) {
        return Err(GmmError::EmptyBin(empty));
    }

    let mut state = m_step(&joint, &points, &resp, None, config.regularization)?;
    let (mut resp, mut ll) = e_step(&joint, &points, &state)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    let mut rejected_step = None;
    while iterations < config.max_iterations {
        let candidate = m_step(&joint, &points, &resp, Some(&state), config.regularization)?;
        let (next_resp, next_ll) = e_step(&joint, &points, &candidate)?;
        // Manifold means and the λI term make the M-step inexact, so a step
        // can lower the objective near convergence. Such a step is discarded.
        if next_ll < ll {
            rejected_step = Some(next_ll);
            converged = true;
            break;
        }
        let gain = next_ll - ll;
        (state, resp, ll) = (candidate, next_resp, next_ll);
        trace.push(ll);
        iterations += 1;
        if gain < config.ll_tolerance {
            converged = true;
            break;
        }
    }

    let meta = TrainingMeta {
        demo_count: sequences.len(),
        iterations,
        final_log_likelihood: *trace.last().expect("at least one evaluation"),
        converged,
        config: *config,
    };
    let (weights, comps): (Vec<f64>, Vec<TangentGaussian>) = state.into_iter().unzip();
    let model = GmmModel {
        joint,
        pose,
        encoding: None,
        weights,
        components: comps,
        meta,
    };
    Ok(EmFit {
        model,
        log_likelihood_trace: trace,
        rejected_step,
    })
}

fn validate_config(c: &TrainingConfig) -> Result<(), GmmError> {
    if c.components == 0 {
        return Err(GmmError::InvalidInput("components must be at least 1".into()));
    }
    if !(c.ll_tolerance > 0.0) || !(c.regularization > 0.0) {
        return Err(GmmError::InvalidInput("tolerance and regularization must be positive".into()));
    }
    Ok(())
}

type Params = Vec<(f64, TangentGaussian)>;

/// Responsibilities (component-major) and the average log-likelihood.
fn e_step(joint: &Manifold, points: &[Point], state: &Params) -> Result<(Vec<Vec<f64>>, f64), GmmError> {
    let per_point: Vec<(Vec<f64>, f64)> = points
        .par_iter()
        .map(|x| {
            let terms = state
                .iter()
                .map(|(w, g)| Ok(w.ln() + g.log_density(joint, x)?))
                .collect::<Result<Vec<f64>, GmmError>>()?;
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(GmmError::AllZeroDensity);
            }
            Ok((normalize_log_terms(&terms, lse), lse))
        })
        .collect::<Result<_, GmmError>>()?;
    let k = state.len();
    let mut resp = vec![vec![0.0; points.len()]; k];
    let mut total = 0.0;
    for (i, (r, lse)) in per_point.into_iter().enumerate() {
        for (c, v) in r.into_iter().enumerate() {
            resp[c][i] = v;
        }
        total += lse;
    }
    Ok((resp, total / points.len() as f64))
}

fn m_step(joint: &Manifold, points: &[Point], resp: &[Vec<f64>], previous: Option<&Params>, lambda: f64) -> Result<Params, GmmError> {
    let n = points.len() as f64;
    let mut params: Params = resp
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let nk: f64 = r.iter().sum();
            if !(nk > 0.0) {
                // Collapsed component: keep its previous shape with zero weight.
                let prev = previous.map(|p| p[k].1.clone()).ok_or(GmmError::EmptyBin(k))?;
                return Ok((0.0, prev));
            }
            let mean = joint.frechet_mean(points, r)?;
            let cov = regularize(joint.tangent_covariance(points, r, &mean)?, lambda);
            Ok((nk / n, TangentGaussian::new(mean, cov, k)?))
        })
        .collect::<Result<_, GmmError>>()?;
    let total: f64 = params.iter().map(|(w, _)| w).sum();
    params.iter_mut().for_each(|(w, _)| *w /= total);
    Ok(params)
}

/// On-disk model document.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    manifold: ManifoldSpec,
    encoding: Option<PoseEncoding>,
    components: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    training_meta: TrainingMeta,
}

impl GmmModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            manifold: self.joint.spec().clone(),
            encoding: self.encoding,
            components: self.component_count(),
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.covariance.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            training_meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GmmError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| GmmError::InvalidModel(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(GmmError::InvalidModel(format!("unsupported format_version {}", file.format_version)));
        }
        let pose_spec = match file.manifold {
            ManifoldSpec::Product(mut fs) if fs.len() == 2 && fs[0] == ManifoldSpec::Euclidean(1) => fs.pop().expect("two factors"),
            _ => return Err(GmmError::InvalidModel("manifold must be Product(Euclidean(1), pose)".into())),
        };
        if file.components != file.weights.len() {
            return Err(GmmError::InvalidModel("components does not match weights".into()));
        }
        let d = pose_spec.tangent_dim() + 1;
        let mut covs = Vec::with_capacity(file.covariances.len());
        for (i, rows) in file.covariances.iter().enumerate() {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(GmmError::InvalidModel(format!("covariance {i} must be {d}x{d}")));
            }
            covs.push(DMatrix::from_row_iterator(d, d, rows.iter().flatten().copied()));
        }
        let means = file.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let model = GmmModel::new(pose_spec, file.weights, means, covs, file.training_meta)?;
        match file.encoding {
            Some(enc) => model.with_encoding(enc),
            None => Ok(model),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn meta() -> TrainingMeta {
        TrainingMeta {
            demo_count: 0,
            iterations: 0,
            final_log_likelihood: 0.0,
            converged: true,
            config: TrainingConfig::default(),
        }
    }

    #[test]
    fn standard_normal_at_mean() {
        let m = Manifold::euclidean(1);
        let d = gaussian_density(&m, &v(&[0.0]), &v(&[0.0]), &DMatrix::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(d, 0.398_942_280_4, epsilon = 1e-9);
    }

    #[test]
    fn density_at_mean_on_sphere() {
        let m = Manifold::sphere(2);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let p = v(&[0.0, 0.6, 0.8]);
        let d = gaussian_density(&m, &p, &p, &cov).unwrap();
        let expected = (2.0 * std::f64::consts::PI).powi(-1) * cov.determinant().powf(-0.5);
        assert_abs_diff_eq!(d, expected, epsilon = 1e-12);
    }

    #[test]
    fn singular_covariance_rejected() {
        let m = Manifold::euclidean(2);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            gaussian_density(&m, &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), &cov),
            Err(GmmError::SingularCovariance(_))
        ));
    }

    fn two_component_model() -> GmmModel {
        GmmModel::new(
            ManifoldSpec::Euclidean(1),
            vec![0.5, 0.5],
            vec![v(&[0.2, -1.0]), v(&[0.8, 1.0])],
            vec![DMatrix::identity(2, 2) * 0.01, DMatrix::identity(2, 2) * 0.01],
            meta(),
        )
        .unwrap()
    }

    #[test]
    fn responsibilities_single_and_symmetric() {
        let single = GmmModel::new(
            ManifoldSpec::Euclidean(1),
            vec![1.0],
            vec![v(&[0.5, 0.0])],
            vec![DMatrix::identity(2, 2)],
            meta(),
        )
        .unwrap();
        assert_eq!(single.responsibilities(&v(&[3.0, 2.0])).unwrap(), vec![1.0]);

        let model = two_component_model();
        let r = model.responsibilities(&v(&[0.5, 0.0])).unwrap();
        assert_abs_diff_eq!(r[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(r[1], 0.5, epsilon = 1e-9);
    }

    #[test]
    fn far_outlier_has_all_zero_density() {
        let model = two_component_model();
        assert_eq!(model.responsibilities(&v(&[0.5, 1e200])), Err(GmmError::AllZeroDensity));
        assert_eq!(model.log_density(&v(&[0.5, 1e200])).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn empty_bin_is_reported() {
        let seq: PoseSequence = (0..3)
            .map(|i| TimedPose {
                time: i as f64,
                pose: v(&[i as f64]),
            })
            .collect();
        let cfg = TrainingConfig {
            components: 5,
            ..Default::default()
        };
        assert!(matches!(fit_em(&[seq], &ManifoldSpec::Euclidean(1), &cfg), Err(GmmError::EmptyBin(_))));
    }

    #[test]
    fn rejects_bad_sequences() {
        let cfg = TrainingConfig {
            components: 1,
            ..Default::default()
        };
        let short: PoseSequence = vec![TimedPose { time: 0.0, pose: v(&[0.0]) }];
        assert!(matches!(
            fit_em(&[short], &ManifoldSpec::Euclidean(1), &cfg),
            Err(GmmError::InvalidInput(_))
        ));
        let backwards: PoseSequence = vec![TimedPose { time: 1.0, pose: v(&[0.0]) }, TimedPose { time: 0.5, pose: v(&[1.0]) }];
        assert!(matches!(
            fit_em(&[backwards], &ManifoldSpec::Euclidean(1), &cfg),
            Err(GmmError::InvalidInput(_))
        ));
        assert!(fit_em(&[], &ManifoldSpec::Euclidean(1), &cfg).is_err());
    }

    #[test]
    fn single_component_closed_form() {
        let xs = [0.3, -1.2, 2.5, 0.7, 1.1, -0.4];
        let seq: PoseSequence = xs
            .iter()
            .enumerate()
            .map(|(i, x)| TimedPose {
                time: i as f64 * 0.1,
                pose: v(&[*x]),
            })
            .collect();
        let cfg = TrainingConfig {
            components: 1,
            ..Default::default()
        };
        let model = fit_em(&[seq], &ManifoldSpec::Euclidean(1), &cfg).unwrap();
        assert_eq!(model.weights(), &[1.0]);
        let n = xs.len() as f64;
        let ts: Vec<f64> = (0..xs.len()).map(|i| i as f64 / 5.0).collect();
        let (mt, my) = (ts.iter().sum::<f64>() / n, xs.iter().sum::<f64>() / n);
        let mean = model.means().next().unwrap();
        assert_abs_diff_eq!(mean[0], mt, epsilon = 1e-6);
        assert_abs_diff_eq!(mean[1], my, epsilon = 1e-6);
        let cov = model.covariances().next().unwrap();
        let stt = ts.iter().map(|t| (t - mt).powi(2)).sum::<f64>() / n + cfg.regularization;
        let sty = ts.iter().zip(&xs).map(|(t, x)| (t - mt) * (x - my)).sum::<f64>() / n;
        let syy = xs.iter().map(|x| (x - my).powi(2)).sum::<f64>() / n + cfg.regularization;
        assert_abs_diff_eq!(cov[(0, 0)], stt, epsilon = 1e-6);
        assert_abs_diff_eq!(cov[(0, 1)], sty, epsilon = 1e-6);
        assert_abs_diff_eq!(cov[(1, 1)], syy, epsilon = 1e-6);
    }

    #[test]
    fn zero_cross_covariance_gives_constant_regression() {
        let cov = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.0, 0.0, 0.3, 0.05, 0.0, 0.05, 0.2]);
        let model = GmmModel::new(
            ManifoldSpec::Euclidean(2),
            vec![1.0],
            vec![v(&[0.5, 1.0, -2.0])],
            vec![cov.clone()],
            meta(),
        )
        .unwrap();
        let traj = generate_trajectory(&model, 50).unwrap();
        assert_eq!(traj.len(), 50);
        assert_eq!(traj[0].time, 0.0);
        assert_eq!(traj[49].time, 1.0);
        assert_abs_diff_eq!(traj[1].time, 1.0 / 49.0, epsilon = 1e-15);
        for p in &traj {
            assert_abs_diff_eq!(p.pose, v(&[1.0, -2.0]), epsilon = 1e-12);
            assert_abs_diff_eq!(p.covariance, cov.view((1, 1), (2, 2)).into_owned(), epsilon = 1e-12);
        }
        assert!(generate_trajectory(&model, 1).is_err());
    }

    #[test]
    fn singular_time_variance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1e-13, 0.0, 0.0, 1.0]);
        let model = GmmModel::new(ManifoldSpec::Euclidean(1), vec![1.0], vec![v(&[0.5, 0.0])], vec![cov], meta()).unwrap();
        assert_eq!(model.condition(0.3).unwrap_err(), GmmError::SingularTimeVariance(0));
    }

    #[test]
    fn model_json_roundtrip() {
        let model = two_component_model();
        let json = model.to_json();
        assert!(json.contains("\"format_version\": 1"));
        let back = GmmModel::from_json(&json).unwrap();
        assert_eq!(back.weights(), model.weights());
        assert!(back.means().eq(model.means()));
        assert!(back.covariances().eq(model.covariances()));
        assert_eq!(back.to_json(), json);

        let wrong = json.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(GmmModel::from_json(&wrong).is_err());
    }
}
