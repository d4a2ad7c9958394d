//! Riemannian geometry on Euclidean spaces, unit spheres and their products.
//!
//! Points are stored as embedding coordinates. Tangent vectors are stored in
//! intrinsic coordinates: components with respect to an orthonormal basis of
//! the tangent space at the base point, so a tangent vector always has
//! `tangent_dim()` entries. Covariances built from logarithms therefore live
//! in the same intrinsic frame and are full rank in general.
//!
//! The basis at a sphere point is a deterministic function of the point
//! (a rotated frame for the circle, a Householder frame otherwise). Geometric
//! results (exp, log, distance, means) do not depend on that choice; matrices
//! expressed in a tangent space are only meaningful together with their base
//! point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Embedding coordinates of a manifold point.
pub type Point = DVector<f64>;
/// Intrinsic tangent coordinates at some base point.
pub type Tangent = DVector<f64>;

/// Maximum deviation from unit norm accepted for sphere factors.
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-9;
/// Below this angle exp/log/transport on a sphere factor take the identity branch.
const SMALL_ANGLE: f64 = 1e-12;
/// `<p, q>` at or below `-1 + ANTIPODAL_MARGIN` is treated as antipodal.
const ANTIPODAL_MARGIN: f64 = 1e-9;

pub const MEAN_TOLERANCE: f64 = 1e-9;
pub const MEAN_MAX_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("invalid manifold specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    SpecMismatch { expected: usize, found: usize },
    #[error("antipodal points on sphere factor {0}: logarithm undefined")]
    AntipodalPoint(usize),
    #[error("point is not on the manifold (sphere factor {0} is not unit norm)")]
    NotOnManifold(usize),
    #[error("mean iteration did not converge after {iterations} iterations (update norm {update_norm:e})")]
    NoConvergence { iterations: usize, update_norm: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
}

/// Structure of a manifold: a Euclidean space, a unit sphere `S^d` embedded in
/// `R^{d+1}`, or an ordered product of those.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldSpec {
    Euclidean(usize),
    Sphere(usize),
    Product(Vec<ManifoldSpec>),
}

impl ManifoldSpec {
    /// `count` copies of `S^d`.
    pub fn sphere_product(d: usize, count: usize) -> Self {
        ManifoldSpec::Product(vec![ManifoldSpec::Sphere(d); count])
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean(n) => *n,
            ManifoldSpec::Sphere(d) => *d,
            ManifoldSpec::Product(fs) => fs.iter().map(Self::tangent_dim).sum(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            ManifoldSpec::Euclidean(n) => *n,
            ManifoldSpec::Sphere(d) => d + 1,
            ManifoldSpec::Product(fs) => fs.iter().map(Self::embedding_dim).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Euclidean,
    Sphere,
}

/// A non-product factor with its offsets in the flattened coordinate arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Leaf {
    kind: LeafKind,
    ambient_offset: usize,
    ambient_len: usize,
    tangent_offset: usize,
    tangent_len: usize,
}

impl Leaf {
    fn ambient<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.ambient_offset..self.ambient_offset + self.ambient_len]
    }

    fn ambient_mut<'a>(&self, x: &'a mut [f64]) -> &'a mut [f64] {
        &mut x[self.ambient_offset..self.ambient_offset + self.ambient_len]
    }

    fn tangent<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.tangent_offset..self.tangent_offset + self.tangent_len]
    }

    fn tangent_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.tangent_offset..self.tangent_offset + self.tangent_len]
    }
}

/// A manifold built from a [`ManifoldSpec`], with nested products flattened
/// into a list of Euclidean and sphere factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    spec: ManifoldSpec,
    leaves: Vec<Leaf>,
    ambient_dim: usize,
    tangent_dim: usize,
}

impl Serialize for Manifold {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.spec.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Manifold {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let spec = ManifoldSpec::deserialize(deserializer)?;
        Manifold::new(spec).map_err(serde::de::Error::custom)
    }
}

impl Manifold {
    pub fn new(spec: ManifoldSpec) -> Result<Self, ManifoldError> {
        let mut leaves = Vec::new();
        let (mut ambient, mut tangent) = (0, 0);
        flatten(&spec, &mut leaves, &mut ambient, &mut tangent)?;
        Ok(Self {
            spec,
            leaves,
            ambient_dim: ambient,
            tangent_dim: tangent,
        })
    }

    pub fn euclidean(n: usize) -> Self {
        Self::new(ManifoldSpec::Euclidean(n)).expect("Euclidean(n) with n >= 1")
    }

    pub fn sphere(d: usize) -> Self {
        Self::new(ManifoldSpec::Sphere(d)).expect("Sphere(d) with d >= 1")
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn tangent_dim(&self) -> usize {
        self.tangent_dim
    }

    /// Number of non-product factors after flattening.
    pub fn factor_count(&self) -> usize {
        self.leaves.len()
    }

    fn check_ambient(&self, x: &Point) -> Result<(), ManifoldError> {
        if x.len() != self.ambient_dim {
            return Err(ManifoldError::SpecMismatch {
                expected: self.ambient_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn check_tangent(&self, v: &Tangent) -> Result<(), ManifoldError> {
        if v.len() != self.tangent_dim {
            return Err(ManifoldError::SpecMismatch {
                expected: self.tangent_dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Membership test: right length and every sphere factor of unit norm
    /// within [`MEMBERSHIP_TOLERANCE`].
    pub fn check_point(&self, x: &Point) -> Result<(), ManifoldError> {
        self.check_ambient(x)?;
        for (i, leaf) in self.leaves.iter().enumerate() {
            let a = leaf.ambient(x.as_slice());
            if a.iter().any(|c| !c.is_finite()) {
                return Err(ManifoldError::NotOnManifold(i));
            }
            if leaf.kind == LeafKind::Sphere && (norm(a) - 1.0).abs() > MEMBERSHIP_TOLERANCE {
                return Err(ManifoldError::NotOnManifold(i));
            }
        }
        Ok(())
    }

    /// Projects embedding coordinates onto the manifold by normalizing each
    /// sphere factor. Zero-norm sphere factors are rejected.
    pub fn project_point(&self, x: &Point) -> Result<Point, ManifoldError> {
        self.check_ambient(x)?;
        let mut out = x.clone();
        for (i, leaf) in self.leaves.iter().enumerate() {
            if leaf.kind == LeafKind::Sphere {
                let a = leaf.ambient_mut(out.as_mut_slice());
                let n = norm(a);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(ManifoldError::NotOnManifold(i));
                }
                a.iter_mut().for_each(|c| *c /= n);
            }
        }
        Ok(out)
    }

    /// Converts intrinsic tangent coordinates at `base` to an embedded
    /// (ambient) vector, orthogonal to `base` on sphere factors.
    pub fn tangent_to_ambient(&self, base: &Point, v: &Tangent) -> Result<DVector<f64>, ManifoldError> {
        self.check_ambient(base)?;
        self.check_tangent(v)?;
        let mut out = DVector::zeros(self.ambient_dim);
        for leaf in &self.leaves {
            let p = leaf.ambient(base.as_slice());
            let c = leaf.tangent(v.as_slice());
            let o = leaf.ambient_mut(out.as_mut_slice());
            match leaf.kind {
                LeafKind::Euclidean => o.copy_from_slice(c),
                LeafKind::Sphere => basis_apply(p, c, o),
            }
        }
        Ok(out)
    }

    /// Orthogonally projects an ambient vector onto the tangent space at
    /// `base`, returning intrinsic coordinates.
    pub fn ambient_to_tangent(&self, base: &Point, w: &DVector<f64>) -> Result<Tangent, ManifoldError> {
        self.check_ambient(base)?;
        self.check_ambient(w)?;
        let mut out = DVector::zeros(self.tangent_dim);
        for leaf in &self.leaves {
            let p = leaf.ambient(base.as_slice());
            let a = leaf.ambient(w.as_slice());
            let o = leaf.tangent_mut(out.as_mut_slice());
            match leaf.kind {
                LeafKind::Euclidean => o.copy_from_slice(a),
                LeafKind::Sphere => basis_project(p, a, o),
            }
        }
        Ok(out)
    }

    pub fn exp(&self, base: &Point, v: &Tangent) -> Result<Point, ManifoldError> {
        self.check_ambient(base)?;
        self.check_tangent(v)?;
        let mut out = base.clone();
        for leaf in &self.leaves {
            let p = leaf.ambient(base.as_slice());
            let c = leaf.tangent(v.as_slice());
            let o = leaf.ambient_mut(out.as_mut_slice());
            match leaf.kind {
                LeafKind::Euclidean => o.iter_mut().zip(c).for_each(|(x, d)| *x += d),
                LeafKind::Sphere => sphere_exp(p, c, o),
            }
        }
        Ok(out)
    }

    pub fn log(&self, base: &Point, target: &Point) -> Result<Tangent, ManifoldError> {
        self.check_ambient(base)?;
        self.check_ambient(target)?;
        let mut out = DVector::zeros(self.tangent_dim);
        for (i, leaf) in self.leaves.iter().enumerate() {
            let p = leaf.ambient(base.as_slice());
            let q = leaf.ambient(target.as_slice());
            let o = leaf.tangent_mut(out.as_mut_slice());
            match leaf.kind {
                LeafKind::Euclidean => o.iter_mut().zip(p.iter().zip(q)).for_each(|(x, (a, b))| *x = b - a),
                LeafKind::Sphere => {
                    let g = sphere_geodesic(p, q).ok_or(ManifoldError::AntipodalPoint(i))?;
                    match g.direction {
                        Some(dir) => {
                            let scaled: Vec<f64> = dir.iter().map(|d| d * g.angle).collect();
                            basis_project(p, &scaled, o);
                        }
                        None => o.fill(0.0),
                    }
                }
            }
        }
        Ok(out)
    }

    /// Geodesic distance.
    pub fn distance(&self, a: &Point, b: &Point) -> Result<f64, ManifoldError> {
        self.check_ambient(a)?;
        self.check_ambient(b)?;
        let mut sq = 0.0;
        for (i, leaf) in self.leaves.iter().enumerate() {
            let p = leaf.ambient(a.as_slice());
            let q = leaf.ambient(b.as_slice());
            match leaf.kind {
                LeafKind::Euclidean => sq += p.iter().zip(q).map(|(x, y)| (y - x) * (y - x)).sum::<f64>(),
                LeafKind::Sphere => {
                    let g = sphere_geodesic(p, q).ok_or(ManifoldError::AntipodalPoint(i))?;
                    sq += g.angle * g.angle;
                }
            }
        }
        Ok(sq.sqrt())
    }

    /// Parallel transport of `v` (tangent at `from`) along the connecting
    /// geodesic to the tangent space at `to`.
    pub fn transport(&self, v: &Tangent, from: &Point, to: &Point) -> Result<Tangent, ManifoldError> {
        self.check_tangent(v)?;
        self.check_ambient(from)?;
        self.check_ambient(to)?;
        let mut out = DVector::zeros(self.tangent_dim);
        let mut scratch = Vec::new();
        for (i, leaf) in self.leaves.iter().enumerate() {
            let c = leaf.tangent(v.as_slice());
            let o = leaf.tangent_mut(out.as_mut_slice());
            match leaf.kind {
                LeafKind::Euclidean => o.copy_from_slice(c),
                LeafKind::Sphere => {
                    let p = leaf.ambient(from.as_slice());
                    let q = leaf.ambient(to.as_slice());
                    let g = sphere_geodesic(p, q).ok_or(ManifoldError::AntipodalPoint(i))?;
                    scratch.clear();
                    scratch.resize(p.len(), 0.0);
                    basis_apply(p, c, &mut scratch);
                    if let Some(e) = g.direction {
                        let ev: f64 = e.iter().zip(&scratch).map(|(a, b)| a * b).sum();
                        let (s, co) = g.angle.sin_cos();
                        for j in 0..scratch.len() {
                            scratch[j] += (co - 1.0) * ev * e[j] - s * ev * p[j];
                        }
                    }
                    basis_project(q, &scratch, o);
                }
            }
        }
        Ok(out)
    }

    /// Matrix of parallel transport from `from` to `to` in intrinsic
    /// coordinates; a tangent-space matrix `S` transports to `A S Aᵀ`.
    pub fn transport_matrix(&self, from: &Point, to: &Point) -> Result<DMatrix<f64>, ManifoldError> {
        let n = self.tangent_dim;
        let mut a = DMatrix::zeros(n, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            let col = self.transport(&e, from, to)?;
            a.set_column(j, &col);
            e[j] = 0.0;
        }
        Ok(a)
    }

    /// Weighted Fréchet mean (Riemannian centre of mass).
    ///
    /// Fixed-point iteration `μ ← exp_μ(Σ wᵢ log_μ(pᵢ))` started at the
    /// highest-weight point (lowest index on ties), stopped once the update
    /// norm is at most [`MEAN_TOLERANCE`]. Weights are normalized; points with
    /// zero weight are ignored.
    pub fn frechet_mean(&self, points: &[Point], weights: &[f64]) -> Result<Point, ManifoldError> {
        let w = normalized_weights(points.len(), weights)?;
        for p in points {
            self.check_ambient(p)?;
        }
        let start = argmax_first(&w);
        let mut mean = points[start].clone();
        let mut update_norm = f64::INFINITY;
        for _ in 0..MEAN_MAX_ITERATIONS {
            let step = self.weighted_log_sum(&mean, points, &w)?;
            update_norm = step.norm();
            mean = self.exp(&mean, &step)?;
            if update_norm <= MEAN_TOLERANCE {
                return Ok(mean);
            }
        }
        Err(ManifoldError::NoConvergence {
            iterations: MEAN_MAX_ITERATIONS,
            update_norm,
        })
    }

    /// `Σ wᵢ log_base(pᵢ)`, summed in index order. Zero weights are skipped.
    pub fn weighted_log_sum(&self, base: &Point, points: &[Point], weights: &[f64]) -> Result<Tangent, ManifoldError> {
        let mut acc = DVector::zeros(self.tangent_dim);
        for (p, &wi) in points.iter().zip(weights) {
            if wi == 0.0 {
                continue;
            }
            acc.axpy(wi, &self.log(base, p)?, 1.0);
        }
        Ok(acc)
    }

    /// Weighted second moment of the logarithms at `mean`, normalized by the
    /// total weight. Exactly symmetric.
    pub fn tangent_covariance(&self, points: &[Point], weights: &[f64], mean: &Point) -> Result<DMatrix<f64>, ManifoldError> {
        let w = normalized_weights(points.len(), weights)?;
        self.check_ambient(mean)?;
        let n = self.tangent_dim;
        let mut cov = DMatrix::zeros(n, n);
        for (p, &wi) in points.iter().zip(&w) {
            if wi == 0.0 {
                continue;
            }
            let l = self.log(mean, p)?;
            for c in 0..n {
                let lc = wi * l[c];
                for r in 0..=c {
                    cov[(r, c)] += lc * l[r];
                }
            }
        }
        for c in 0..n {
            for r in 0..c {
                cov[(c, r)] = cov[(r, c)];
            }
        }
        Ok(cov)
    }
}

fn flatten(spec: &ManifoldSpec, leaves: &mut Vec<Leaf>, ambient: &mut usize, tangent: &mut usize) -> Result<(), ManifoldError> {
    let (kind, alen, tlen) = match spec {
        ManifoldSpec::Euclidean(0) => return Err(ManifoldError::InvalidSpec("Euclidean(0)".into())),
        ManifoldSpec::Sphere(0) => return Err(ManifoldError::InvalidSpec("Sphere(0)".into())),
        ManifoldSpec::Euclidean(n) => (LeafKind::Euclidean, *n, *n),
        ManifoldSpec::Sphere(d) => (LeafKind::Sphere, d + 1, *d),
        ManifoldSpec::Product(fs) => {
            if fs.is_empty() {
                return Err(ManifoldError::InvalidSpec("empty product".into()));
            }
            for f in fs {
                flatten(f, leaves, ambient, tangent)?;
            }
            return Ok(());
        }
    };
    leaves.push(Leaf {
        kind,
        ambient_offset: *ambient,
        ambient_len: alen,
        tangent_offset: *tangent,
        tangent_len: tlen,
    });
    *ambient += alen;
    *tangent += tlen;
    Ok(())
}

fn normalized_weights(count: usize, weights: &[f64]) -> Result<Vec<f64>, ManifoldError> {
    if count == 0 {
        return Err(ManifoldError::InvalidWeights("no points"));
    }
    if weights.len() != count {
        return Err(ManifoldError::InvalidWeights("one weight per point required"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ManifoldError::InvalidWeights("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(ManifoldError::InvalidWeights("weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn argmax_first(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = i;
        }
    }
    best
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct SphereGeodesic {
    angle: f64,
    /// Unit initial direction in the ambient space; `None` below the small-angle guard.
    direction: Option<Vec<f64>>,
}

/// Angle and unit direction of the minimizing geodesic from `p` to `q`.
/// `None` when the points are (numerically) antipodal.
fn sphere_geodesic(p: &[f64], q: &[f64]) -> Option<SphereGeodesic> {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    if dot <= -1.0 + ANTIPODAL_MARGIN {
        return None;
    }
    let u: Vec<f64> = p.iter().zip(q).map(|(a, b)| b - dot * a).collect();
    let nu = norm(&u);
    // atan2 stays accurate for small angles where acos(dot) does not.
    let angle = nu.atan2(dot);
    if angle < SMALL_ANGLE || nu == 0.0 {
        return Some(SphereGeodesic { angle: 0.0, direction: None });
    }
    Some(SphereGeodesic {
        angle,
        direction: Some(u.into_iter().map(|x| x / nu).collect()),
    })
}

fn sphere_exp(p: &[f64], c: &[f64], out: &mut [f64]) {
    let theta = norm(c);
    if theta < SMALL_ANGLE {
        out.copy_from_slice(p);
        return;
    }
    basis_apply(p, c, out);
    let (s, co) = theta.sin_cos();
    for (o, pi) in out.iter_mut().zip(p) {
        *o = co * pi + s * *o / theta;
    }
    let n = norm(out);
    out.iter_mut().for_each(|x| *x /= n);
}

/// Householder data for the tangent frame at `p`: pivot index, sign, and
/// `2 / wᵀw` where `w = p + sign·e_pivot`.
fn householder(p: &[f64]) -> (usize, f64, f64) {
    let mut k = 0;
    for (i, x) in p.iter().enumerate() {
        if x.abs() > p[k].abs() {
            k = i;
        }
    }
    let sign = if p[k] >= 0.0 { 1.0 } else { -1.0 };
    let wk = p[k] + sign;
    let wtw: f64 = p.iter().enumerate().map(|(i, x)| if i == k { wk * wk } else { x * x }).sum();
    (k, sign, 2.0 / wtw)
}

/// `out = B c`, where the columns of `B` form the tangent frame at `p`.
fn basis_apply(p: &[f64], c: &[f64], out: &mut [f64]) {
    if p.len() == 2 {
        out[0] = -p[1] * c[0];
        out[1] = p[0] * c[0];
        return;
    }
    let (k, sign, beta) = householder(p);
    let w = |i: usize| if i == k { p[i] + sign } else { p[i] };
    let mut wc = 0.0;
    let mut ci = 0;
    for (i, o) in out.iter_mut().enumerate() {
        if i == k {
            *o = 0.0;
        } else {
            *o = c[ci];
            wc += c[ci] * w(i);
            ci += 1;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o -= beta * wc * w(i);
    }
}

/// `out = Bᵀ a`.
fn basis_project(p: &[f64], a: &[f64], out: &mut [f64]) {
    if p.len() == 2 {
        out[0] = -p[1] * a[0] + p[0] * a[1];
        return;
    }
    let (k, sign, beta) = householder(p);
    let w = |i: usize| if i == k { p[i] + sign } else { p[i] };
    let wa: f64 = a.iter().enumerate().map(|(i, x)| w(i) * x).sum();
    let mut oi = 0;
    for (i, x) in a.iter().enumerate() {
        if i != k {
            out[oi] = x - beta * w(i) * wa;
            oi += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn euclidean_exp_is_addition() {
        let m = Manifold::euclidean(2);
        let q = m.exp(&v(&[1.0, 2.0]), &v(&[0.5, -1.0])).unwrap();
        assert_eq!(q, v(&[1.5, 1.0]));
    }

    #[test]
    fn sphere_quarter_circle() {
        let m = Manifold::sphere(2);
        let north = v(&[0.0, 0.0, 1.0]);
        let t = m.ambient_to_tangent(&north, &v(&[FRAC_PI_2, 0.0, 0.0])).unwrap();
        let q = m.exp(&north, &t).unwrap();
        assert_abs_diff_eq!(q, v(&[1.0, 0.0, 0.0]), epsilon = 1e-12);

        let l = m.log(&north, &v(&[1.0, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(l.norm(), FRAC_PI_2, epsilon = 1e-12);
        let amb = m.tangent_to_ambient(&north, &l).unwrap();
        assert_abs_diff_eq!(amb, v(&[FRAC_PI_2, 0.0, 0.0]), epsilon = 1e-12);
        assert_abs_diff_eq!(m.distance(&north, &v(&[1.0, 0.0, 0.0])).unwrap(), FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn zero_vector_and_self_log() {
        let m = Manifold::new(ManifoldSpec::Product(vec![
            ManifoldSpec::Euclidean(1),
            ManifoldSpec::sphere_product(1, 3),
        ]))
        .unwrap();
        let p = m.project_point(&v(&[0.3, 1.0, 1.0, 0.0, -1.0, 0.2, 0.5])).unwrap();
        assert_eq!(m.exp(&p, &DVector::zeros(m.tangent_dim())).unwrap(), p);
        assert_eq!(m.log(&p, &p).unwrap(), DVector::zeros(4));
        assert_eq!(m.distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn antipodal_log_is_an_error() {
        let m = Manifold::new(ManifoldSpec::Product(vec![ManifoldSpec::Euclidean(2), ManifoldSpec::Sphere(2)])).unwrap();
        let a = v(&[0.0, 0.0, 0.0, 0.0, 1.0]);
        let b = v(&[1.0, 1.0, 0.0, 0.0, -1.0]);
        assert_eq!(m.log(&a, &b), Err(ManifoldError::AntipodalPoint(1)));
        assert_eq!(m.distance(&a, &b), Err(ManifoldError::AntipodalPoint(1)));
    }

    #[test]
    fn transport_on_sphere_follows_great_circle() {
        let m = Manifold::sphere(2);
        let from = v(&[0.0, 0.0, 1.0]);
        let to = v(&[1.0, 0.0, 0.0]);
        let along = m.ambient_to_tangent(&from, &v(&[1.0, 0.0, 0.0])).unwrap();
        let moved = m.transport(&along, &from, &to).unwrap();
        assert_abs_diff_eq!(m.tangent_to_ambient(&to, &moved).unwrap(), v(&[0.0, 0.0, -1.0]), epsilon = 1e-12);

        let across = m.ambient_to_tangent(&from, &v(&[0.0, 1.0, 0.0])).unwrap();
        let moved = m.transport(&across, &from, &to).unwrap();
        assert_abs_diff_eq!(m.tangent_to_ambient(&to, &moved).unwrap(), v(&[0.0, 1.0, 0.0]), epsilon = 1e-12);
    }

    #[test]
    fn euclidean_transport_is_identity() {
        let m = Manifold::euclidean(3);
        let t = v(&[1.0, -2.0, 3.0]);
        assert_eq!(m.transport(&t, &v(&[0.0, 0.0, 0.0]), &v(&[5.0, 1.0, 2.0])).unwrap(), t);
    }

    #[test]
    fn mean_of_identical_points() {
        let m = Manifold::sphere(2);
        let p = m.project_point(&v(&[1.0, 2.0, 3.0])).unwrap();
        let mean = m.frechet_mean(&[p.clone(), p.clone(), p.clone()], &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(mean, p, epsilon = 1e-15);
    }

    #[test]
    fn sphere_two_point_mean_is_midpoint() {
        let m = Manifold::sphere(2);
        let mean = m.frechet_mean(&[v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(mean, v(&[FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0]), epsilon = 1e-9);
    }

    #[test]
    fn euclidean_mean_and_covariance_match_sample_statistics() {
        let m = Manifold::euclidean(2);
        let pts = [v(&[0.0, 1.0]), v(&[2.0, 3.0]), v(&[4.0, -1.0])];
        let w = [1.0, 2.0, 1.0];
        let mean = m.frechet_mean(&pts, &w).unwrap();
        assert_abs_diff_eq!(mean, v(&[2.0, 1.5]), epsilon = 1e-12);
        let cov = m.tangent_covariance(&pts, &w, &mean).unwrap();
        // Σ wᵢ (xᵢ-μ)(xᵢ-μ)ᵀ / Σ wᵢ, by hand.
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.75]);
        assert_abs_diff_eq!(cov, expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_of_single_point_is_zero() {
        let m = Manifold::sphere(2);
        let p = v(&[0.0, 1.0, 0.0]);
        let cov = m.tangent_covariance(std::slice::from_ref(&p), &[1.0], &p).unwrap();
        assert_eq!(cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn invalid_inputs() {
        let m = Manifold::euclidean(2);
        assert!(matches!(m.exp(&v(&[1.0]), &v(&[1.0, 2.0])), Err(ManifoldError::SpecMismatch { .. })));
        assert!(m.frechet_mean(&[], &[]).is_err());
        assert!(m.frechet_mean(&[v(&[1.0, 1.0])], &[0.0]).is_err());
        assert!(Manifold::new(ManifoldSpec::Product(vec![])).is_err());
        assert!(Manifold::new(ManifoldSpec::Sphere(0)).is_err());
        assert!(Manifold::sphere(1).check_point(&v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn spec_dimensions() {
        let spec = ManifoldSpec::Product(vec![ManifoldSpec::Euclidean(1), ManifoldSpec::sphere_product(1, 13)]);
        assert_eq!(spec.tangent_dim(), 14);
        assert_eq!(spec.embedding_dim(), 27);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.starts_with(r#"{"product":[{"euclidean":1},{"product":[{"sphere":1}"#));
        assert_eq!(serde_json::from_str::<ManifoldSpec>(&json).unwrap(), spec);
    }
}
