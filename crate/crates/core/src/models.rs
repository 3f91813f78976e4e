//! Non-normalized statistical models.
//!
//! A [`ModelSpec`] pairs a family with its domain and a reference parameter
//! (the value used to generate synthetic data in experiments). Parameter
//! vectors are plain slices; [`ModelSpec::at`] validates one and caches the
//! derived quantities needed for repeated evaluation.
//!
//! Symmetric-matrix parameters are packed diagonal first (ascending), then
//! off-diagonal entries in lexicographic order. Off-diagonal sufficient
//! statistics carry a factor of two so that `θᵀt(x)` reproduces the full
//! quadratic form.

use std::sync::Arc;

use statrs::function::gamma::gamma;

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::numerics::{dot, inverse_spd, sylvester_solve, Mat};
use crate::vector_fields::{MixedScoreField, VectorFieldSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    /// Density ∝ exp(−θ x^{2β}) on ℝ.
    GeneralizedNormal { beta: u32 },
    /// Density ∝ |x|^{2β} exp(−θ x²) on ℝ.
    GeneralizedGamma { beta: u32 },
    /// N(μ, Σ) parameterized by (μ, vech Σ).
    Normal { p: usize },
    /// Polynomially tilted pairwise interaction on the sphere orthant, with
    /// fixed shape exponents.
    Ppi { p: usize, shape: Vec<f64> },
    /// Matrix Bingham on the Stiefel manifold of `p×k` frames.
    Bingham { p: usize, k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    family: Family,
    domain: Domain,
    reference: Vec<f64>,
}

/// Pairs `(j, k)` with `j ≤ k` in packing order: diagonal ascending, then
/// off-diagonal lexicographic.
pub(crate) fn packed_pairs(n: usize, include_last_diag: bool, off_limit: usize) -> Vec<(usize, usize)> {
    let diag_end = if include_last_diag { n } else { n - 1 };
    let mut pairs: Vec<(usize, usize)> = (0..diag_end).map(|j| (j, j)).collect();
    for j in 0..off_limit {
        for k in (j + 1)..off_limit {
            pairs.push((j, k));
        }
    }
    pairs
}

/// Entry `j` of [`packed_pairs`] without building the list.
pub(crate) fn packed_pair(n: usize, include_last_diag: bool, off_limit: usize, j: usize) -> (usize, usize) {
    let diag_end = if include_last_diag { n } else { n - 1 };
    if j < diag_end {
        return (j, j);
    }
    let mut r = j - diag_end;
    for a in 0..off_limit {
        let count = off_limit - a - 1;
        if r < count {
            return (a, a + 1 + r);
        }
        r -= count;
    }
    panic!("packed pair index {j} out of range");
}

/// Scale of the generalized normal with unit variance:
/// `(Γ(3/(2β)) / Γ(1/(2β)))^β`.
pub fn unit_variance_theta(beta: u32) -> f64 {
    let b = 2.0 * beta as f64;
    (gamma(3.0 / b) / gamma(1.0 / b)).powi(beta as i32)
}

pub fn generalized_normal(beta: u32) -> Result<ModelSpec> {
    if beta < 1 {
        return Err(Error::InvalidShape(format!("beta must be at least 1, got {beta}")));
    }
    Ok(ModelSpec {
        family: Family::GeneralizedNormal { beta },
        domain: Domain::Euclidean { p: 1 },
        reference: vec![unit_variance_theta(beta)],
    })
}

pub fn generalized_gamma(beta: u32) -> Result<ModelSpec> {
    if beta < 1 {
        return Err(Error::InvalidShape(format!("beta must be at least 1, got {beta}")));
    }
    Ok(ModelSpec {
        family: Family::GeneralizedGamma { beta },
        domain: Domain::Euclidean { p: 1 },
        reference: vec![1.0],
    })
}

/// Multivariate normal with reference parameter `(mu, sigma)`.
pub fn multivariate_normal(mu: &[f64], sigma: &Mat) -> Result<ModelSpec> {
    let p = mu.len();
    if p == 0 || sigma.shape() != (p, p) {
        return Err(Error::ShapeMismatch(format!("mean of length {p} with sigma {:?}", sigma.shape())));
    }
    inverse_spd(sigma)?;
    let mut reference = mu.to_vec();
    for (j, k) in packed_pairs(p, true, p) {
        reference.push(sigma[(j, k)]);
    }
    Ok(ModelSpec { family: Family::Normal { p }, domain: Domain::Euclidean { p }, reference })
}

/// PPI model on the positive orthant of the unit sphere in ℝᵖ with shape
/// exponents `shape` (one per coordinate, each above −1).
pub fn ppi_model(shape: &[f64], p: usize) -> Result<ModelSpec> {
    if p < 2 {
        return Err(Error::InvalidShape(format!("PPI needs p >= 2, got {p}")));
    }
    if shape.len() != p {
        return Err(Error::InvalidShape(format!("{} shape exponents for p = {p}", shape.len())));
    }
    if let Some(b) = shape.iter().find(|&&b| !(b > -1.0)) {
        return Err(Error::InvalidShape(format!("shape exponent {b} must exceed -1")));
    }
    let family = Family::Ppi { p, shape: shape.to_vec() };
    let d = family_dim(&family);
    let mut reference = vec![0.0; d];
    reference[..p - 1].iter_mut().for_each(|v| *v = 1.0);
    Ok(ModelSpec { family, domain: Domain::SphereOrthant { p }, reference })
}

/// Matrix Bingham on `V(p, k)` with `A_pp` fixed at zero.
pub fn matrix_bingham(p: usize, k: usize) -> Result<ModelSpec> {
    if k == 0 || k >= p {
        return Err(Error::InvalidShape(format!("Bingham needs 0 < k < p, got p={p}, k={k}")));
    }
    let family = Family::Bingham { p, k };
    let d = family_dim(&family);
    let mut reference = vec![0.0; d];
    reference[..p - 1].iter_mut().for_each(|v| *v = 1.0);
    Ok(ModelSpec { family, domain: Domain::Stiefel { p, k }, reference })
}

fn family_dim(family: &Family) -> usize {
    match family {
        Family::GeneralizedNormal { .. } | Family::GeneralizedGamma { .. } => 1,
        Family::Normal { p } => p + p * (p + 1) / 2,
        Family::Ppi { p, .. } => p * (p - 1) / 2 + (p - 1),
        Family::Bingham { p, .. } => (p - 1) + p * (p - 1) / 2,
    }
}

impl ModelSpec {
    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Number of free parameters.
    pub fn dim(&self) -> usize {
        family_dim(&self.family)
    }

    /// Parameter used to generate data in experiments.
    pub fn reference_theta(&self) -> &[f64] {
        &self.reference
    }

    /// Replaces the reference parameter after validating it.
    pub fn with_reference(mut self, theta: &[f64]) -> Result<Self> {
        self.at(theta)?;
        self.reference = theta.to_vec();
        Ok(self)
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.family {
            Family::GeneralizedNormal { .. } | Family::GeneralizedGamma { .. } => vec!["theta".into()],
            Family::Normal { p } => {
                let mut names: Vec<String> = (1..=*p).map(|j| format!("mu{j}")).collect();
                names.extend(packed_pairs(*p, true, *p).iter().map(|(j, k)| format!("Sigma{}{}", j + 1, k + 1)));
                names
            }
            Family::Ppi { p, .. } => {
                let mut names: Vec<String> =
                    ppi_pairs(*p).iter().map(|(j, k)| format!("A{}{}", j + 1, k + 1)).collect();
                names.extend((1..*p).map(|j| format!("mu{j}")));
                names
            }
            Family::Bingham { p, .. } => packed_pairs(*p, false, *p)
                .iter()
                .map(|(j, k)| format!("A{}{}", j + 1, k + 1))
                .collect(),
        }
    }

    /// Validates `theta` and precomputes derived quantities.
    pub fn at(&self, theta: &[f64]) -> Result<ModelAt<'_>> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("{} parameters, model has {}", theta.len(), self.dim())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let normal = match &self.family {
            Family::GeneralizedNormal { .. } | Family::GeneralizedGamma { .. } => {
                if !(theta[0] > 0.0) {
                    return Err(Error::InvalidShape(format!("scale parameter must be positive, got {}", theta[0])));
                }
                None
            }
            Family::Normal { p } => Some(NormalCache::new(*p, theta)?),
            Family::Ppi { .. } | Family::Bingham { .. } => None,
        };
        Ok(ModelAt { model: self, theta: theta.to_vec(), normal: normal.map(Arc::new) })
    }

    /// log q̃_θ(x).
    pub fn log_unnorm(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        Ok(self.at(theta)?.log_unnorm(x))
    }

    /// Ambient gradient of log q̃_θ in x (not projected).
    pub fn grad_x_log(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.at(theta)?.grad_x_log(x))
    }

    /// ∂_{θ_j} log q_θ(x) including the normalizer, where available.
    pub fn fisher_score(&self, theta: &[f64], j: usize, x: &[f64]) -> Result<Option<f64>> {
        Ok(self.at(theta)?.fisher_score(j, x))
    }

    pub fn has_fisher_score(&self) -> bool {
        matches!(
            self.family,
            Family::GeneralizedNormal { .. } | Family::GeneralizedGamma { .. } | Family::Normal { .. }
        )
    }

    /// The field x ↦ P_x ∇_x ∂_{θ_j} log q̃_θ(x).
    pub fn mixed_score_field(&self, theta: &[f64], j: usize) -> Result<VectorFieldSpec> {
        if j >= self.dim() {
            return Err(Error::ShapeMismatch(format!("parameter index {j} out of {}", self.dim())));
        }
        let at = self.at(theta)?;
        Ok(VectorFieldSpec::new(MixedScoreField::new(at.into_owned(), j)))
    }

    /// All `d` mixed-score fields at `theta`.
    pub fn mixed_score_fields(&self, theta: &[f64]) -> Result<Vec<VectorFieldSpec>> {
        (0..self.dim()).map(|j| self.mixed_score_field(theta, j)).collect()
    }

    /// Weight function w(x); the product of coordinates for PPI, one
    /// elsewhere.
    pub fn weight(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Ppi { .. } => x.iter().product(),
            _ => 1.0,
        }
    }

    pub fn weight_grad(&self, x: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Ppi { .. } => (0..x.len())
                .map(|a| x.iter().enumerate().filter(|&(b, _)| b != a).map(|(_, v)| v).product())
                .collect(),
            _ => vec![0.0; x.len()],
        }
    }

    pub fn has_unit_weight(&self) -> bool {
        !matches!(self.family, Family::Ppi { .. })
    }

    /// Exponential-family view, when log q̃ is linear in θ.
    pub fn exp_family(&self) -> Option<ExpFamSpec<'_>> {
        match self.family {
            Family::Normal { .. } => None,
            _ => Some(ExpFamSpec { model: self }),
        }
    }
}

fn ppi_pairs(p: usize) -> Vec<(usize, usize)> {
    packed_pairs(p - 1, true, p - 1)
}

#[derive(Debug)]
struct NormalCache {
    mu: Vec<f64>,
    sigma_inv: Mat,
    /// For each covariance parameter: (Sylvester solution S, Σ⁻¹ dΣ Σ⁻¹).
    cov: Vec<(Mat, Mat)>,
}

impl NormalCache {
    fn new(p: usize, theta: &[f64]) -> Result<Self> {
        let mu = theta[..p].to_vec();
        let pairs = packed_pairs(p, true, p);
        let mut sigma = Mat::zeros(p, p);
        for ((j, k), v) in pairs.iter().zip(&theta[p..]) {
            sigma[(*j, *k)] = *v;
            sigma[(*k, *j)] = *v;
        }
        let sigma_inv = inverse_spd(&sigma)?.symmetrized();
        let mut cov = Vec::with_capacity(pairs.len());
        for &(j, k) in &pairs {
            let mut dsigma = Mat::zeros(p, p);
            dsigma[(j, k)] = 1.0;
            dsigma[(k, j)] = 1.0;
            let s = sylvester_solve(&sigma, &dsigma)?;
            let m = sigma_inv.matmul(&dsigma).matmul(&sigma_inv).symmetrized();
            cov.push((s, m));
        }
        Ok(Self { mu, sigma_inv, cov })
    }

    fn centered(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mu).map(|(a, b)| a - b).collect()
    }
}

/// A model evaluated at a validated parameter.
#[derive(Clone, Debug)]
pub struct ModelAt<'a> {
    model: &'a ModelSpec,
    theta: Vec<f64>,
    normal: Option<Arc<NormalCache>>,
}

/// Owned counterpart of [`ModelAt`], held by fields that outlive a borrow.
#[derive(Clone, Debug)]
pub struct OwnedModelAt {
    model: Arc<ModelSpec>,
    theta: Vec<f64>,
    normal: Option<Arc<NormalCache>>,
}

impl OwnedModelAt {
    pub fn view(&self) -> ModelAt<'_> {
        ModelAt { model: &self.model, theta: self.theta.clone(), normal: self.normal.clone() }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }
}

impl<'a> ModelAt<'a> {
    pub fn model(&self) -> &'a ModelSpec {
        self.model
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_owned(self) -> OwnedModelAt {
        OwnedModelAt { model: Arc::new(self.model.clone()), theta: self.theta, normal: self.normal }
    }

    pub fn log_unnorm(&self, x: &[f64]) -> f64 {
        let th = &self.theta;
        match &self.model.family {
            Family::Normal { .. } => {
                let nc = self.normal.as_ref().expect("normal cache");
                let c = nc.centered(x);
                -0.5 * dot(&c, &nc.sigma_inv.matvec(&c))
            }
            _ => {
                let ef = ExpFamSpec { model: self.model };
                dot(th, &ef.stat(x)) + ef.base(x)
            }
        }
    }

    pub fn grad_x_log(&self, x: &[f64]) -> Vec<f64> {
        let th = &self.theta;
        match &self.model.family {
            Family::GeneralizedNormal { beta } => {
                let b = *beta as i32;
                vec![-2.0 * b as f64 * th[0] * x[0].powi(2 * b - 1)]
            }
            Family::GeneralizedGamma { beta } => vec![2.0 * *beta as f64 / x[0] - 2.0 * th[0] * x[0]],
            Family::Normal { .. } => {
                let nc = self.normal.as_ref().expect("normal cache");
                nc.sigma_inv.matvec(&nc.centered(x)).into_iter().map(|v| -v).collect()
            }
            _ => {
                let ef = ExpFamSpec { model: self.model };
                let mut g = ef.base_grad(x);
                for (j, t) in th.iter().enumerate() {
                    if *t == 0.0 {
                        continue;
                    }
                    for (gi, si) in g.iter_mut().zip(ef.stat_grad(j, x)) {
                        *gi += t * si;
                    }
                }
                g
            }
        }
    }

    /// Ambient ∇_x ∂_{θ_j} log q̃_θ(x), unprojected.
    pub fn mixed_score(&self, j: usize, x: &[f64]) -> Vec<f64> {
        match &self.model.family {
            Family::Normal { p } => {
                let nc = self.normal.as_ref().expect("normal cache");
                if j < *p {
                    nc.sigma_inv.col(j)
                } else {
                    nc.cov[j - p].1.matvec(&nc.centered(x))
                }
            }
            _ => ExpFamSpec { model: self.model }.stat_grad(j, x),
        }
    }

    pub(crate) fn mixed_score_into(&self, j: usize, x: &[f64], out: &mut [f64]) {
        match &self.model.family {
            Family::Normal { .. } => out.copy_from_slice(&self.mixed_score(j, x)),
            _ => ExpFamSpec { model: self.model }.stat_grad_into(j, x, out),
        }
    }

    /// Ambient Jacobian of [`Self::mixed_score`].
    pub fn mixed_score_jacobian(&self, j: usize, x: &[f64]) -> Mat {
        match &self.model.family {
            Family::Normal { p } => {
                let nc = self.normal.as_ref().expect("normal cache");
                if j < *p {
                    Mat::zeros(*p, *p)
                } else {
                    nc.cov[j - p].1.clone()
                }
            }
            _ => ExpFamSpec { model: self.model }.stat_hessian(j, x),
        }
    }

    pub fn fisher_score(&self, j: usize, x: &[f64]) -> Option<f64> {
        let th = &self.theta;
        match &self.model.family {
            Family::GeneralizedNormal { beta } => {
                let b = *beta as i32;
                Some(1.0 / (2.0 * b as f64 * th[0]) - x[0].powi(2 * b))
            }
            Family::GeneralizedGamma { beta } => Some(-x[0] * x[0] + (2.0 * *beta as f64 + 1.0) / (2.0 * th[0])),
            Family::Normal { p } => {
                let nc = self.normal.as_ref().expect("normal cache");
                let c = nc.centered(x);
                if j < *p {
                    Some(dot(nc.sigma_inv.row(j), &c))
                } else {
                    let (s, m) = &nc.cov[j - p];
                    Some(-s.trace() + 0.5 * dot(&c, &m.matvec(&c)))
                }
            }
            Family::Ppi { .. } | Family::Bingham { .. } => None,
        }
    }
}

/// Exponential-family structure log q̃_θ(x) = Σ_j θ_j t_j(x) + b(x).
#[derive(Clone, Copy, Debug)]
pub struct ExpFamSpec<'a> {
    model: &'a ModelSpec,
}

impl<'a> ExpFamSpec<'a> {
    pub fn model(&self) -> &'a ModelSpec {
        self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Sufficient statistics t(x).
    pub fn stat(&self, x: &[f64]) -> Vec<f64> {
        match &self.model.family {
            Family::GeneralizedNormal { beta } => vec![-x[0].powi(2 * *beta as i32)],
            Family::GeneralizedGamma { .. } => vec![-x[0] * x[0]],
            Family::Ppi { p, .. } => {
                let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
                let mut t: Vec<f64> = ppi_pairs(*p)
                    .iter()
                    .map(|&(j, k)| if j == k { sq[j] * sq[j] } else { 2.0 * sq[j] * sq[k] })
                    .collect();
                t.extend_from_slice(&sq[..p - 1]);
                t
            }
            Family::Bingham { p, k } => packed_pairs(*p, false, *p)
                .iter()
                .map(|&(a, b)| {
                    let g: f64 = (0..*k).map(|c| x[a * k + c] * x[b * k + c]).sum();
                    if a == b { g } else { 2.0 * g }
                })
                .collect(),
            Family::Normal { .. } => unreachable!("normal is not an exponential family here"),
        }
    }

    /// Ambient gradient ∇t_j(x).
    pub fn stat_grad(&self, j: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.stat_grad_into(j, x, &mut g);
        g
    }

    pub(crate) fn stat_grad_into(&self, j: usize, x: &[f64], g: &mut [f64]) {
        match &self.model.family {
            Family::GeneralizedNormal { beta } => {
                let b = *beta as i32;
                g[0] = -2.0 * b as f64 * x[0].powi(2 * b - 1);
            }
            Family::GeneralizedGamma { .. } => g[0] = -2.0 * x[0],
            Family::Ppi { p, .. } => {
                g.fill(0.0);
                let n_pairs = (p - 1) * p / 2;
                if j < n_pairs {
                    let (a, b) = packed_pair(p - 1, true, p - 1, j);
                    if a == b {
                        g[a] = 4.0 * x[a].powi(3);
                    } else {
                        g[a] = 4.0 * x[a] * x[b] * x[b];
                        g[b] = 4.0 * x[a] * x[a] * x[b];
                    }
                } else {
                    let a = j - n_pairs;
                    g[a] = 2.0 * x[a];
                }
            }
            Family::Bingham { p, k } => {
                g.fill(0.0);
                let (a, b) = packed_pair(*p, false, *p, j);
                for c in 0..*k {
                    if a == b {
                        g[a * k + c] = 2.0 * x[a * k + c];
                    } else {
                        g[a * k + c] = 2.0 * x[b * k + c];
                        g[b * k + c] = 2.0 * x[a * k + c];
                    }
                }
            }
            Family::Normal { .. } => unreachable!("normal is not an exponential family here"),
        }
    }

    /// Ambient Hessian of t_j.
    pub fn stat_hessian(&self, j: usize, x: &[f64]) -> Mat {
        match &self.model.family {
            Family::GeneralizedNormal { beta } => {
                let b = *beta as i32;
                let c = -2.0 * b as f64 * (2 * b - 1) as f64;
                Mat::from_vec_unchecked(1, 1, vec![if b == 1 { c } else { c * x[0].powi(2 * b - 2) }])
            }
            Family::GeneralizedGamma { .. } => Mat::from_vec_unchecked(1, 1, vec![-2.0]),
            Family::Ppi { p, .. } => {
                let mut h = Mat::zeros(*p, *p);
                let pairs = ppi_pairs(*p);
                if j < pairs.len() {
                    let (a, b) = pairs[j];
                    if a == b {
                        h[(a, a)] = 12.0 * x[a] * x[a];
                    } else {
                        h[(a, a)] = 4.0 * x[b] * x[b];
                        h[(b, b)] = 4.0 * x[a] * x[a];
                        h[(a, b)] = 8.0 * x[a] * x[b];
                        h[(b, a)] = 8.0 * x[a] * x[b];
                    }
                } else {
                    let a = j - pairs.len();
                    h[(a, a)] = 2.0;
                }
                h
            }
            Family::Bingham { p, k } => {
                let (a, b) = packed_pairs(*p, false, *p)[j];
                let n = p * k;
                let mut h = Mat::zeros(n, n);
                for c in 0..*k {
                    if a == b {
                        h[(a * k + c, a * k + c)] = 2.0;
                    } else {
                        h[(a * k + c, b * k + c)] = 2.0;
                        h[(b * k + c, a * k + c)] = 2.0;
                    }
                }
                h
            }
            Family::Normal { .. } => unreachable!("normal is not an exponential family here"),
        }
    }

    /// Euclidean Laplacian Δt_j; `None` on manifolds, where second-order
    /// terms go through the manifold divergence instead.
    pub fn laplacian(&self, j: usize, x: &[f64]) -> Option<f64> {
        if self.model.domain.is_manifold() {
            None
        } else {
            Some(self.stat_hessian(j, x).trace())
        }
    }

    /// Base measure b(x).
    pub fn base(&self, x: &[f64]) -> f64 {
        match &self.model.family {
            Family::GeneralizedGamma { beta } => 2.0 * *beta as f64 * x[0].abs().ln(),
            Family::Ppi { shape, .. } => shape
                .iter()
                .zip(x)
                .map(|(s, v)| {
                    let e = 1.0 + 2.0 * s;
                    if e == 0.0 { 0.0 } else { e * v.ln() }
                })
                .sum(),
            _ => 0.0,
        }
    }

    pub fn base_grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.model.family {
            Family::GeneralizedGamma { beta } => vec![2.0 * *beta as f64 / x[0]],
            Family::Ppi { shape, .. } => shape
                .iter()
                .zip(x)
                .map(|(s, v)| {
                    let e = 1.0 + 2.0 * s;
                    if e == 0.0 { 0.0 } else { e / v }
                })
                .collect(),
            _ => vec![0.0; x.len()],
        }
    }
}
