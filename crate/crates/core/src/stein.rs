//! Weighted Stein operator `A^w_θ f = div_M(w f) + w ⟨f, P_x ∇_x log q̃_θ⟩`.
//!
//! Only the x-gradient of the unnormalized log-density enters, so nothing
//! here depends on the normalizing constant.
//!
//! Euclidean divergences are Jacobian traces. On manifolds the divergence
//! is a central difference along retraction curves in an orthonormal
//! tangent basis, with step [`FD_STEP`].

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::models::{ModelAt, ModelSpec};
use crate::numerics::{dot, Mat};
use crate::vector_fields::{leaf_decomposition, VectorFieldSpec};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteinEval {
    pub value: f64,
    /// div_M(w f)
    pub divergence_term: f64,
    /// w ⟨f, P_x ∇_x log q̃⟩
    pub score_term: f64,
}

/// Stein operator applied to one field at one point.
pub fn apply_stein(model: &ModelSpec, theta: &[f64], field: &VectorFieldSpec, x: &[f64]) -> Result<SteinEval> {
    let at = model.at(theta)?;
    let batch = FieldBatch::new(model, std::slice::from_ref(field))?;
    let point = batch.evaluate(x)?;
    Ok(point.stein(&at, x).remove(0))
}

/// Divergence of a tangent field on `domain` at `x`.
pub fn manifold_divergence(domain: Domain, field: &VectorFieldSpec, x: &[f64]) -> Result<f64> {
    if field.domain() != domain {
        return Err(Error::DomainMismatch);
    }
    domain.check(x)?;
    Ok(divergences(domain, std::slice::from_ref(field), x)?[0])
}

/// Divergences of several fields at one point, sharing the tangent basis
/// and retracted points.
fn divergences(domain: Domain, fields: &[VectorFieldSpec], x: &[f64]) -> Result<Vec<f64>> {
    if !domain.is_manifold() {
        return fields.iter().map(|f| f.jacobian_trace(x).ok_or(Error::MissingJacobian)).collect();
    }
    let basis = domain.tangent_basis_unchecked(x)?;
    let n = domain.ambient_dim();
    let mut out = vec![0.0; fields.len()];
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for e in &basis {
        let xp = domain.retract_unchecked(x, e, FD_STEP)?;
        let xm = domain.retract_unchecked(x, e, -FD_STEP)?;
        for (f, acc) in fields.iter().zip(out.iter_mut()) {
            f.eval_into(&xp, &mut fp);
            f.eval_into(&xm, &mut fm);
            let diff: f64 = fp.iter().zip(&fm).zip(e).map(|((a, b), c)| (a - b) * c).sum();
            *acc += diff / (2.0 * FD_STEP);
        }
    }
    Ok(out)
}

/// A set of fields evaluated together. Combinations are expanded into their
/// leaves once, so shared leaves are evaluated once per point.
#[derive(Debug)]
pub struct FieldBatch<'m> {
    model: &'m ModelSpec,
    leaves: Vec<VectorFieldSpec>,
    coeffs: Mat,
}

/// Values and weighted divergences of a batch at one point.
#[derive(Clone, Debug)]
pub struct BatchPoint {
    pub weight: f64,
    /// One ambient vector per field.
    pub values: Vec<Vec<f64>>,
    /// div_M(w f) per field.
    pub weighted_divergence: Vec<f64>,
}

impl<'m> FieldBatch<'m> {
    pub fn new(model: &'m ModelSpec, fields: &[VectorFieldSpec]) -> Result<Self> {
        if fields.iter().any(|f| f.domain() != model.domain()) {
            return Err(Error::DomainMismatch);
        }
        let (leaves, coeffs) = leaf_decomposition(fields);
        Ok(Self { model, leaves, coeffs })
    }

    pub fn len(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<BatchPoint> {
        let domain = self.model.domain();
        domain.check(x)?;
        let n = domain.ambient_dim();
        let weight = self.model.weight(x);
        let wgrad = self.model.weight_grad(x);
        let nl = self.leaves.len();
        let mut leaf_vals = vec![0.0; nl * n];
        let leaf_div: Vec<f64> = if domain.is_manifold() {
            for (l, leaf) in self.leaves.iter().enumerate() {
                leaf.eval_into(x, &mut leaf_vals[l * n..(l + 1) * n]);
            }
            divergences(domain, &self.leaves, x)?
        } else {
            self.leaves
                .iter()
                .enumerate()
                .map(|(l, leaf)| leaf.eval_with_trace(x, &mut leaf_vals[l * n..(l + 1) * n]).ok_or(Error::MissingJacobian))
                .collect::<Result<_>>()?
        };
        let nf = self.len();
        let mut values = vec![vec![0.0; n]; nf];
        let mut weighted_divergence = vec![0.0; nf];
        for (r, (val, wdiv)) in values.iter_mut().zip(weighted_divergence.iter_mut()).enumerate() {
            let mut div = 0.0;
            for l in 0..nl {
                let c = self.coeffs[(r, l)];
                if c == 0.0 {
                    continue;
                }
                for (v, a) in val.iter_mut().zip(&leaf_vals[l * n..(l + 1) * n]) {
                    *v += c * a;
                }
                div += c * leaf_div[l];
            }
            *wdiv = weight * div + dot(&wgrad, val);
        }
        Ok(BatchPoint { weight, values, weighted_divergence })
    }
}

impl BatchPoint {
    /// Stein values of every field at the model parameter `at`.
    pub fn stein(&self, at: &ModelAt<'_>, x: &[f64]) -> Vec<SteinEval> {
        let domain = at.model().domain();
        let mut score = at.grad_x_log(x);
        domain.project_in_place(x, &mut score);
        self.values
            .iter()
            .zip(&self.weighted_divergence)
            .map(|(v, wdiv)| {
                let score_term = self.weight * dot(v, &score);
                SteinEval { value: wdiv + score_term, divergence_term: *wdiv, score_term }
            })
            .collect()
    }
}

/// Stein values of `fields` at every point: an `n × fields` matrix.
pub fn stein_matrix(model: &ModelSpec, theta: &[f64], fields: &[VectorFieldSpec], points: &[Vec<f64>]) -> Result<Mat> {
    let at = model.at(theta)?;
    let batch = FieldBatch::new(model, fields)?;
    let mut out = Mat::zeros(points.len(), fields.len());
    for (i, x) in points.iter().enumerate() {
        let point = batch.evaluate(x)?;
        for (j, s) in point.stein(&at, x).into_iter().enumerate() {
            out[(i, j)] = s.value;
        }
    }
    Ok(out)
}
