//! Test functions: vector fields on a domain with value and ambient
//! Jacobian access.
//!
//! On manifold domains every field returns tangent vectors. Linear
//! combinations are flattened into weighted sums of leaf fields so that a
//! batch of combinations sharing the same leaves evaluates each leaf once.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::models::OwnedModelAt;
use crate::numerics::{dot, Mat, RngStream};

/// Provenance of a field.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldTag {
    MixedScore { j: usize },
    Mlp { seed: u64, stream: u64 },
    Analytic(String),
    Combination { leaves: usize },
}

pub trait VectorField: Send + Sync + fmt::Debug {
    fn domain(&self) -> Domain;

    /// Writes the field value at `x` into `out` (length = ambient dim).
    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Ambient Jacobian at `x`, rows indexing outputs.
    fn jacobian(&self, x: &[f64]) -> Option<Mat>;

    /// Trace of [`Self::jacobian`].
    fn jacobian_trace(&self, x: &[f64]) -> Option<f64> {
        self.jacobian(x).map(|j| j.trace())
    }

    /// Value into `out` together with the Jacobian trace.
    fn eval_with_trace(&self, x: &[f64], out: &mut [f64]) -> Option<f64> {
        self.eval_into(x, out);
        self.jacobian_trace(x)
    }

    fn tag(&self) -> FieldTag;

    /// Leaves and coefficients when the field is a linear combination.
    fn as_combination(&self) -> Option<(&[VectorFieldSpec], &[f64])> {
        None
    }
}

/// Shared handle to a vector field.
#[derive(Clone, Debug)]
pub struct VectorFieldSpec(Arc<dyn VectorField>);

impl VectorFieldSpec {
    pub fn new(field: impl VectorField + 'static) -> Self {
        Self(Arc::new(field))
    }

    pub fn domain(&self) -> Domain {
        self.0.domain()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domain().ambient_dim()];
        self.0.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.0.eval_into(x, out)
    }

    pub fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        self.0.jacobian(x)
    }

    /// Trace of the ambient Jacobian (the Euclidean divergence).
    pub fn jacobian_trace(&self, x: &[f64]) -> Option<f64> {
        self.0.jacobian_trace(x)
    }

    pub fn eval_with_trace(&self, x: &[f64], out: &mut [f64]) -> Option<f64> {
        self.0.eval_with_trace(x, out)
    }

    pub fn tag(&self) -> FieldTag {
        self.0.tag()
    }

    pub fn ptr_eq(&self, other: &VectorFieldSpec) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn as_combination(&self) -> Option<(&[VectorFieldSpec], &[f64])> {
        self.0.as_combination()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weights: Mat,
    bias: Vec<f64>,
}

/// Random tanh network with five hidden layers of width three.
#[derive(Clone, Debug)]
pub struct MlpField {
    domain: Domain,
    layers: Vec<Layer>,
    seed: u64,
    stream: u64,
}

pub const MLP_HIDDEN: [usize; 5] = [3, 3, 3, 3, 3];

impl MlpField {
    /// Draws all weights and biases from N(0, 1), layer by layer, weights
    /// row-major before biases.
    pub fn new(domain: Domain, rng: &mut RngStream) -> Self {
        let n = domain.ambient_dim();
        let mut widths = vec![n];
        widths.extend_from_slice(&MLP_HIDDEN);
        widths.push(n);
        let layers = widths
            .windows(2)
            .map(|w| {
                let weights = Mat::from_fn(w[1], w[0], |_, _| rng.sample(StandardNormal));
                let bias = (0..w[1]).map(|_| rng.sample(StandardNormal)).collect();
                Layer { weights, bias }
            })
            .collect();
        Self { domain, layers, seed: rng.seed(), stream: rng.stream() }
    }

    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
                if l != last {
                    *zi = tanh(*zi);
                }
            }
            h = z;
        }
        h
    }

    /// Allocation-free forward pass for narrow networks. Writes the raw
    /// output into `out` and, when asked, the raw Jacobian (row-major) into
    /// `jac`. Returns false if some layer is wider than the stack buffers.
    fn forward_small(&self, x: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) -> bool {
        const W: usize = 8;
        let n = x.len();
        if n > W || self.layers.iter().any(|l| l.bias.len() > W) {
            return false;
        }
        let last = self.layers.len() - 1;
        let mut h = [0.0; W];
        h[..n].copy_from_slice(x);
        let mut width = n;
        let Some(jac) = jac else {
            for (l, layer) in self.layers.iter().enumerate() {
                let rows = layer.bias.len();
                let w = layer.weights.as_slice();
                let mut z = [0.0; W];
                for (r, zr) in z.iter_mut().enumerate().take(rows) {
                    let acc = layer.bias[r] + dot(&w[r * width..(r + 1) * width], &h[..width]);
                    *zr = if l != last { tanh(acc) } else { acc };
                }
                h = z;
                width = rows;
            }
            out.copy_from_slice(&h[..width]);
            return true;
        };
        // Tangents t[c][q] = ∂h_c/∂x_q, propagated alongside the values.
        let mut t = [[0.0; W]; W];
        for (i, ti) in t.iter_mut().enumerate().take(n) {
            ti[i] = 1.0;
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let rows = layer.bias.len();
            let w = layer.weights.as_slice();
            let mut z = [0.0; W];
            let mut tz = [[0.0; W]; W];
            for r in 0..rows {
                let wr = &w[r * width..(r + 1) * width];
                let mut acc = layer.bias[r] + dot(wr, &h[..width]);
                let tr = &mut tz[r];
                for (c, wc) in wr.iter().enumerate() {
                    for q in 0..n {
                        tr[q] += wc * t[c][q];
                    }
                }
                if l != last {
                    acc = tanh(acc);
                    let d = 1.0 - acc * acc;
                    for v in tr.iter_mut().take(n) {
                        *v *= d;
                    }
                }
                z[r] = acc;
            }
            h = z;
            t = tz;
            width = rows;
        }
        out.copy_from_slice(&h[..width]);
        for r in 0..width {
            jac[r * n..(r + 1) * n].copy_from_slice(&t[r][..n]);
        }
        true
    }

    /// Raw output and its Jacobian by forward accumulation.
    fn raw_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, Mat) {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        let mut jac = Mat::identity(x.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(&h);
            let mut jz = layer.weights.matmul(&jac);
            for (i, zi) in z.iter_mut().enumerate() {
                *zi += layer.bias[i];
                if l != last {
                    *zi = tanh(*zi);
                    let d = 1.0 - *zi * *zi;
                    for c in 0..jz.cols() {
                        jz[(i, c)] *= d;
                    }
                }
            }
            h = z;
            jac = jz;
        }
        (h, jac)
    }
}

impl VectorField for MlpField {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        if !self.forward_small(x, out, None) {
            out.copy_from_slice(&self.raw(x));
        }
        self.domain.project_in_place(x, out);
    }

    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        let n = x.len();
        let mut g = vec![0.0; n];
        let mut jg = vec![0.0; n * n];
        let (g, jg) = if self.forward_small(x, &mut g, Some(&mut jg)) {
            (g, Mat::from_vec_unchecked(n, n, jg))
        } else {
            self.raw_with_jacobian(x)
        };
        Some(self.domain.projected_jacobian(x, &g, &jg))
    }

    fn jacobian_trace(&self, x: &[f64]) -> Option<f64> {
        let mut g = vec![0.0; x.len()];
        self.eval_with_trace(x, &mut g)
    }

    fn eval_with_trace(&self, x: &[f64], out: &mut [f64]) -> Option<f64> {
        let n = x.len();
        if self.domain.is_manifold() {
            self.eval_into(x, out);
            return self.jacobian(x).map(|j| j.trace());
        }
        let mut jg = [0.0; 64];
        if n <= 8 && self.forward_small(x, out, Some(&mut jg[..n * n])) {
            Some((0..n).map(|i| jg[i * n + i]).sum())
        } else {
            let (g, jg) = self.raw_with_jacobian(x);
            out.copy_from_slice(&g);
            Some(jg.trace())
        }
    }

    fn tag(&self) -> FieldTag {
        FieldTag::Mlp { seed: self.seed, stream: self.stream }
    }
}

/// tanh through `exp`, with a Taylor branch near zero where `1 − e^{−2|x|}`
/// would cancel. Relative error is a few ulp.
fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let r = if a < 0.0625 {
        let a2 = a * a;
        a * (1.0
            + a2 * (-1.0 / 3.0
                + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0 + a2 * (62.0 / 2835.0 + a2 * (-1382.0 / 155925.0))))))
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    r.copysign(x)
}

/// Random MLP test function, projected to the tangent space on manifolds.
pub fn mlp_field(domain: Domain, rng: &mut RngStream) -> VectorFieldSpec {
    VectorFieldSpec::new(MlpField::new(domain, rng))
}

/// x ↦ P_x ∇_x ∂_{θ_j} log q̃_θ(x) at a fixed parameter.
#[derive(Clone, Debug)]
pub struct MixedScoreField {
    model: OwnedModelAt,
    j: usize,
}

impl MixedScoreField {
    pub fn new(model: OwnedModelAt, j: usize) -> Self {
        Self { model, j }
    }
}

impl VectorField for MixedScoreField {
    fn domain(&self) -> Domain {
        self.model.model().domain()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.model.view().mixed_score_into(self.j, x, out);
        self.domain().project_in_place(x, out);
    }

    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        let at = self.model.view();
        let g = at.mixed_score(self.j, x);
        let jg = at.mixed_score_jacobian(self.j, x);
        Some(self.domain().projected_jacobian(x, &g, &jg))
    }

    fn tag(&self) -> FieldTag {
        FieldTag::MixedScore { j: self.j }
    }
}

type ValueFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;

/// A field given by closures. The value closure must already return
/// tangent vectors on manifold domains.
#[derive(Clone)]
pub struct AnalyticField {
    domain: Domain,
    name: String,
    value: ValueFn,
    jacobian: Option<JacobianFn>,
}

impl fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticField")
            .field("domain", &self.domain)
            .field("name", &self.name)
            .field("has_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl AnalyticField {
    pub fn new(
        domain: Domain,
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { domain, name: name.into(), value: Arc::new(value), jacobian: None }
    }

    pub fn with_jacobian(mut self, jacobian: impl Fn(&[f64]) -> Mat + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn into_spec(self) -> VectorFieldSpec {
        VectorFieldSpec::new(self)
    }
}

impl VectorField for AnalyticField {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&(self.value)(x));
    }

    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        self.jacobian.as_ref().map(|j| j(x))
    }

    fn tag(&self) -> FieldTag {
        FieldTag::Analytic(self.name.clone())
    }
}

/// Scalar field on ℝ from a function and its derivative.
pub fn scalar_field(
    name: impl Into<String>,
    f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    df: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> VectorFieldSpec {
    AnalyticField::new(Domain::Euclidean { p: 1 }, name, move |x| vec![f(x[0])])
        .with_jacobian(move |x| Mat::from_vec_unchecked(1, 1, vec![df(x[0])]))
        .into_spec()
}

/// Flattened linear combination of leaf fields.
#[derive(Clone, Debug)]
pub struct Combination {
    domain: Domain,
    leaves: Vec<VectorFieldSpec>,
    coeffs: Vec<f64>,
}

impl VectorField for Combination {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; out.len()];
        for (leaf, c) in self.leaves.iter().zip(&self.coeffs) {
            leaf.eval_into(x, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += c * b;
            }
        }
    }

    fn jacobian(&self, x: &[f64]) -> Option<Mat> {
        let n = self.domain.ambient_dim();
        let mut acc = Mat::zeros(n, n);
        for (leaf, c) in self.leaves.iter().zip(&self.coeffs) {
            acc = acc.add(&leaf.jacobian(x)?.scale(*c));
        }
        Some(acc)
    }

    fn tag(&self) -> FieldTag {
        FieldTag::Combination { leaves: self.leaves.len() }
    }

    fn as_combination(&self) -> Option<(&[VectorFieldSpec], &[f64])> {
        Some((&self.leaves, &self.coeffs))
    }
}

/// Pointwise linear combination `Σ coeffs[i]·fields[i]`.
///
/// Nested combinations are flattened and repeated leaves (same handle)
/// merged; exact-zero coefficients are dropped.
pub fn combine(fields: &[VectorFieldSpec], coeffs: &[f64]) -> Result<VectorFieldSpec> {
    if fields.len() != coeffs.len() {
        return Err(Error::ShapeMismatch(format!("{} fields with {} coefficients", fields.len(), coeffs.len())));
    }
    let Some(first) = fields.first() else {
        return Err(Error::ShapeMismatch("combination of no fields".into()));
    };
    let domain = first.domain();
    if fields.iter().any(|f| f.domain() != domain) {
        return Err(Error::DomainMismatch);
    }
    let mut leaves: Vec<VectorFieldSpec> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut push = |leaf: &VectorFieldSpec, c: f64| {
        if let Some(i) = leaves.iter().position(|l| l.ptr_eq(leaf)) {
            weights[i] += c;
        } else {
            leaves.push(leaf.clone());
            weights.push(c);
        }
    };
    for (f, &c) in fields.iter().zip(coeffs) {
        match f.as_combination() {
            Some((ls, cs)) => ls.iter().zip(cs).for_each(|(l, lc)| push(l, c * lc)),
            None => push(f, c),
        }
    }
    let (leaves, coeffs): (Vec<_>, Vec<_>) = leaves.into_iter().zip(weights).filter(|(_, c)| *c != 0.0).unzip();
    Ok(VectorFieldSpec::new(Combination { domain, leaves, coeffs }))
}

/// Unique leaves of a batch of fields and the coefficient matrix
/// (`fields × leaves`) expressing each field in those leaves.
pub fn leaf_decomposition(fields: &[VectorFieldSpec]) -> (Vec<VectorFieldSpec>, Mat) {
    let mut leaves: Vec<VectorFieldSpec> = Vec::new();
    let mut entries: Vec<Vec<(usize, f64)>> = Vec::with_capacity(fields.len());
    for f in fields {
        let mut row = Vec::new();
        let mut add = |leaf: &VectorFieldSpec, c: f64| {
            let i = match leaves.iter().position(|l| l.ptr_eq(leaf)) {
                Some(i) => i,
                None => {
                    leaves.push(leaf.clone());
                    leaves.len() - 1
                }
            };
            row.push((i, c));
        };
        match f.as_combination() {
            Some((ls, cs)) => ls.iter().zip(cs).for_each(|(l, c)| add(l, *c)),
            None => add(f, 1.0),
        }
        entries.push(row);
    }
    let mut coeffs = Mat::zeros(fields.len(), leaves.len());
    for (r, row) in entries.into_iter().enumerate() {
        for (i, c) in row {
            coeffs[(r, i)] += c;
        }
    }
    (leaves, coeffs)
}
