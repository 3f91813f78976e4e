//! Sample-space geometry: Euclidean space, the positive orthant of the unit
//! sphere, and the Stiefel manifold of orthonormal `p×k` frames.
//!
//! Points and tangent vectors are flat ambient slices. Stiefel points are
//! stored row-major, entry `(i, c)` at `i*k + c`.

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, polar_factor, Mat};

const MEMBERSHIP_TOL: f64 = 1e-10;
const BASIS_DISCARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Euclidean { p: usize },
    SphereOrthant { p: usize },
    Stiefel { p: usize, k: usize },
}

/// Orthonormal basis of the tangent space at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentBasis {
    pub base_point: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl Domain {
    pub fn ambient_dim(&self) -> usize {
        match *self {
            Domain::Euclidean { p } | Domain::SphereOrthant { p } => p,
            Domain::Stiefel { p, k } => p * k,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Domain::Euclidean { p } => p,
            Domain::SphereOrthant { p } => p.saturating_sub(1),
            Domain::Stiefel { p, k } => p * k - k * (k + 1) / 2,
        }
    }

    pub fn is_manifold(&self) -> bool {
        !matches!(self, Domain::Euclidean { .. })
    }

    pub fn name(&self) -> String {
        match *self {
            Domain::Euclidean { p } => format!("R^{p}"),
            Domain::SphereOrthant { p } => format!("S^{}_+", p - 1),
            Domain::Stiefel { p, k } => format!("V({p},{k})"),
        }
    }

    /// Membership test: unit norm and nonnegative entries on the sphere
    /// orthant, `XᵀX = I` on Stiefel, finiteness everywhere.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.ambient_dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match *self {
            Domain::Euclidean { .. } => true,
            Domain::SphereOrthant { .. } => {
                (norm(x) - 1.0).abs() <= MEMBERSHIP_TOL && x.iter().all(|&v| v >= 0.0)
            }
            Domain::Stiefel { p, k } => {
                for a in 0..k {
                    for b in a..k {
                        let g: f64 = (0..p).map(|i| x[i * k + a] * x[i * k + b]).sum();
                        let target = if a == b { 1.0 } else { 0.0 };
                        if (g - target).abs() > MEMBERSHIP_TOL {
                            return false;
                        }
                    }
                }
                true
            }
        }
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::DomainViolation(format!("point {x:?} is not on {}", self.name())))
        }
    }

    /// Orthogonal projection of an ambient vector onto the tangent space at
    /// `x`.
    pub fn project_tangent(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        if z.len() != self.ambient_dim() {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} on {}",
                z.len(),
                self.name()
            )));
        }
        let mut out = z.to_vec();
        self.project_in_place(x, &mut out);
        Ok(out)
    }

    /// Projection without membership checks; `x` may be any ambient point
    /// (the formula is still applied literally).
    pub(crate) fn project_in_place(&self, x: &[f64], z: &mut [f64]) {
        match *self {
            Domain::Euclidean { .. } => {}
            Domain::SphereOrthant { .. } => {
                let r = dot(x, z);
                for (zi, xi) in z.iter_mut().zip(x) {
                    *zi -= r * xi;
                }
            }
            Domain::Stiefel { p, k } => {
                // Z − X sym(XᵀZ)
                const SMALL: usize = 4;
                let mut stack = [0.0; SMALL * SMALL];
                let mut heap = Vec::new();
                let xtz: &mut [f64] = if k <= SMALL {
                    &mut stack[..k * k]
                } else {
                    heap.resize(k * k, 0.0);
                    &mut heap
                };
                for a in 0..k {
                    for b in 0..k {
                        xtz[a * k + b] = (0..p).map(|i| x[i * k + a] * z[i * k + b]).sum();
                    }
                }
                for a in 0..k {
                    for b in (a + 1)..k {
                        let m = 0.5 * (xtz[a * k + b] + xtz[b * k + a]);
                        xtz[a * k + b] = m;
                        xtz[b * k + a] = m;
                    }
                }
                for i in 0..p {
                    for b in 0..k {
                        let s: f64 = (0..k).map(|a| x[i * k + a] * xtz[a * k + b]).sum();
                        z[i * k + b] -= s;
                    }
                }
            }
        }
    }

    /// Gram–Schmidt of the projected canonical basis, in ascending index
    /// order, dropping residuals below 1e-8.
    pub fn tangent_basis(&self, x: &[f64]) -> Result<TangentBasis> {
        self.check(x)?;
        let vectors = self.tangent_basis_unchecked(x)?;
        Ok(TangentBasis { base_point: x.to_vec(), vectors })
    }

    pub(crate) fn tangent_basis_unchecked(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.ambient_dim();
        let want = self.intrinsic_dim();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(want);
        for i in 0..n {
            if basis.len() == want {
                break;
            }
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            self.project_in_place(x, &mut v);
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&v, b);
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= c * bi;
                    }
                }
            }
            let r = norm(&v);
            if r < BASIS_DISCARD {
                continue;
            }
            v.iter_mut().for_each(|vi| *vi /= r);
            basis.push(v);
        }
        if basis.len() < want {
            return Err(Error::DegenerateBasis { found: basis.len(), expected: want });
        }
        Ok(basis)
    }

    /// Ambient Jacobian of `x ↦ P_x g(x)` given the raw field value `g` and
    /// its Jacobian `jg` (rows index outputs).
    pub(crate) fn projected_jacobian(&self, x: &[f64], g: &[f64], jg: &Mat) -> Mat {
        let n = self.ambient_dim();
        match *self {
            Domain::Euclidean { .. } => jg.clone(),
            Domain::SphereOrthant { .. } => {
                // P Jg − x gᵀ − ⟨x,g⟩ I
                let xg = dot(x, g);
                let mut out = Mat::zeros(n, n);
                for c in 0..n {
                    let xj: f64 = (0..n).map(|r| x[r] * jg[(r, c)]).sum();
                    for r in 0..n {
                        out[(r, c)] = jg[(r, c)] - x[r] * xj - x[r] * g[c];
                    }
                    out[(c, c)] -= xg;
                }
                out
            }
            Domain::Stiefel { p, k } => {
                // d/dX of G − X sym(XᵀG) along H: P(dG) − H sym(XᵀG) − X sym(HᵀG)
                let mut xtg = vec![0.0; k * k];
                for a in 0..k {
                    for b in 0..k {
                        xtg[a * k + b] = (0..p).map(|i| x[i * k + a] * g[i * k + b]).sum();
                    }
                }
                let sym_xtg: Vec<f64> =
                    (0..k * k).map(|ab| 0.5 * (xtg[ab] + xtg[(ab % k) * k + ab / k])).collect();
                let mut out = Mat::zeros(n, n);
                let mut col = vec![0.0; n];
                for e in 0..n {
                    let (ei, ec) = (e / k, e % k);
                    for (r, v) in col.iter_mut().enumerate() {
                        *v = jg[(r, e)];
                    }
                    self.project_in_place(x, &mut col);
                    // H sym(XᵀG): only row ei of H is nonzero
                    for b in 0..k {
                        col[ei * k + b] -= sym_xtg[ec * k + b];
                    }
                    // HᵀG has only row ec nonzero: (HᵀG)_{ec,b} = G_{ei,b}
                    let mut sym_htg = vec![0.0; k * k];
                    for b in 0..k {
                        sym_htg[ec * k + b] += 0.5 * g[ei * k + b];
                        sym_htg[b * k + ec] += 0.5 * g[ei * k + b];
                    }
                    for i in 0..p {
                        for b in 0..k {
                            let s: f64 = (0..k).map(|a| x[i * k + a] * sym_htg[a * k + b]).sum();
                            col[i * k + b] -= s;
                        }
                    }
                    for (r, v) in col.iter().enumerate() {
                        out[(r, e)] = *v;
                    }
                }
                out
            }
        }
    }

    /// Retraction of `x + t·v` back onto the domain.
    pub fn retract(&self, x: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x)?;
        let y = self.retract_unchecked(x, v, t)?;
        if self.contains(&y) {
            Ok(y)
        } else {
            Err(Error::RetractionFailure)
        }
    }

    /// Retraction without membership checks on input or output; used for
    /// finite differences at points close to the orthant boundary.
    pub(crate) fn retract_unchecked(&self, x: &[f64], v: &[f64], t: f64) -> Result<Vec<f64>> {
        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        match *self {
            Domain::Euclidean { .. } => Ok(y),
            Domain::SphereOrthant { .. } => {
                let r = norm(&y);
                if !(r > 0.0) {
                    return Err(Error::RetractionFailure);
                }
                Ok(y.into_iter().map(|v| v / r).collect())
            }
            Domain::Stiefel { p, k } => {
                if t == 0.0 {
                    return Ok(y);
                }
                let m = Mat::new(p, k, y).map_err(|_| Error::RetractionFailure)?;
                Ok(polar_factor(&m)?.into_vec())
            }
        }
    }
}
