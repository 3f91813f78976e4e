//! Monte Carlo inner-product matrices and the variance-improving
//! construction built from them.
//!
//! With mixed-score fields `m_j = P_x ∇_x ∂_{θ_j} log q̃` and raw test fields
//! `ṽ_α`, all on one shared sample from `q_{θ₀}`:
//!
//! * `F_αj = E[w ⟨ṽ_α, m_j⟩]`, `G_jk = E[w ⟨m_j, m_k⟩]`
//! * `v_α = ṽ_α − Σ_j (F G⁻¹)_αj m_j`, orthogonal to every `m_j` in the
//!   weighted inner product on the sample
//! * `S_jα = E[(A m_j)(A v_α)]`, `T = E[(A v)(A v)ᵀ]`, `U = E[(A m)(A m)ᵀ]`

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numerics::{dot, inverse_spd, solve_spd, Mat, RngStream};
use crate::samplers::sample;
use crate::stein::FieldBatch;
use crate::vector_fields::{combine, VectorFieldSpec};

/// Relative floor on `T_αα` below which an orthogonalized field is treated
/// as annihilated and dropped.
pub const DROP_TOL: f64 = 1e-12;

/// Shared Monte Carlo sample from `q_{θ₀}`.
#[derive(Clone, Debug)]
pub struct McSample {
    pub theta0: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
    pub stream: u64,
}

impl McSample {
    pub fn draw(model: &ModelSpec, theta0: &[f64], size: usize, rng: &mut RngStream) -> Result<Self> {
        let (seed, stream) = (rng.seed(), rng.stream());
        let points = sample(model, theta0, size, rng)?;
        Ok(Self { theta0: theta0.to_vec(), points, seed, stream })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct MomentMatrices {
    /// K×d
    pub f: Mat,
    /// d×d
    pub g: Mat,
    /// d×K
    pub s: Mat,
    /// K×K
    pub t: Mat,
    /// d×d
    pub u: Mat,
    /// Indices of the raw fields kept after dropping annihilated ones.
    pub kept: Vec<usize>,
    /// Mixed-score fields at θ₀, shared with the orthogonalized fields.
    pub mixed: Vec<VectorFieldSpec>,
    pub sample: McSample,
}

impl MomentMatrices {
    /// Number of orthogonalized fields in use.
    pub fn k_used(&self) -> usize {
        self.kept.len()
    }

    /// `C = S T⁻¹` (d×K).
    pub fn correction(&self) -> Result<Mat> {
        Ok(solve_spd(&self.t, &self.s.transpose())?.transpose())
    }
}

/// Per-point Stein values and weighted field products on the sample.
struct SampleTable {
    weight: Vec<f64>,
    mixed_vals: Vec<Vec<Vec<f64>>>,
    raw_vals: Vec<Vec<Vec<f64>>>,
    mixed_stein: Mat,
    raw_stein: Mat,
}

fn tabulate(
    model: &ModelSpec,
    theta0: &[f64],
    mixed: &[VectorFieldSpec],
    raw: &[VectorFieldSpec],
    points: &[Vec<f64>],
) -> Result<SampleTable> {
    let d = mixed.len();
    let k = raw.len();
    let at = model.at(theta0)?;
    let all: Vec<VectorFieldSpec> = mixed.iter().chain(raw).cloned().collect();
    let batch = FieldBatch::new(model, &all)?;
    let n = points.len();
    let mut table = SampleTable {
        weight: Vec::with_capacity(n),
        mixed_vals: Vec::with_capacity(n),
        raw_vals: Vec::with_capacity(n),
        mixed_stein: Mat::zeros(n, d),
        raw_stein: Mat::zeros(n, k),
    };
    for (i, x) in points.iter().enumerate() {
        let mut point = batch.evaluate(x)?;
        let stein = point.stein(&at, x);
        for (j, s) in stein.iter().enumerate() {
            if j < d {
                table.mixed_stein[(i, j)] = s.value;
            } else {
                table.raw_stein[(i, j - d)] = s.value;
            }
        }
        let raw_vals = point.values.split_off(d);
        table.weight.push(point.weight);
        table.mixed_vals.push(point.values);
        table.raw_vals.push(raw_vals);
    }
    Ok(table)
}

/// `E[a bᵀ]` over sample rows.
fn cross_moment(a: &Mat, b: &Mat) -> Mat {
    a.transpose().matmul(b).scale(1.0 / a.rows() as f64)
}

/// Draws one sample of size `m` at `theta0` and computes all moment
/// matrices and the orthogonalized fields `v_α`.
///
/// Orthogonalized fields whose Stein image is numerically zero (`T_αα`
/// below [`DROP_TOL`] relative to the typical diagonal and to the raw
/// field's own Stein second moment) are dropped. If none survive, or the
/// remaining `T` is not positive definite, the result is [`Error::NotSpd`].
pub fn estimate_moments(
    model: &ModelSpec,
    theta0: &[f64],
    raw_fields: &[VectorFieldSpec],
    m: usize,
    rng: &mut RngStream,
) -> Result<(MomentMatrices, Vec<VectorFieldSpec>)> {
    if raw_fields.is_empty() {
        return Err(Error::ShapeMismatch("at least one raw field is required".into()));
    }
    let sample = McSample::draw(model, theta0, m, rng)?;
    estimate_moments_on(model, sample, raw_fields)
}

/// [`estimate_moments`] on a given sample.
pub fn estimate_moments_on(
    model: &ModelSpec,
    sample: McSample,
    raw_fields: &[VectorFieldSpec],
) -> Result<(MomentMatrices, Vec<VectorFieldSpec>)> {
    let theta0 = sample.theta0.clone();
    let mixed = model.mixed_score_fields(&theta0)?;
    let d = mixed.len();
    let k = raw_fields.len();
    let n = sample.len();
    if n == 0 {
        return Err(Error::DegenerateData("empty Monte Carlo sample".into()));
    }
    let table = tabulate(model, &theta0, &mixed, raw_fields, &sample.points)?;
    let nf = n as f64;

    let mut f = Mat::zeros(k, d);
    let mut g = Mat::zeros(d, d);
    for i in 0..n {
        let w = table.weight[i];
        let mv = &table.mixed_vals[i];
        for a in 0..d {
            for b in a..d {
                g[(a, b)] += w * dot(&mv[a], &mv[b]);
            }
        }
        for (alpha, rv) in table.raw_vals[i].iter().enumerate() {
            for (j, mj) in mv.iter().enumerate() {
                f[(alpha, j)] += w * dot(rv, mj);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            g[(a, b)] /= nf;
            g[(b, a)] = g[(a, b)];
        }
    }
    let f = f.scale(1.0 / nf);

    // B = F G⁻¹ (K×d)
    let b = solve_spd(&g, &f.transpose())?.transpose();
    // Stein values of v by linearity: A v = A ṽ − B A m
    let v_stein = table.raw_stein.sub(&table.mixed_stein.matmul(&b.transpose()));
    let t_full = cross_moment(&v_stein, &v_stein).symmetrized();
    let raw_second: Vec<f64> = (0..k)
        .map(|a| (0..n).map(|i| table.raw_stein[(i, a)].powi(2)).sum::<f64>() / nf)
        .collect();
    let typical = t_full.trace() / k as f64;
    let kept: Vec<usize> = (0..k)
        .filter(|&a| {
            let floor = DROP_TOL * typical.max(raw_second[a]);
            t_full[(a, a)] >= floor && t_full[(a, a)] > 0.0
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::NotSpd(" (every orthogonalized field was annihilated)".into()));
    }

    let select_cols = |m: &Mat| Mat::from_fn(m.rows(), kept.len(), |r, c| m[(r, kept[c])]);
    let v_kept = select_cols(&v_stein);
    let s = cross_moment(&table.mixed_stein, &v_kept);
    let t = cross_moment(&v_kept, &v_kept).symmetrized();
    let u = cross_moment(&table.mixed_stein, &table.mixed_stein).symmetrized();
    inverse_spd(&t)?;
    let f_kept = Mat::from_fn(kept.len(), d, |r, c| f[(kept[r], c)]);

    let mut v_fields = Vec::with_capacity(kept.len());
    for &a in &kept {
        let mut fields = vec![raw_fields[a].clone()];
        fields.extend(mixed.iter().cloned());
        let mut coeffs = vec![1.0];
        coeffs.extend((0..d).map(|j| -b[(a, j)]));
        v_fields.push(combine(&fields, &coeffs)?);
    }

    let mm = MomentMatrices { f: f_kept, g, s, t, u, kept, mixed, sample };
    Ok((mm, v_fields))
}

/// Improved test functions `f_j = m_j − Σ_α (S T⁻¹)_jα v_α`.
pub fn improved_fields(mm: &MomentMatrices, v_fields: &[VectorFieldSpec]) -> Result<Vec<VectorFieldSpec>> {
    if v_fields.len() != mm.k_used() {
        return Err(Error::ShapeMismatch(format!("{} fields for K = {}", v_fields.len(), mm.k_used())));
    }
    let c = mm.correction()?;
    mm.mixed
        .iter()
        .enumerate()
        .map(|(j, mj)| {
            let mut fields = vec![mj.clone()];
            fields.extend(v_fields.iter().cloned());
            let mut coeffs = vec![1.0];
            coeffs.extend((0..v_fields.len()).map(|a| -c[(j, a)]));
            combine(&fields, &coeffs)
        })
        .collect()
}

/// Estimated ratio of asymptotic variances (improved over score matching),
/// one per parameter: `1 − (G⁻¹ S T⁻¹ Sᵀ G⁻¹)_jj / (G⁻¹ U G⁻¹)_jj`.
pub fn are_estimate(mm: &MomentMatrices) -> Result<Vec<f64>> {
    let ginv = inverse_spd(&mm.g)?;
    let sts = mm.s.matmul(&solve_spd(&mm.t, &mm.s.transpose())?);
    let gain = ginv.matmul(&sts).matmul(&ginv);
    let avar = ginv.matmul(&mm.u).matmul(&ginv);
    Ok((0..mm.g.rows()).map(|j| 1.0 - gain[(j, j)] / avar[(j, j)]).collect())
}
