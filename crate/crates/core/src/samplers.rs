//! Exact samplers for every model.
//!
//! The scalar families and the normal use transformations of standard
//! draws. PPI and Bingham use rejection from the uniform distribution on
//! their domain, with the log-density supremum computed exactly.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::models::{Family, ModelSpec};
use crate::numerics::{dot, solve_general, symmetric_eigen, Mat, RngStream};

/// Proposals allowed per accepted draw before giving up.
const MAX_ATTEMPTS_PER_DRAW: usize = 1_000_000;
/// Added to the exact PPI supremum.
const PPI_BOUND_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    ExactTransform,
    /// Rejection from the uniform distribution; the bound is on the log
    /// density ratio.
    Rejection { log_bound: f64 },
}

/// A sampler bound to a model and parameter.
#[derive(Clone, Debug)]
pub struct SamplerSpec<'m> {
    model: &'m ModelSpec,
    theta: Vec<f64>,
    method: Method,
}

/// Draws together with the number of proposals used.
#[derive(Clone, Debug)]
pub struct Draws {
    pub points: Vec<Vec<f64>>,
    pub proposals: usize,
}

impl<'m> SamplerSpec<'m> {
    pub fn new(model: &'m ModelSpec, theta: &[f64]) -> Result<Self> {
        model.at(theta)?;
        let method = match model.family() {
            Family::GeneralizedNormal { .. } | Family::GeneralizedGamma { .. } | Family::Normal { .. } => {
                Method::ExactTransform
            }
            Family::Ppi { p, shape } => {
                if let Some(b) = shape.iter().find(|&&b| b < -0.5) {
                    return Err(Error::SamplerUnsupported(format!(
                        "uniform proposal cannot dominate shape exponent {b} below -0.5"
                    )));
                }
                let (a, mu) = ppi_matrices(*p, theta);
                Method::Rejection { log_bound: simplex_quadratic_max(&a, &mu)? + PPI_BOUND_MARGIN }
            }
            Family::Bingham { p, .. } => {
                let Domain::Stiefel { k, .. } = model.domain() else { unreachable!() };
                let a = bingham_matrix(*p, theta);
                let (eig, _) = symmetric_eigen(&a)?;
                Method::Rejection { log_bound: eig.iter().rev().take(k).sum() }
            }
        };
        Ok(Self { model, theta: theta.to_vec(), method })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        Ok(self.sample_counted(n, rng)?.points)
    }

    pub fn sample_counted(&self, n: usize, rng: &mut RngStream) -> Result<Draws> {
        let th = &self.theta;
        match (self.model.family(), self.method) {
            (Family::GeneralizedNormal { beta }, _) => {
                Ok(exact(sample_gn(*beta, th[0], n, rng)?.into_iter().map(|x| vec![x]).collect()))
            }
            (Family::GeneralizedGamma { beta }, _) => {
                Ok(exact(sample_gg(*beta, th[0], n, rng)?.into_iter().map(|x| vec![x]).collect()))
            }
            (Family::Normal { p }, _) => Ok(exact(sample_normal(*p, th, n, rng)?)),
            (Family::Ppi { p, .. }, Method::Rejection { log_bound }) => {
                let at = self.model.at(th)?;
                let p = *p;
                rejection(n, rng, log_bound, |rng| uniform_orthant(p, rng), |x| at.log_unnorm(x))
            }
            (Family::Bingham { p, .. }, Method::Rejection { log_bound }) => {
                let at = self.model.at(th)?;
                let Domain::Stiefel { k, .. } = self.model.domain() else { unreachable!() };
                let p = *p;
                rejection(n, rng, log_bound, |rng| uniform_stiefel(p, k, rng), |x| at.log_unnorm(x))
            }
            _ => unreachable!("rejection families always carry a bound"),
        }
    }
}

fn exact(points: Vec<Vec<f64>>) -> Draws {
    let proposals = points.len();
    Draws { points, proposals }
}

fn rejection(
    n: usize,
    rng: &mut RngStream,
    log_bound: f64,
    mut propose: impl FnMut(&mut RngStream) -> Vec<f64>,
    log_target: impl Fn(&[f64]) -> f64,
) -> Result<Draws> {
    let mut points = Vec::with_capacity(n);
    let mut proposals = 0usize;
    let mut since_accept = 0usize;
    while points.len() < n {
        let x = propose(rng);
        proposals += 1;
        since_accept += 1;
        let log_ratio = log_target(&x) - log_bound;
        if log_ratio > 0.0 {
            return Err(Error::BoundViolation(log_ratio));
        }
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            points.push(x);
            since_accept = 0;
        } else if since_accept >= MAX_ATTEMPTS_PER_DRAW {
            return Err(Error::SamplerExhausted);
        }
    }
    Ok(Draws { points, proposals })
}

/// Generalized normal: `|X|^{2β} ~ Gamma(1/(2β), rate θ)` with a fair sign.
pub fn sample_gn(beta: u32, theta: f64, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if beta < 1 || !(theta > 0.0) {
        return Err(Error::InvalidShape(format!("need beta >= 1 and theta > 0, got ({beta}, {theta})")));
    }
    let b = 2.0 * beta as f64;
    let gamma = Gamma::new(1.0 / b, 1.0 / theta).map_err(|e| Error::InvalidShape(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let u: f64 = gamma.sample(rng);
            let x = u.powf(1.0 / b);
            if rng.random::<bool>() { x } else { -x }
        })
        .collect())
}

/// Generalized gamma: `X² ~ Gamma(β + 1/2, rate θ)` with a fair sign.
pub fn sample_gg(beta: u32, theta: f64, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if beta < 1 || !(theta > 0.0) {
        return Err(Error::InvalidShape(format!("need beta >= 1 and theta > 0, got ({beta}, {theta})")));
    }
    let gamma = Gamma::new(beta as f64 + 0.5, 1.0 / theta).map_err(|e| Error::InvalidShape(e.to_string()))?;
    Ok((0..n)
        .map(|_| {
            let v: f64 = gamma.sample(rng);
            let x = v.sqrt();
            if rng.random::<bool>() { x } else { -x }
        })
        .collect())
}

fn sample_normal(p: usize, theta: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let mu = &theta[..p];
    let mut sigma = Mat::zeros(p, p);
    let mut idx = p;
    for j in 0..p {
        sigma[(j, j)] = theta[idx];
        idx += 1;
    }
    for j in 0..p {
        for k in (j + 1)..p {
            sigma[(j, k)] = theta[idx];
            sigma[(k, j)] = theta[idx];
            idx += 1;
        }
    }
    let l = sigma.to_nalgebra().cholesky().ok_or_else(|| Error::NotSpd(String::new()))?.l();
    Ok((0..n)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            (0..p).map(|i| mu[i] + (0..=i).map(|c| l[(i, c)] * z[c]).sum::<f64>()).collect()
        })
        .collect())
}

/// PPI draws at `theta`.
pub fn sample_ppi(model: &ModelSpec, theta: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if !matches!(model.family(), Family::Ppi { .. }) {
        return Err(Error::SamplerUnsupported("not a PPI model".into()));
    }
    SamplerSpec::new(model, theta)?.sample(n, rng)
}

/// Matrix Bingham draws at `theta`, row-major `p×k`.
pub fn sample_bingham(model: &ModelSpec, theta: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if !matches!(model.family(), Family::Bingham { .. }) {
        return Err(Error::SamplerUnsupported("not a Bingham model".into()));
    }
    SamplerSpec::new(model, theta)?.sample(n, rng)
}

/// Draws from any model.
pub fn sample(model: &ModelSpec, theta: &[f64], n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    SamplerSpec::new(model, theta)?.sample(n, rng)
}

/// Uniform on the positive orthant of the unit sphere.
pub fn uniform_orthant(p: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
        let r = dot(&g, &g).sqrt();
        if r > 0.0 && g.iter().all(|&v| v > 0.0) {
            return g.into_iter().map(|v| v / r).collect();
        }
    }
}

/// Haar-uniform point on V(p, k): Gram–Schmidt of a Gaussian matrix, which
/// is the QR factor with positive triangular diagonal.
pub fn uniform_stiefel(p: usize, k: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..p * k).map(|_| rng.sample(StandardNormal)).collect();
        let mut cols: Vec<Vec<f64>> = (0..k).map(|c| (0..p).map(|i| g[i * k + c]).collect()).collect();
        let mut ok = true;
        for c in 0..k {
            for _ in 0..2 {
                let (done, rest) = cols.split_at_mut(c);
                let cur = &mut rest[0];
                for prev in done.iter() {
                    let r = dot(cur, prev);
                    for (a, b) in cur.iter_mut().zip(prev) {
                        *a -= r * b;
                    }
                }
            }
            let r = dot(&cols[c], &cols[c]).sqrt();
            if !(r > 1e-12) {
                ok = false;
                break;
            }
            cols[c].iter_mut().for_each(|v| *v /= r);
        }
        if ok {
            let mut x = vec![0.0; p * k];
            for (c, col) in cols.iter().enumerate() {
                for i in 0..p {
                    x[i * k + c] = col[i];
                }
            }
            return x;
        }
    }
}

/// `(A, μ)` of a PPI parameter, both over all `p` coordinates.
fn ppi_matrices(p: usize, theta: &[f64]) -> (Mat, Vec<f64>) {
    let q = p - 1;
    let mut a = Mat::zeros(p, p);
    let mut idx = 0;
    for j in 0..q {
        a[(j, j)] = theta[idx];
        idx += 1;
    }
    for j in 0..q {
        for k in (j + 1)..q {
            a[(j, k)] = theta[idx];
            a[(k, j)] = theta[idx];
            idx += 1;
        }
    }
    let mut mu = vec![0.0; p];
    mu[..q].copy_from_slice(&theta[idx..idx + q]);
    (a, mu)
}

fn bingham_matrix(p: usize, theta: &[f64]) -> Mat {
    let mut a = Mat::zeros(p, p);
    let mut idx = 0;
    for j in 0..p - 1 {
        a[(j, j)] = theta[idx];
        idx += 1;
    }
    for j in 0..p {
        for k in (j + 1)..p {
            a[(j, k)] = theta[idx];
            a[(k, j)] = theta[idx];
            idx += 1;
        }
    }
    a
}

/// Exact maximum of `yᵀAy + μᵀy` over the probability simplex.
///
/// The maximum sits at a stationary point of the restriction to the
/// relative interior of some face, so every face's stationary point is
/// checked.
pub fn simplex_quadratic_max(a: &Mat, mu: &[f64]) -> Result<f64> {
    let p = mu.len();
    if p > 20 {
        return Err(Error::SamplerUnsupported(format!("face enumeration over {p} coordinates")));
    }
    let value = |y: &[f64]| dot(y, &a.matvec(y)) + dot(mu, y);
    let mut best = f64::NEG_INFINITY;
    for mask in 1u32..(1 << p) {
        let face: Vec<usize> = (0..p).filter(|i| mask & (1 << i) != 0).collect();
        let m = face.len();
        // [2 A_FF  1] [y]   [-μ_F]
        // [1ᵀ     0] [λ] = [ 1  ]
        let mut kkt = Mat::zeros(m + 1, m + 1);
        let mut rhs = Mat::zeros(m + 1, 1);
        for (r, &i) in face.iter().enumerate() {
            for (c, &j) in face.iter().enumerate() {
                kkt[(r, c)] = 2.0 * a[(i, j)];
            }
            kkt[(r, m)] = 1.0;
            kkt[(m, r)] = 1.0;
            rhs[(r, 0)] = -mu[i];
        }
        rhs[(m, 0)] = 1.0;
        let Ok(sol) = solve_general(&kkt, &rhs) else { continue };
        if (0..m).any(|r| sol[(r, 0)] < -1e-12) {
            continue;
        }
        let mut y = vec![0.0; p];
        for (r, &i) in face.iter().enumerate() {
            y[i] = sol[(r, 0)].max(0.0);
        }
        best = best.max(value(&y));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generalized_gamma, generalized_normal, matrix_bingham, multivariate_normal, ppi_model};
    use crate::numerics::mean_and_se;

    #[test]
    fn gn_standard_normal_variance() {
        let mut rng = RngStream::new(1, 0);
        let xs = sample_gn(1, 0.5, 10_000, &mut rng).unwrap();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn gn_moment_identity() {
        for beta in 1..=3u32 {
            let th = 0.7;
            let mut rng = RngStream::new(2, beta as u64);
            let xs = sample_gn(beta, th, 20_000, &mut rng).unwrap();
            let v: Vec<f64> = xs.iter().map(|x| x.powi(2 * beta as i32)).collect();
            let (m, se) = mean_and_se(&v);
            assert!((m - 1.0 / (2.0 * beta as f64 * th)).abs() < 4.0 * se);
        }
    }

    #[test]
    fn gn_reference_has_unit_variance() {
        let m = generalized_normal(2).unwrap();
        let mut rng = RngStream::new(3, 0);
        let xs = sample(&m, m.reference_theta(), 10_000, &mut rng).unwrap();
        let var = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn gg_moments_and_signs() {
        let mut rng = RngStream::new(4, 0);
        for beta in 1..=3u32 {
            let th = 1.3;
            let xs = sample_gg(beta, th, 20_000, &mut rng).unwrap();
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let (m, se) = mean_and_se(&sq);
            assert!((m - (beta as f64 + 0.5) / th).abs() < 4.0 * se);
            let pos = xs.iter().filter(|&&x| x > 0.0).count() as f64 / xs.len() as f64;
            assert!((pos - 0.5).abs() < 4.0 * (0.25f64 / xs.len() as f64).sqrt());
        }
        assert!(sample_gg(0, 1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn normal_draws_have_requested_covariance() {
        let sigma = Mat::from_rows(&[vec![2.0, 0.6], vec![0.6, 1.0]]);
        let m = multivariate_normal(&[1.0, -2.0], &sigma).unwrap();
        let mut rng = RngStream::new(5, 0);
        let xs = sample(&m, m.reference_theta(), 40_000, &mut rng).unwrap();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..2).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        assert!((mean[0] - 1.0).abs() < 0.03 && (mean[1] + 2.0).abs() < 0.03);
        let c01 = xs.iter().map(|x| (x[0] - mean[0]) * (x[1] - mean[1])).sum::<f64>() / n;
        assert!((c01 - 0.6).abs() < 0.04);
    }

    #[test]
    fn ppi_uniform_accepts_everything() {
        let m = ppi_model(&[-0.5; 3], 3).unwrap();
        let s = SamplerSpec::new(&m, &[0.0; 5]).unwrap();
        let d = s.sample_counted(500, &mut RngStream::new(6, 0)).unwrap();
        assert_eq!(d.proposals, 500);
        assert!(d.points.iter().all(|x| m.domain().contains(x) && x.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn ppi_reference_bound_is_one() {
        let m = ppi_model(&[-0.5; 3], 3).unwrap();
        let s = SamplerSpec::new(&m, m.reference_theta()).unwrap();
        let Method::Rejection { log_bound } = s.method() else { panic!() };
        assert!((log_bound - 1.0 - PPI_BOUND_MARGIN).abs() < 1e-12);
    }

    #[test]
    fn ppi_bound_dominates_random_search() {
        let mut rng = RngStream::new(7, 0);
        let m = ppi_model(&[-0.5; 3], 3).unwrap();
        for _ in 0..5 {
            let th: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = SamplerSpec::new(&m, &th).unwrap();
            let Method::Rejection { log_bound } = s.method() else { panic!() };
            let at = m.at(&th).unwrap();
            let searched = (0..1_000_000)
                .map(|_| at.log_unnorm(&uniform_orthant(3, &mut rng)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(log_bound >= searched - 1e-9, "{log_bound} < {searched}");
            // and it is tight: the search gets close
            assert!(log_bound - searched < 0.05);
        }
    }

    #[test]
    fn ppi_rejects_unbounded_shapes() {
        let m = ppi_model(&[-0.7, 0.0, 0.0], 3).unwrap();
        assert!(matches!(SamplerSpec::new(&m, &[0.0; 5]), Err(Error::SamplerUnsupported(_))));
    }

    #[test]
    fn bingham_uniform_and_bound() {
        let m = matrix_bingham(3, 2).unwrap();
        let s = SamplerSpec::new(&m, &[0.0; 5]).unwrap();
        let d = s.sample_counted(300, &mut RngStream::new(8, 0)).unwrap();
        assert_eq!(d.proposals, 300);
        assert!(d.points.iter().all(|x| m.domain().contains(x)));

        let s = SamplerSpec::new(&m, m.reference_theta()).unwrap();
        assert_eq!(s.method(), Method::Rejection { log_bound: 2.0 });
    }

    #[test]
    fn uniform_stiefel_trace_moment() {
        // E tr(XᵀAX) = tr(A)·k/p under the uniform distribution
        let m = matrix_bingham(3, 2).unwrap();
        let at = m.at(m.reference_theta()).unwrap();
        let mut rng = RngStream::new(9, 0);
        let v: Vec<f64> = (0..20_000).map(|_| at.log_unnorm(&uniform_stiefel(3, 2, &mut rng))).collect();
        let (mean, se) = mean_and_se(&v);
        assert!((mean - 4.0 / 3.0).abs() < 4.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn samplers_are_deterministic() {
        let models = [
            generalized_normal(2).unwrap(),
            generalized_gamma(1).unwrap(),
            ppi_model(&[-0.5; 3], 3).unwrap(),
            matrix_bingham(3, 2).unwrap(),
        ];
        for m in &models {
            let a = sample(m, m.reference_theta(), 50, &mut RngStream::new(10, 3)).unwrap();
            let b = sample(m, m.reference_theta(), 50, &mut RngStream::new(10, 3)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn simplex_max_of_concave_quadratic_is_interior() {
        // −(y1² + y2²) on the 2-simplex: maximum at (1/2, 1/2)
        let a = Mat::diag(&[-1.0, -1.0]);
        let v = simplex_quadratic_max(&a, &[0.0, 0.0]).unwrap();
        assert!((v + 0.5).abs() < 1e-14);
    }
}
