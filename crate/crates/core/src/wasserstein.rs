//! Wasserstein score functions and the efficiency diagnostics built on them.
//!
//! `Φ_{θ,j}` is the centred solution of `A_θ(∇Φ_{θ,j}) = −∂_{θ_j} log q_θ`.
//! Closed forms exist for the normal, generalized normal and generalized
//! gamma families; nothing here attempts to solve the equation numerically.

use statrs::function::gamma::{gamma, ln_gamma};

use crate::domains::Domain;
use crate::error::{Error, Result};
use crate::models::{packed_pairs, Family, ModelSpec};
use crate::numerics::{dot, inverse_spd, mean_and_se, solve_general, sylvester_solve, Mat, RngStream};
use crate::samplers::sample;
use crate::stein::{apply_stein, stein_matrix};
use crate::vector_fields::{AnalyticField, VectorFieldSpec};

#[derive(Clone, Debug)]
enum Kind {
    GeneralizedNormal { beta: u32 },
    GeneralizedGamma { beta: u32 },
    Normal { mu: Vec<f64>, sigma: Mat, sylvester: Vec<Mat> },
}

/// Closed-form Wasserstein scores `Φ_{θ,1..d}` of one family at one θ.
#[derive(Clone, Debug)]
pub struct WScore {
    kind: Kind,
    theta: Vec<f64>,
}

fn positive_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidShape(format!("theta must be positive, got {theta}")))
    }
}

fn positive_beta(beta: u32) -> Result<()> {
    if beta >= 1 {
        Ok(())
    } else {
        Err(Error::InvalidShape("beta must be at least 1".into()))
    }
}

/// Normal family with mean `mu` and covariance `sigma`; scores are ordered
/// like the model parameters (means, then packed covariance entries).
pub fn wscore_normal(mu: &[f64], sigma: &Mat) -> Result<WScore> {
    let p = mu.len();
    if p == 0 || sigma.shape() != (p, p) {
        return Err(Error::ShapeMismatch(format!("mean of length {p} with sigma {:?}", sigma.shape())));
    }
    inverse_spd(sigma)?;
    let mut theta = mu.to_vec();
    let mut sylvester = Vec::new();
    for (j, k) in packed_pairs(p, true, p) {
        theta.push(sigma[(j, k)]);
        let mut d = Mat::zeros(p, p);
        d[(j, k)] = 1.0;
        d[(k, j)] = 1.0;
        sylvester.push(sylvester_solve(sigma, &d)?);
    }
    Ok(WScore { kind: Kind::Normal { mu: mu.to_vec(), sigma: sigma.clone(), sylvester }, theta })
}

/// `Φ(x) = −x²/(4βθ) + Γ(3/(2β)) / (4β θ^{1+1/β} Γ(1/(2β)))`.
pub fn wscore_gn(beta: u32, theta: f64) -> Result<WScore> {
    positive_beta(beta)?;
    positive_theta(theta)?;
    Ok(WScore { kind: Kind::GeneralizedNormal { beta }, theta: vec![theta] })
}

/// `Φ(x) = −x²/(4θ) + (2β+1)/(8θ²)`.
pub fn wscore_gg(beta: u32, theta: f64) -> Result<WScore> {
    positive_beta(beta)?;
    positive_theta(theta)?;
    Ok(WScore { kind: Kind::GeneralizedGamma { beta }, theta: vec![theta] })
}

/// Wasserstein scores of `model` at `theta`, when a closed form exists.
pub fn wscore_for(model: &ModelSpec, theta: &[f64]) -> Result<WScore> {
    model.at(theta)?;
    match model.family() {
        Family::GeneralizedNormal { beta } => wscore_gn(*beta, theta[0]),
        Family::GeneralizedGamma { beta } => wscore_gg(*beta, theta[0]),
        Family::Normal { p } => {
            let p = *p;
            let mut sigma = Mat::zeros(p, p);
            for ((j, k), v) in packed_pairs(p, true, p).into_iter().zip(&theta[p..]) {
                sigma[(j, k)] = *v;
                sigma[(k, j)] = *v;
            }
            wscore_normal(&theta[..p], &sigma)
        }
        Family::Ppi { .. } | Family::Bingham { .. } => Err(Error::MissingFisherScore),
    }
}

impl WScore {
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn domain(&self) -> Domain {
        match &self.kind {
            Kind::Normal { mu, .. } => Domain::Euclidean { p: mu.len() },
            _ => Domain::Euclidean { p: 1 },
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self.kind {
            Kind::GeneralizedNormal { .. } => "generalized-normal",
            Kind::GeneralizedGamma { .. } => "generalized-gamma",
            Kind::Normal { .. } => "normal",
        }
    }

    /// `Φ_j(x)`.
    pub fn eval(&self, j: usize, x: &[f64]) -> f64 {
        let th = self.theta[0];
        match &self.kind {
            Kind::GeneralizedNormal { beta } => {
                let b = *beta as f64;
                let centre = gamma(3.0 / (2.0 * b)) / (4.0 * b * th.powf(1.0 + 1.0 / b) * gamma(1.0 / (2.0 * b)));
                -x[0] * x[0] / (4.0 * b * th) + centre
            }
            Kind::GeneralizedGamma { beta } => {
                -x[0] * x[0] / (4.0 * th) + (2.0 * *beta as f64 + 1.0) / (8.0 * th * th)
            }
            Kind::Normal { mu, sigma, sylvester } => {
                let p = mu.len();
                let c: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                if j < p {
                    c[j]
                } else {
                    let s = &sylvester[j - p];
                    -0.5 * s.matmul(sigma).trace() + 0.5 * dot(&c, &s.matvec(&c))
                }
            }
        }
    }

    /// `∇_x Φ_j(x)`.
    pub fn grad(&self, j: usize, x: &[f64]) -> Vec<f64> {
        let th = self.theta[0];
        match &self.kind {
            Kind::GeneralizedNormal { beta } => vec![-x[0] / (2.0 * *beta as f64 * th)],
            Kind::GeneralizedGamma { .. } => vec![-x[0] / (2.0 * th)],
            Kind::Normal { mu, sylvester, .. } => {
                let p = mu.len();
                if j < p {
                    let mut e = vec![0.0; p];
                    e[j] = 1.0;
                    e
                } else {
                    let c: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                    sylvester[j - p].matvec(&c)
                }
            }
        }
    }

    fn grad_jacobian(&self, j: usize) -> Mat {
        let th = self.theta[0];
        match &self.kind {
            Kind::GeneralizedNormal { beta } => Mat::diag(&[-1.0 / (2.0 * *beta as f64 * th)]),
            Kind::GeneralizedGamma { .. } => Mat::diag(&[-1.0 / (2.0 * th)]),
            Kind::Normal { mu, sylvester, .. } => {
                let p = mu.len();
                if j < p {
                    Mat::zeros(p, p)
                } else {
                    sylvester[j - p].clone()
                }
            }
        }
    }

    /// `∇_x Φ_j` as a test field.
    pub fn grad_field(&self, j: usize) -> VectorFieldSpec {
        let this = self.clone();
        let jac = self.grad_jacobian(j);
        AnalyticField::new(self.domain(), format!("grad-phi{j}"), move |x| this.grad(j, x))
            .with_jacobian(move |_| jac.clone())
            .into_spec()
    }

    pub fn grad_fields(&self) -> Vec<VectorFieldSpec> {
        (0..self.dim()).map(|j| self.grad_field(j)).collect()
    }
}

fn check_dims(model: &ModelSpec, ws: &WScore) -> Result<()> {
    if ws.dim() != model.dim() || ws.domain() != model.domain() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores on {} for a {}-parameter model on {}",
            ws.dim(),
            ws.domain().name(),
            model.dim(),
            model.domain().name()
        )));
    }
    Ok(())
}

/// `A_θ(∇Φ_j)(x) + ∂_{θ_j} log q_θ(x)`; zero when `Φ_j` solves its equation.
pub fn pde_residual(model: &ModelSpec, theta: &[f64], ws: &WScore, j: usize, x: &[f64]) -> Result<f64> {
    check_dims(model, ws)?;
    let fisher = model.fisher_score(theta, j, x)?.ok_or(Error::MissingFisherScore)?;
    Ok(apply_stein(model, theta, &ws.grad_field(j), x)?.value + fisher)
}

/// `AVar[MLE]/AVar[SM]` for the generalized normal scale parameter:
/// `((2β−1)/(2(3β−2))) Γ(1−1/(2β))² / (Γ(1+1/(2β)) Γ(2−3/(2β)))`.
pub fn are_closed_form(beta: u32) -> Result<f64> {
    positive_beta(beta)?;
    let b = beta as f64;
    let h = 1.0 / (2.0 * b);
    let log_gammas = 2.0 * ln_gamma(1.0 - h) - ln_gamma(1.0 + h) - ln_gamma(2.0 - 3.0 * h);
    Ok((2.0 * b - 1.0) / (2.0 * (3.0 * b - 2.0)) * log_gammas.exp())
}

/// Least-squares fit of the Fisher scores onto the Wasserstein scores.
#[derive(Clone, Debug)]
pub struct SpanFit {
    /// Largest relative residual norm over parameters.
    pub residual: f64,
    /// Row `j` holds the coefficients of Fisher score `j`.
    pub lambda: Mat,
}

fn draw(model: &ModelSpec, theta: &[f64], m: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if m < 2 {
        return Err(Error::DegenerateData(format!("Monte Carlo size {m}")));
    }
    sample(model, theta, m, rng)
}

fn fisher_matrix(model: &ModelSpec, theta: &[f64], points: &[Vec<f64>]) -> Result<Mat> {
    let at = model.at(theta)?;
    let d = model.dim();
    let mut out = Mat::zeros(points.len(), d);
    for (i, x) in points.iter().enumerate() {
        for j in 0..d {
            out[(i, j)] = at.fisher_score(j, x).ok_or(Error::MissingFisherScore)?;
        }
    }
    Ok(out)
}

/// Regresses each Fisher score on the Wasserstein scores (no intercept) over
/// a Monte Carlo sample. A residual near zero means the score-matching
/// estimator is efficient at θ.
pub fn efficiency_span_test(
    model: &ModelSpec,
    theta: &[f64],
    ws: &WScore,
    m: usize,
    rng: &mut RngStream,
) -> Result<SpanFit> {
    check_dims(model, ws)?;
    if !model.has_fisher_score() {
        return Err(Error::MissingFisherScore);
    }
    let points = draw(model, theta, m, rng)?;
    let d = model.dim();
    let fisher = fisher_matrix(model, theta, &points)?;
    let phi = Mat::from_fn(points.len(), d, |i, k| ws.eval(k, &points[i]));
    let svd = phi.to_nalgebra().svd(true, true);
    let y = fisher.to_nalgebra();
    let coef = svd.solve(&y, 1e-13).map_err(|e| Error::DegenerateData(e.into()))?;
    let fitted = phi.to_nalgebra() * &coef;
    let mut residual = 0.0_f64;
    for j in 0..d {
        let r = (y.column(j) - fitted.column(j)).norm() / y.column(j).norm();
        residual = residual.max(r);
    }
    Ok(SpanFit { residual, lambda: Mat::from_nalgebra(&coef.transpose()) })
}

/// Monte Carlo evaluation of the score-matching/MLE variance gap.
#[derive(Clone, Debug)]
pub struct GapReport {
    /// `G⁻¹ E[(A u)(A u)ᵀ] G⁻¹`.
    pub gap: Mat,
    /// Entrywise standard error of `gap`, with `G` held fixed.
    pub gap_se: Mat,
    /// `G⁻¹ U G⁻¹`.
    pub avar_sm: Mat,
    /// `F_jk = E⟨∇Φ_j, ∇∂_k log q⟩`.
    pub f: Mat,
    /// Mean outer product of Fisher scores.
    pub fisher_info: Mat,
    /// Entrywise standard error of `f − fisher_info`.
    pub f_fisher_se: Mat,
}

impl GapReport {
    /// `gap_jj / avar_sm_jj`, which estimates `1 − AVar[MLE]/AVar[SM]`.
    pub fn relative_gap(&self) -> Vec<f64> {
        (0..self.gap.rows()).map(|j| self.gap[(j, j)] / self.avar_sm[(j, j)]).collect()
    }
}

fn entry_stats(per_point: &[Mat]) -> (Mat, Mat) {
    let (r, c) = per_point[0].shape();
    let mut mean = Mat::zeros(r, c);
    let mut se = Mat::zeros(r, c);
    let mut buf = vec![0.0; per_point.len()];
    for a in 0..r {
        for b in 0..c {
            for (v, m) in buf.iter_mut().zip(per_point) {
                *v = m[(a, b)];
            }
            let (mu, s) = mean_and_se(&buf);
            mean[(a, b)] = mu;
            se[(a, b)] = s;
        }
    }
    (mean, se)
}

/// Forms `u_j = Σ_k (G F⁻¹)_jk ∇Φ_k − ∇∂_j log q` on a Monte Carlo sample
/// and returns `G⁻¹ E[(A u)(A u)ᵀ] G⁻¹` with supporting quantities.
pub fn mle_sm_gap(model: &ModelSpec, theta: &[f64], ws: &WScore, m: usize, rng: &mut RngStream) -> Result<GapReport> {
    check_dims(model, ws)?;
    let d = model.dim();
    let points = draw(model, theta, m, rng)?;
    let grads = ws.grad_fields();
    let mixed = model.mixed_score_fields(theta)?;
    let mut fields = grads.clone();
    fields.extend(mixed.iter().cloned());
    let stein = stein_matrix(model, theta, &fields, &points)?;
    let fisher = fisher_matrix(model, theta, &points)?;
    let n = points.len() as f64;

    let mut f = Mat::zeros(d, d);
    let mut g = Mat::zeros(d, d);
    let mut u = Mat::zeros(d, d);
    let mut f_minus_fisher = Vec::with_capacity(points.len());
    let mut fisher_outer = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let w = model.weight(x);
        let gv: Vec<Vec<f64>> = grads.iter().map(|h| h.eval(x)).collect();
        let mv: Vec<Vec<f64>> = mixed.iter().map(|h| h.eval(x)).collect();
        let fi = Mat::from_fn(d, d, |j, k| w * dot(&gv[j], &mv[k]));
        let so = Mat::from_fn(d, d, |j, k| fisher[(i, j)] * fisher[(i, k)]);
        for j in 0..d {
            for k in 0..d {
                g[(j, k)] += w * dot(&mv[j], &mv[k]) / n;
                u[(j, k)] += stein[(i, d + j)] * stein[(i, d + k)] / n;
            }
        }
        f = f.add(&fi.scale(1.0 / n));
        f_minus_fisher.push(fi.sub(&so));
        fisher_outer.push(so);
    }
    let g_inv = inverse_spd(&g.symmetrized())?;
    // (G F⁻¹) = (F⁻ᵀ Gᵀ)ᵀ
    let coef = solve_general(&f.transpose(), &g.transpose())?.transpose();
    let per_point: Vec<Mat> = (0..points.len())
        .map(|i| {
            let au: Vec<f64> = (0..d)
                .map(|j| (0..d).map(|k| coef[(j, k)] * stein[(i, k)]).sum::<f64>() - stein[(i, d + j)])
                .collect();
            let outer = Mat::from_fn(d, d, |a, b| au[a] * au[b]);
            g_inv.matmul(&outer).matmul(&g_inv)
        })
        .collect();
    let (gap, gap_se) = entry_stats(&per_point);
    let (fisher_info, _) = entry_stats(&fisher_outer);
    let (_, f_fisher_se) = entry_stats(&f_minus_fisher);
    Ok(GapReport {
        gap: gap.symmetrized(),
        gap_se,
        avar_sm: g_inv.matmul(&u).matmul(&g_inv).symmetrized(),
        f,
        fisher_info,
        f_fisher_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generalized_gamma, generalized_normal, multivariate_normal};
    use crate::numerics::mean_and_se;
    use crate::samplers::sample_gn;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(p: usize, rng: &mut RngStream) -> Mat {
        let a = Mat::from_fn(p, p, |_, _| StandardNormal.sample(rng));
        a.matmul(&a.transpose()).add(&Mat::identity(p).scale(0.5))
    }

    #[test]
    fn normal_identity_covariance_examples() {
        let ws = wscore_normal(&[0.0, 0.0], &Mat::identity(2)).unwrap();
        // parameters: mu1, mu2, S11, S22, S12
        let x = [0.7, 1.0];
        assert!((ws.eval(3, &x) - 0.0).abs() < 1e-15);
        assert!((ws.eval(2, &x) - (0.49 - 1.0) / 4.0).abs() < 1e-15);
        assert_eq!(ws.eval(0, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn gn_beta_one_matches_standard_normal() {
        let ws = wscore_gn(1, 0.5).unwrap();
        for x in [-1.3, 0.0, 0.4, 2.0] {
            assert!((ws.eval(0, &[x]) - (0.5 - x * x / 2.0)).abs() < 1e-14);
            assert!((ws.grad(0, &[x])[0] + x).abs() < 1e-15);
        }
        // Same direction as the normal family's variance score at Σ = 1.
        let wn = wscore_normal(&[0.0], &Mat::identity(1)).unwrap();
        for x in [-1.3, 0.4, 2.0] {
            assert!((wn.eval(1, &[x]) - (x * x - 1.0) / 4.0).abs() < 1e-14);
            let ratio = ws.eval(0, &[x]) / wn.eval(1, &[x]);
            assert!((ratio + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(matches!(wscore_gn(2, 0.0), Err(Error::InvalidShape(_))));
        assert!(matches!(wscore_gg(0, 1.0), Err(Error::InvalidShape(_))));
        let bad = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(wscore_normal(&[0.0, 0.0], &bad), Err(Error::NotSpd(_))));
    }

    #[test]
    fn gg_stein_image_is_negative_fisher_score() {
        let mut rng = RngStream::new(30, 0);
        for beta in 1..=3 {
            let m = generalized_gamma(beta).unwrap();
            for _ in 0..100 {
                let th = rng.random_range(0.2..3.0);
                let x: f64 = rng.random_range(0.1..3.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let ws = wscore_gg(beta, th).unwrap();
                let a = apply_stein(&m, &[th], &ws.grad_field(0), &[x]).unwrap().value;
                assert!((a - (x * x - (2.0 * beta as f64 + 1.0) / (2.0 * th))).abs() < 1e-10);
                assert!(pde_residual(&m, &[th], &ws, 0, &[x]).unwrap().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pde_residuals_vanish() {
        let mut rng = RngStream::new(31, 0);
        for beta in 1..=3 {
            let m = generalized_normal(beta).unwrap();
            for _ in 0..100 {
                let th = rng.random_range(0.2..3.0);
                let x: f64 = StandardNormal.sample(&mut rng);
                let ws = wscore_gn(beta, th).unwrap();
                assert!(pde_residual(&m, &[th], &ws, 0, &[x]).unwrap().abs() < 1e-10);
            }
        }
        for p in 1..=4 {
            for _ in 0..25 {
                let sigma = random_spd(p, &mut rng);
                let mu: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                let m = multivariate_normal(&mu, &sigma).unwrap();
                let th = m.reference_theta().to_vec();
                let ws = wscore_for(&m, &th).unwrap();
                let x: Vec<f64> = (0..p).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 2.0 * z }).collect();
                for j in 0..m.dim() {
                    let r = pde_residual(&m, &th, &ws, j, &x).unwrap();
                    assert!(r.abs() < 1e-8, "p={p} j={j} r={r}");
                }
            }
        }
    }

    #[test]
    fn pde_residual_needs_fisher_score() {
        let m = crate::models::ppi_model(&[-0.5; 3], 3).unwrap();
        let ws = wscore_gn(1, 1.0).unwrap();
        assert!(pde_residual(&m, m.reference_theta(), &ws, 0, &[0.6, 0.8, 0.0]).is_err());
        assert!(matches!(wscore_for(&m, m.reference_theta()), Err(Error::MissingFisherScore)));
    }

    #[test]
    fn scores_are_centred() {
        let mut rng = RngStream::new(32, 0);
        let cases: Vec<(ModelSpec, Vec<f64>)> = vec![
            (generalized_normal(2).unwrap(), vec![0.7]),
            (generalized_gamma(2).unwrap(), vec![1.3]),
            (multivariate_normal(&[0.5, -1.0], &Mat::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.0]])).unwrap(), vec![]),
        ];
        for (m, th) in cases {
            let th = if th.is_empty() { m.reference_theta().to_vec() } else { th };
            let ws = wscore_for(&m, &th).unwrap();
            let pts = sample(&m, &th, 20000, &mut rng).unwrap();
            for j in 0..ws.dim() {
                let vals: Vec<f64> = pts.iter().map(|x| ws.eval(j, x)).collect();
                let (mean, se) = mean_and_se(&vals);
                assert!(mean.abs() <= 4.0 * se, "{} j={j}: {mean} ± {se}", ws.family_name());
            }
        }
    }

    #[test]
    fn closed_form_are_values() {
        assert!((are_closed_form(1).unwrap() - 1.0).abs() < 1e-12);
        let two = are_closed_form(2).unwrap();
        let direct = 3.0 / 8.0 * gamma(0.75).powi(2) / (gamma(1.25) * gamma(1.25));
        assert!((two - direct).abs() < 1e-12);
        assert!((two - 0.6854).abs() < 5e-4);
        assert!((are_closed_form(10_000).unwrap() - 1.0 / 3.0).abs() < 0.01);
        let curve: Vec<f64> = (1..=50).map(|b| are_closed_form(b).unwrap()).collect();
        assert!(curve.windows(2).all(|w| w[1] < w[0]));
        assert!(curve.iter().all(|&r| r > 1.0 / 3.0));
        assert!(are_closed_form(0).is_err());
    }

    #[test]
    fn span_test_separates_efficient_families() {
        let mut rng = RngStream::new(33, 0);
        let sigma = random_spd(3, &mut rng);
        let m = multivariate_normal(&[0.1, 0.2, -0.3], &sigma).unwrap();
        let ws = wscore_for(&m, m.reference_theta()).unwrap();
        let fit = efficiency_span_test(&m, m.reference_theta(), &ws, 2000, &mut rng).unwrap();
        assert!(fit.residual < 1e-6, "{}", fit.residual);

        for beta in 1..=3 {
            let m = generalized_gamma(beta).unwrap();
            let th = 1.7;
            let ws = wscore_gg(beta, th).unwrap();
            let fit = efficiency_span_test(&m, &[th], &ws, 2000, &mut rng).unwrap();
            assert!(fit.residual < 1e-8);
            assert!((fit.lambda[(0, 0)] - 4.0 * th).abs() < 1e-8);
        }

        let m = generalized_normal(2).unwrap();
        let th = m.reference_theta().to_vec();
        let ws = wscore_for(&m, &th).unwrap();
        let fit = efficiency_span_test(&m, &th, &ws, 2000, &mut rng).unwrap();
        assert!(fit.residual > 0.1, "{}", fit.residual);
    }

    #[test]
    fn gap_vanishes_for_efficient_families() {
        let mut rng = RngStream::new(34, 0);
        let cases = vec![
            generalized_gamma(2).unwrap(),
            multivariate_normal(&[0.3, -0.2], &Mat::from_rows(&[vec![1.5, 0.5], vec![0.5, 0.9]])).unwrap(),
        ];
        for m in cases {
            let th = m.reference_theta().to_vec();
            let ws = wscore_for(&m, &th).unwrap();
            let rep = mle_sm_gap(&m, &th, &ws, 5000, &mut rng).unwrap();
            let d = m.dim();
            for a in 0..d {
                for b in 0..d {
                    assert!(rep.gap[(a, b)].abs() <= 4.0 * rep.gap_se[(a, b)] + 1e-12);
                    let diff = rep.f[(a, b)] - rep.fisher_info[(a, b)];
                    assert!(diff.abs() <= 4.0 * rep.f_fisher_se[(a, b)] + 1e-12, "{diff}");
                }
            }
        }
    }

    #[test]
    fn gn_gap_matches_closed_form_ratio() {
        let m = generalized_normal(2).unwrap();
        let th = m.reference_theta().to_vec();
        let ws = wscore_for(&m, &th).unwrap();
        let rep = mle_sm_gap(&m, &th, &ws, 100_000, &mut RngStream::new(35, 0)).unwrap();
        let rel = rep.relative_gap()[0];
        assert!((rel - (1.0 - are_closed_form(2).unwrap())).abs() < 0.03, "{rel}");
        let diff = rep.f[(0, 0)] - rep.fisher_info[(0, 0)];
        assert!(diff.abs() <= 4.0 * rep.f_fisher_se[(0, 0)]);
    }

    #[test]
    fn product_rule_with_scalar_potential() {
        // A(h ∇h) = h A(∇h) + |∇h|² for h = Φ.
        let m = generalized_normal(2).unwrap();
        let th = 0.9;
        let ws = wscore_gn(2, th).unwrap();
        let (w1, w2) = (ws.clone(), ws.clone());
        let k = -1.0 / (4.0 * th);
        let hgrad = AnalyticField::new(Domain::Euclidean { p: 1 }, "h-grad-h", move |x| {
            vec![w1.eval(0, x) * w1.grad(0, x)[0]]
        })
        .with_jacobian(move |x| Mat::diag(&[w2.grad(0, x)[0].powi(2) + w2.eval(0, x) * k]))
        .into_spec();
        let grad = ws.grad_field(0);
        let mut rng = RngStream::new(36, 0);
        for _ in 0..100 {
            let x: f64 = 2.0 * rng.random::<f64>() - 1.0;
            let lhs = apply_stein(&m, &[th], &hgrad, &[x]).unwrap().value;
            let ah = apply_stein(&m, &[th], &grad, &[x]).unwrap().value;
            let rhs = ws.eval(0, &[x]) * ah + ws.grad(0, &[x])[0].powi(2);
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn gn_orthogonal_component_is_orthogonal() {
        for beta in [2u32, 3] {
            let th: f64 = 1.2;
            let b = beta as f64;
            let c = 2.0 * b * (2.0 * b - 1.0) * th.powf(-1.0 + 1.0 / b) * gamma(1.0 - 1.0 / (2.0 * b))
                / gamma(1.0 / (2.0 * b));
            let bi = beta as i32;
            let xs = sample_gn(beta, th, 200_000, &mut RngStream::new(37, beta as u64)).unwrap();
            let vals: Vec<f64> = xs
                .iter()
                .map(|x| {
                    let u = -c * x + 2.0 * b * x.powi(2 * bi - 1);
                    -2.0 * b * x.powi(2 * bi - 1) * u
                })
                .collect();
            let (mean, se) = mean_and_se(&vals);
            assert!(mean.abs() <= 4.0 * se, "beta={beta}: {mean} ± {se}");
        }
    }
}
