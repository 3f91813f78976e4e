//! Point estimators built on Stein moment conditions.
//!
//! Exponential families get closed forms; anything else goes through a
//! damped Newton iteration on the empirical moment map.

use crate::error::{Error, Result};
use crate::models::{ExpFamSpec, ModelSpec};
use crate::moments::{are_estimate, estimate_moments, improved_fields};
use crate::numerics::{condition_number, solve_general, Mat, RngStream};
use crate::stein::{stein_matrix, FieldBatch};
use crate::vector_fields::{combine, VectorFieldSpec};

/// Condition number above which a closed-form system counts as singular.
pub const MAX_CONDITION: f64 = 1e12;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;
pub const NEWTON_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    /// Condition number of the solved linear system, when there is one.
    pub condition: Option<f64>,
    /// Orthogonalized fields actually used.
    pub k_used: usize,
    /// The improvement failed and the score-matching value was returned.
    pub fallback: bool,
    /// Why the fallback happened.
    pub failure: Option<String>,
    /// Estimated variance ratio per parameter, for improved estimators.
    pub are: Option<Vec<f64>>,
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateRecord {
    pub name: String,
    pub theta: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateRecord {
    fn new(name: &str, theta: Vec<f64>) -> Self {
        Self { name: name.into(), theta, diagnostics: Diagnostics::default() }
    }
}

fn ensure_finite(theta: &[f64]) -> Result<()> {
    if theta.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

/// Closed-form SMoM estimate for an exponential family with
/// parameter-free test fields `f_1..f_d`:
/// `θ̂ = −G⁻¹ · mean[div_M(w f_j) + w ⟨f_j, ∇_M b⟩]` with
/// `G_jk = mean w ⟨f_j, ∇_M t_k⟩`.
pub fn smom_expfam(ef: ExpFamSpec<'_>, fields: &[VectorFieldSpec], data: &[Vec<f64>]) -> Result<EstimateRecord> {
    let model = ef.model();
    let d = ef.dim();
    if fields.len() != d {
        return Err(Error::ShapeMismatch(format!("{} fields for {d} parameters", fields.len())));
    }
    if data.len() < d {
        return Err(Error::DegenerateData(format!("{} points for {d} parameters", data.len())));
    }
    let domain = model.domain();
    let batch = FieldBatch::new(model, fields)?;
    let mut gmat = Mat::zeros(d, d);
    let mut rhs = Mat::zeros(d, 1);
    for x in data {
        let point = batch.evaluate(x)?;
        let w = point.weight;
        let mut grad_b = ef.base_grad(x);
        domain.project_in_place(x, &mut grad_b);
        let grad_t: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                let mut g = ef.stat_grad(k, x);
                domain.project_in_place(x, &mut g);
                g
            })
            .collect();
        for (j, fj) in point.values.iter().enumerate() {
            for (k, tk) in grad_t.iter().enumerate() {
                gmat[(j, k)] += w * crate::numerics::dot(fj, tk);
            }
            rhs[(j, 0)] += point.weighted_divergence[j] + w * crate::numerics::dot(fj, &grad_b);
        }
    }
    let n = data.len() as f64;
    let gmat = gmat.scale(1.0 / n);
    let rhs = rhs.scale(-1.0 / n);
    let cond = condition_number(&gmat);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularSystem(cond));
    }
    let theta = solve_general(&gmat, &rhs)?.into_vec();
    ensure_finite(&theta)?;
    let mut rec = EstimateRecord::new("smom", theta);
    rec.diagnostics.condition = Some(cond);
    Ok(rec)
}

/// (Weighted) score matching: [`smom_expfam`] with the fields `∇_M t_j`.
pub fn score_matching(ef: ExpFamSpec<'_>, data: &[Vec<f64>]) -> Result<EstimateRecord> {
    let model = ef.model();
    let fields = model.mixed_score_fields(model.reference_theta())?;
    let mut rec = smom_expfam(ef, &fields, data)?;
    rec.name = "sm".into();
    Ok(rec)
}

fn gn_check(beta: u32, data: &[f64]) -> Result<i32> {
    if beta < 1 {
        return Err(Error::InvalidShape(format!("beta must be at least 1, got {beta}")));
    }
    if data.is_empty() {
        return Err(Error::DegenerateData("empty data".into()));
    }
    Ok(beta as i32)
}

fn nonzero(den: f64) -> Result<f64> {
    if den.abs() < 1e-300 || !den.is_finite() {
        Err(Error::DegenerateData(format!("denominator {den:e}")))
    } else {
        Ok(den)
    }
}

/// `n / (2β Σ x^{2β})`.
pub fn gn_mle(beta: u32, data: &[f64]) -> Result<EstimateRecord> {
    let b = gn_check(beta, data)?;
    let den = nonzero(2.0 * b as f64 * data.iter().map(|x| x.powi(2 * b)).sum::<f64>())?;
    Ok(EstimateRecord::new("mle", vec![data.len() as f64 / den]))
}

/// `((2β−1)/(2β)) Σ x^{2β−2} / Σ x^{4β−2}`.
pub fn gn_sm(beta: u32, data: &[f64]) -> Result<EstimateRecord> {
    let b = gn_check(beta, data)?;
    let num: f64 = data.iter().map(|x| x.powi(2 * b - 2)).sum();
    let den = nonzero(data.iter().map(|x| x.powi(4 * b - 2)).sum())?;
    let bf = 2.0 * b as f64;
    Ok(EstimateRecord::new("sm", vec![(bf - 1.0) / bf * num / den]))
}

/// `Σ f'(x) / (2β Σ x^{2β−1} f(x))` for a scalar test function.
pub fn gn_smom(beta: u32, field: &VectorFieldSpec, data: &[f64]) -> Result<EstimateRecord> {
    let b = gn_check(beta, data)?;
    if field.domain() != (crate::domains::Domain::Euclidean { p: 1 }) {
        return Err(Error::DomainMismatch);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in data {
        num += field.jacobian_trace(&[x]).ok_or(Error::MissingJacobian)?;
        den += x.powi(2 * b - 1) * field.eval(&[x])[0];
    }
    let den = nonzero(2.0 * b as f64 * den)?;
    Ok(EstimateRecord::new("smom", vec![num / den]))
}

/// Where the improvement is centred.
#[derive(Clone, Debug, PartialEq)]
pub enum Anchor {
    /// A known parameter (typically the truth).
    Oracle(Vec<f64>),
    /// The score-matching estimate on the same data.
    PlugIn,
}

/// Score matching for any model: closed form for exponential families,
/// otherwise Newton from the model's moment-based starting point.
pub fn score_matching_any(model: &ModelSpec, data: &[Vec<f64>]) -> Result<EstimateRecord> {
    match model.exp_family() {
        Some(ef) => score_matching(ef, data),
        None => {
            let init = starting_point(model, data)?;
            let mut rec = newton_smom(model, |th| model.mixed_score_fields(th), data, &init)?;
            rec.name = "sm".into();
            Ok(rec)
        }
    }
}

/// Moment-based starting point for non-exponential-family models.
fn starting_point(model: &ModelSpec, data: &[Vec<f64>]) -> Result<Vec<f64>> {
    match model.family() {
        crate::models::Family::Normal { p } => {
            let p = *p;
            let n = data.len() as f64;
            if data.len() <= p {
                return Err(Error::DegenerateData(format!("{} points in dimension {p}", data.len())));
            }
            let mu: Vec<f64> = (0..p).map(|i| data.iter().map(|x| x[i]).sum::<f64>() / n).collect();
            let cov = |i: usize, j: usize| data.iter().map(|x| (x[i] - mu[i]) * (x[j] - mu[j])).sum::<f64>() / n;
            let mut th = mu.clone();
            th.extend((0..p).map(|i| cov(i, i)));
            for i in 0..p {
                for j in (i + 1)..p {
                    th.push(cov(i, j));
                }
            }
            Ok(th)
        }
        _ => Ok(model.reference_theta().to_vec()),
    }
}

/// Inputs to the variance-improved estimator.
#[derive(Clone, Debug)]
pub struct ImprovementConfig<'a> {
    pub anchor: Anchor,
    pub raw_fields: &'a [VectorFieldSpec],
    /// Monte Carlo sample size for the moment matrices.
    pub mc_size: usize,
}

/// The improved estimator `θ̂[θ₀]`.
///
/// Moment matrices are estimated at `θ₀` (the oracle value or the score
/// matching estimate), the improved fields are built from them, and the
/// SMoM equations are solved with those fields. Any failure along the way
/// returns the score-matching estimate with `fallback` set and the reason
/// recorded.
pub fn improved_estimator(
    model: &ModelSpec,
    data: &[Vec<f64>],
    config: &ImprovementConfig<'_>,
    rng: &mut RngStream,
) -> Result<EstimateRecord> {
    let sm = score_matching_any(model, data)?;
    let name = match config.anchor {
        Anchor::Oracle(_) => "smom_oracle",
        Anchor::PlugIn => "smom_plugin",
    };
    let theta0 = match &config.anchor {
        Anchor::Oracle(t) => t.clone(),
        Anchor::PlugIn => sm.theta.clone(),
    };
    let mut attempt = || -> Result<EstimateRecord> {
        let (mm, v) = estimate_moments(model, &theta0, config.raw_fields, config.mc_size, rng)?;
        let fields = improved_fields(&mm, &v)?;
        let are = are_estimate(&mm)?;
        let mut rec = match model.exp_family() {
            Some(ef) => smom_expfam(ef, &fields, data)?,
            None => {
                let correction = mm.correction()?;
                let build = |th: &[f64]| -> Result<Vec<VectorFieldSpec>> {
                    let mixed = model.mixed_score_fields(th)?;
                    mixed
                        .iter()
                        .enumerate()
                        .map(|(j, mj)| {
                            let mut fs = vec![mj.clone()];
                            fs.extend(v.iter().cloned());
                            let mut cs = vec![1.0];
                            cs.extend((0..v.len()).map(|a| -correction[(j, a)]));
                            combine(&fs, &cs)
                        })
                        .collect()
                };
                newton_smom(model, build, data, &sm.theta)?
            }
        };
        rec.diagnostics.k_used = mm.k_used();
        rec.diagnostics.are = Some(are);
        Ok(rec)
    };
    let mut rec = match attempt() {
        Ok(rec) => rec,
        Err(e) => {
            let mut rec = sm.clone();
            rec.diagnostics.fallback = true;
            rec.diagnostics.failure = Some(e.to_string());
            rec
        }
    };
    rec.name = name.into();
    Ok(rec)
}

fn moment_map<F>(model: &ModelSpec, fields: &F, data: &[Vec<f64>], theta: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<VectorFieldSpec>>,
{
    let fs = fields(theta)?;
    let vals = stein_matrix(model, theta, &fs, data)?;
    let n = data.len() as f64;
    let out: Vec<f64> = (0..fs.len()).map(|j| (0..data.len()).map(|i| vals[(i, j)]).sum::<f64>() / n).collect();
    ensure_finite(&out)?;
    Ok(out)
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton on `m(θ) = mean_i A_θ f_{θ,j}(X_i)` with a central
/// finite-difference Jacobian and a halving line search.
pub fn newton_smom<F>(model: &ModelSpec, fields: F, data: &[Vec<f64>], theta_init: &[f64]) -> Result<EstimateRecord>
where
    F: Fn(&[f64]) -> Result<Vec<VectorFieldSpec>>,
{
    let d = model.dim();
    if data.is_empty() {
        return Err(Error::DegenerateData("empty data".into()));
    }
    let mut theta = theta_init.to_vec();
    let mut m = moment_map(model, &fields, data, &theta)?;
    if m.len() != d {
        return Err(Error::ShapeMismatch(format!("{} moment conditions for {d} parameters", m.len())));
    }
    let mut cond = None;
    for iter in 0..=NEWTON_MAX_ITER {
        let norm = sup_norm(&m);
        if norm < NEWTON_TOL {
            let mut rec = EstimateRecord::new("smom", theta);
            rec.diagnostics.condition = cond;
            rec.diagnostics.iterations = Some(iter);
            return Ok(rec);
        }
        if iter == NEWTON_MAX_ITER {
            break;
        }
        let mut jac = Mat::zeros(d, d);
        for k in 0..d {
            let h = NEWTON_FD_STEP * theta[k].abs().max(1.0);
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let (mp, mm) = (moment_map(model, &fields, data, &tp)?, moment_map(model, &fields, data, &tm)?);
            for j in 0..d {
                jac[(j, k)] = (mp[j] - mm[j]) / (2.0 * h);
            }
        }
        cond = Some(condition_number(&jac));
        let step = solve_general(&jac, &Mat::column(&m))?.into_vec();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t - lambda * s).collect();
            if let Ok(mt) = moment_map(model, &fields, data, &trial) {
                if sup_norm(&mt) < norm {
                    theta = trial;
                    m = mt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NoConvergence(NEWTON_MAX_ITER))
}
