//! Monte Carlo replication harness.
//!
//! Every random draw comes from a stream addressed by
//! `(master seed, experiment, n, K, pair, replication, purpose)`, so results
//! do not depend on how replications are scheduled across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{gn_mle, improved_estimator, score_matching_any, Anchor, ImprovementConfig};
use crate::models::{generalized_normal, matrix_bingham, ppi_model, ModelSpec};
use crate::moments::{estimate_moments, improved_fields};
use crate::numerics::RngStream;
use crate::samplers::sample;
use crate::vector_fields::{mlp_field, VectorFieldSpec};
use crate::wasserstein::are_closed_form;

pub const DEFAULT_REPS: usize = 300;
pub const FULL_REPS: usize = 1000;
pub const TRACE_STEP: f64 = 0.05;
pub const TRACE_HALF_WIDTH: f64 = 3.0;

const PURPOSE_DATA: u64 = 1;
const PURPOSE_MLP: u64 = 2;
const PURPOSE_MC: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Gnormal,
    Ppi,
    Bingham,
    AreCurve,
    Trace,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Gnormal => "gnormal",
            Experiment::Ppi => "ppi",
            Experiment::Bingham => "bingham",
            Experiment::AreCurve => "are-curve",
            Experiment::Trace => "trace",
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gnormal" => Ok(Experiment::Gnormal),
            "ppi" => Ok(Experiment::Ppi),
            "bingham" => Ok(Experiment::Bingham),
            "are-curve" => Ok(Experiment::AreCurve),
            "trace" | "testfunction-trace" => Ok(Experiment::Trace),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }
}

/// Which improved estimators a run computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AnchorKind {
    PlugIn,
    Oracle,
}

impl AnchorKind {
    pub fn estimator_name(self) -> &'static str {
        match self {
            AnchorKind::PlugIn => "smom_plugin",
            AnchorKind::Oracle => "smom_oracle",
        }
    }

    fn tag(self) -> u64 {
        match self {
            AnchorKind::PlugIn => 1,
            AnchorKind::Oracle => 2,
        }
    }
}

impl FromStr for AnchorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plugin" | "smom_plugin" => Ok(AnchorKind::PlugIn),
            "oracle" | "smom_oracle" => Ok(AnchorKind::Oracle),
            other => Err(Error::Config(format!("unknown anchor '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub n: Vec<usize>,
    pub reps: usize,
    pub k_list: Vec<usize>,
    /// Number of independent MLP initializations.
    pub pairs: usize,
    /// Monte Carlo size for the moment matrices.
    pub mc_size: usize,
    /// Generalized-normal shape.
    pub beta: u32,
    /// Largest β tabulated by the ARE curve.
    pub beta_max: u32,
    pub seed: u64,
    pub anchors: Vec<AnchorKind>,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        let (n, k_list) = match experiment {
            Experiment::Gnormal => (vec![10, 100, 1000], vec![1, 2, 4, 8]),
            Experiment::Trace => (vec![1000], vec![1, 8]),
            Experiment::Ppi | Experiment::Bingham => (vec![100], vec![3, 6, 12, 24]),
            Experiment::AreCurve => (vec![], vec![]),
        };
        Self {
            experiment,
            n,
            reps: DEFAULT_REPS,
            k_list,
            pairs: 10,
            mc_size: 1000,
            beta: 2,
            beta_max: 50,
            seed: 0,
            anchors: vec![AnchorKind::PlugIn, AnchorKind::Oracle],
            threads: None,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
        }
        match key.trim() {
            "experiment" => {
                let exp: Experiment = value.trim().parse()?;
                if exp != self.experiment {
                    return Err(Error::Config(format!(
                        "config is for '{exp}' but the command is '{}'",
                        self.experiment
                    )));
                }
            }
            "n" => self.n = list("n", value)?,
            "reps" => self.reps = num("reps", value)?,
            "K" | "k" => self.k_list = list("K", value)?,
            "pairs" => self.pairs = num("pairs", value)?,
            "M" | "m" => self.mc_size = num("M", value)?,
            "beta" => self.beta = num("beta", value)?,
            "beta_max" => self.beta_max = num("beta_max", value)?,
            "seed" => self.seed = num("seed", value)?,
            "anchors" => {
                self.anchors = value.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            "threads" => self.threads = Some(num("threads", value)?),
            "full" => {
                if num::<bool>("full", value)? {
                    self.reps = FULL_REPS;
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a config file of `key=value` lines. Blank lines and lines
    /// starting with `#` are ignored; `out` is returned rather than stored.
    pub fn apply_file(&mut self, text: &str) -> Result<Option<String>> {
        let mut out = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            if k.trim() == "out" {
                out = Some(v.trim().to_string());
            } else {
                self.set(k, v)?;
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.threads == Some(0) {
            return bad("thread count must be positive");
        }
        if self.experiment == Experiment::AreCurve {
            return if self.beta_max >= 1 { Ok(()) } else { bad("beta_max must be at least 1") };
        }
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 2) {
            return bad("n must list sizes of at least 2");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return bad("K must list counts of at least 1");
        }
        if self.pairs == 0 {
            return bad("pairs must be at least 1");
        }
        if self.mc_size < 2 {
            return bad("M must be at least 2");
        }
        if self.beta == 0 {
            return bad("beta must be at least 1");
        }
        if self.anchors.is_empty() && self.experiment != Experiment::Trace {
            return bad("at least one anchor is required");
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = self.threads {
            b = b.num_threads(t);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn model(&self) -> Result<ModelSpec> {
        match self.experiment {
            Experiment::Gnormal | Experiment::Trace => generalized_normal(self.beta),
            Experiment::Ppi => ppi_model(&[-0.5; 3], 3),
            Experiment::Bingham => matrix_bingham(3, 2),
            Experiment::AreCurve => Err(Error::Config("the ARE curve has no model".into())),
        }
    }

    fn data_stream(&self, n: usize, rep: usize) -> RngStream {
        RngStream::derive(self.seed, &[self.experiment.id(), n as u64, rep as u64, PURPOSE_DATA])
    }

    fn mc_stream(&self, n: usize, k: usize, pair: usize, rep: usize, anchor: AnchorKind) -> RngStream {
        RngStream::derive(
            self.seed,
            &[self.experiment.id(), n as u64, k as u64, pair as u64, rep as u64, PURPOSE_MC, anchor.tag()],
        )
    }

    /// MLP fields of one initialization; the sets for increasing K are
    /// nested.
    fn mlp_set(&self, model: &ModelSpec, pair: usize, k: usize) -> Vec<VectorFieldSpec> {
        (0..k)
            .map(|a| {
                let mut rng =
                    RngStream::derive(self.seed, &[self.experiment.id(), pair as u64, a as u64, PURPOSE_MLP]);
                mlp_field(model.domain(), &mut rng)
            })
            .collect()
    }
}

/// One CSV line: the MSE of one estimator for one parameter in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub parameter: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub pair: usize,
    pub estimator: String,
    pub mse: f64,
    pub ratio_vs_sm: f64,
    pub are_estimate: f64,
    pub failures: usize,
}

#[derive(Clone, Debug)]
struct RepOutcome {
    theta: Option<Vec<f64>>,
    fallback: bool,
    are: Option<Vec<f64>>,
}

impl RepOutcome {
    fn failed(&self) -> bool {
        self.theta.is_none() || self.fallback
    }
}

struct Cell<'a> {
    experiment: Experiment,
    names: &'a [String],
    truth: &'a [f64],
    n: usize,
    k: usize,
    pair: usize,
}

/// Per-parameter MSE over replications that produced an estimate; NaN when
/// every replication failed.
fn mse(outcomes: &[RepOutcome], truth: &[f64]) -> (Vec<f64>, usize) {
    let failures = outcomes.iter().filter(|o| o.failed()).count();
    let usable: Vec<&Vec<f64>> = outcomes.iter().filter_map(|o| o.theta.as_ref()).collect();
    if failures == outcomes.len() || usable.is_empty() {
        return (vec![f64::NAN; truth.len()], failures);
    }
    let m = usable.len() as f64;
    let out = (0..truth.len()).map(|j| usable.iter().map(|t| (t[j] - truth[j]).powi(2)).sum::<f64>() / m).collect();
    (out, failures)
}

fn mean_are(outcomes: &[RepOutcome], d: usize) -> Vec<f64> {
    let ares: Vec<&Vec<f64>> = outcomes.iter().filter(|o| !o.failed()).filter_map(|o| o.are.as_ref()).collect();
    if ares.is_empty() {
        return vec![f64::NAN; d];
    }
    (0..d).map(|j| ares.iter().map(|a| a[j]).sum::<f64>() / ares.len() as f64).collect()
}

fn rows_for(cell: &Cell<'_>, estimator: &str, outcomes: &[RepOutcome], sm_mse: &[f64]) -> Vec<ResultRow> {
    let (mse, failures) = mse(outcomes, cell.truth);
    let are = mean_are(outcomes, cell.truth.len());
    cell.names
        .iter()
        .enumerate()
        .map(|(j, name)| ResultRow {
            experiment: cell.experiment.name().into(),
            parameter: name.clone(),
            n: cell.n,
            k: cell.k,
            pair: cell.pair,
            estimator: estimator.into(),
            mse: mse[j],
            ratio_vs_sm: mse[j] / sm_mse[j],
            are_estimate: are[j],
            failures,
        })
        .collect()
}

/// Runs one of the estimation experiments (gnormal, ppi, bingham).
///
/// For each `n`, baseline rows (`K = 0`, `pair = 0`) carry score matching
/// and, for the generalized normal, the MLE. Each `(K, pair, anchor)` then
/// gets one row per parameter.
pub fn run_estimation(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    if !matches!(config.experiment, Experiment::Gnormal | Experiment::Ppi | Experiment::Bingham) {
        return Err(Error::Config(format!("'{}' is not an estimation experiment", config.experiment)));
    }
    let model = config.model()?;
    let truth = model.reference_theta().to_vec();
    let names = model.param_names();
    let pool = config.pool()?;
    let reps: Vec<usize> = (0..config.reps).collect();
    let mut rows = Vec::new();
    for &n in &config.n {
        let data: Vec<Result<Vec<Vec<f64>>>> = pool.install(|| {
            reps.par_iter().map(|&r| sample(&model, &truth, n, &mut config.data_stream(n, r))).collect()
        });
        let data: Vec<Vec<Vec<f64>>> = data.into_iter().collect::<Result<_>>()?;
        let sm: Vec<RepOutcome> = pool.install(|| {
            data.par_iter()
                .map(|x| RepOutcome { theta: score_matching_any(&model, x).ok().map(|r| r.theta), fallback: false, are: None })
                .collect()
        });
        let sm_mse = mse(&sm, &truth).0;
        let base = Cell { experiment: config.experiment, names: &names, truth: &truth, n, k: 0, pair: 0 };
        rows.extend(rows_for(&base, "sm", &sm, &sm_mse));
        if config.experiment == Experiment::Gnormal {
            let mle: Vec<RepOutcome> = data
                .iter()
                .map(|x| {
                    let xs: Vec<f64> = x.iter().map(|p| p[0]).collect();
                    RepOutcome { theta: gn_mle(config.beta, &xs).ok().map(|r| r.theta), fallback: false, are: None }
                })
                .collect();
            rows.extend(rows_for(&base, "mle", &mle, &sm_mse));
        }
        let mut anchors = config.anchors.clone();
        anchors.sort();
        anchors.dedup();
        for &k in &config.k_list {
            for pair in 1..=config.pairs {
                let fields = config.mlp_set(&model, pair, k);
                let cell = Cell { k, pair, ..base };
                for &anchor in &anchors {
                    let outcomes: Vec<RepOutcome> = pool.install(|| {
                        reps.par_iter()
                            .map(|&r| {
                                let imp = ImprovementConfig {
                                    anchor: match anchor {
                                        AnchorKind::Oracle => Anchor::Oracle(truth.clone()),
                                        AnchorKind::PlugIn => Anchor::PlugIn,
                                    },
                                    raw_fields: &fields,
                                    mc_size: config.mc_size,
                                };
                                let mut rng = config.mc_stream(n, k, pair, r, anchor);
                                match improved_estimator(&model, &data[r], &imp, &mut rng) {
                                    Ok(rec) => RepOutcome {
                                        theta: Some(rec.theta),
                                        fallback: rec.diagnostics.fallback,
                                        are: rec.diagnostics.are,
                                    },
                                    Err(_) => RepOutcome { theta: None, fallback: true, are: None },
                                }
                            })
                            .collect()
                    });
                    rows.extend(rows_for(&cell, anchor.estimator_name(), &outcomes, &sm_mse));
                }
            }
        }
    }
    Ok(rows)
}

/// True when an oracle-anchored row has a NaN MSE or ratio.
pub fn oracle_nan(rows: &[ResultRow]) -> bool {
    rows.iter().any(|r| r.estimator == AnchorKind::Oracle.estimator_name() && (r.mse.is_nan() || r.ratio_vs_sm.is_nan()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreRow {
    pub beta: u32,
    pub ratio: f64,
    pub limit: f64,
}

/// `AVar[MLE]/AVar[SM]` for β = 1..=beta_max with the 1/3 asymptote.
pub fn run_are_curve(beta_max: u32) -> Result<Vec<AreRow>> {
    if beta_max == 0 {
        return Err(Error::Config("beta_max must be at least 1".into()));
    }
    (1..=beta_max).map(|b| Ok(AreRow { beta: b, ratio: are_closed_form(b)?, limit: 1.0 / 3.0 })).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub x: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub pair: usize,
    pub f_sm: f64,
    pub f_mle: f64,
    pub f_improved_mean: f64,
}

pub fn trace_grid() -> Vec<f64> {
    let steps = (2.0 * TRACE_HALF_WIDTH / TRACE_STEP).round() as usize;
    (0..=steps).map(|i| -TRACE_HALF_WIDTH + i as f64 * TRACE_STEP).collect()
}

/// Test functions of the generalized-normal estimators on a grid: the score
/// matching field `−2βx^{2β−1}`, the MLE field `x`, and the plug-in improved
/// field averaged over replications, per `(K, pair)`. Only the first `n` is
/// used.
pub fn run_trace(config: &ExperimentConfig) -> Result<Vec<TraceRow>> {
    config.validate()?;
    let model = generalized_normal(config.beta)?;
    let truth = model.reference_theta().to_vec();
    let n = config.n[0];
    let grid = trace_grid();
    let pool = config.pool()?;
    let reps: Vec<usize> = (0..config.reps).collect();
    let b = config.beta as i32;
    let data: Vec<Vec<Vec<f64>>> = pool
        .install(|| reps.par_iter().map(|&r| sample(&model, &truth, n, &mut config.data_stream(n, r))).collect::<Vec<_>>())
        .into_iter()
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &k in &config.k_list {
        for pair in 1..=config.pairs {
            let raw = config.mlp_set(&model, pair, k);
            let curves: Vec<Option<Vec<f64>>> = pool.install(|| {
                reps.par_iter()
                    .map(|&r| {
                        let th0 = score_matching_any(&model, &data[r]).ok()?.theta;
                        let mut rng = config.mc_stream(n, k, pair, r, AnchorKind::PlugIn);
                        let (mm, v) = estimate_moments(&model, &th0, &raw, config.mc_size, &mut rng).ok()?;
                        let f = improved_fields(&mm, &v).ok()?.remove(0);
                        Some(grid.iter().map(|&x| f.eval(&[x])[0]).collect())
                    })
                    .collect()
            });
            let ok: Vec<&Vec<f64>> = curves.iter().flatten().collect();
            for (i, &x) in grid.iter().enumerate() {
                let mean = if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|c| c[i]).sum::<f64>() / ok.len() as f64
                };
                rows.push(TraceRow {
                    x,
                    k,
                    pair,
                    f_sm: -2.0 * b as f64 * x.powi(2 * b - 1),
                    f_mle: x,
                    f_improved_mean: mean,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Median (min, max) of `ratio_vs_sm` across MLP pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub parameter: String,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub estimator: String,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Pairs with a finite ratio.
    pub pairs_used: usize,
    pub pairs_total: usize,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Groups rows by everything except the pair and summarizes the ratios.
/// Rows with a NaN ratio are excluded from the statistics. Output follows
/// the first appearance of each group in `rows`.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (String, String, usize, usize, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.experiment.clone(), r.parameter.clone(), r.n, r.k, r.estimator.clone());
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        entry.1 += 1;
        if !r.ratio_vs_sm.is_nan() {
            entry.0.push(r.ratio_vs_sm);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (vals, total) = &groups[&key];
            let (min, max) = if vals.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            };
            SummaryRow {
                experiment: key.0,
                parameter: key.1,
                n: key.2,
                k: key.3,
                estimator: key.4,
                median: median(vals),
                min,
                max,
                pairs_used: vals.len(),
                pairs_total: *total,
            }
        })
        .collect()
}
