//! Replicated-fit experiments: LHS vs i.i.d. variance, squared bias and MSE
//! per parameter, asymptotic normalized variances, and Q-Q tables.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::anova::{remainder_covariance, DecompositionReport, DecompositionSettings};
use crate::design::{generate, Method};
use crate::error::{Error, Result};
use crate::glm::{make_psi, GlmFamily, GlmProblem};
use crate::io::{fmt_f64, json_f64, json_matrix, json_vec};
use crate::linalg::{checked_inverse, sandwich};
use crate::rngperm::{uniform_stream, Purpose, StreamKey};
use crate::stats::{correlation, mean, normal_quantile, sample_variance};
use crate::zsolve::{
    expected_jacobian, solve, FitReport, LocationProblem, ParamBox, PsiField, SolverOptions,
    ZProblem,
};

/// Names accepted by [`Model::builtin`].
pub const BUILTIN_MODELS: [&str; 4] = [
    "poisson-log-d9",
    "poisson-log-d1",
    "gaussian-identity-d2",
    "mean-d1",
];

/// True parameter of the nine-covariate Poisson regression.
pub fn poisson_d9_truth() -> Vec<f64> {
    let s2 = std::f64::consts::SQRT_2;
    let s5 = 5f64.sqrt();
    vec![7.0, -s2, 0.5, -1.0 / 3.0, s5, -7.0, s2, -0.5, -s5]
}

/// A named estimating problem with a known true parameter.
pub struct Model {
    pub name: String,
    pub truth: Vec<f64>,
    problem: Box<dyn ZProblem + Send + Sync>,
    glm: Option<GlmProblem>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("truth", &self.truth)
            .finish()
    }
}

impl Model {
    pub fn builtin(name: &str) -> Result<Self> {
        Self::with_truth(name, None)
    }

    /// Builtin model, optionally with a different true parameter.
    pub fn with_truth(name: &str, truth: Option<Vec<f64>>) -> Result<Self> {
        let glm = match name {
            "poisson-log-d9" => Some(make_psi(
                GlmFamily::poisson_log(),
                truth.clone().unwrap_or_else(poisson_d9_truth),
                ParamBox::cube(9, -10.0, 10.0)?,
            )?),
            "poisson-log-d1" => Some(make_psi(
                GlmFamily::poisson_log(),
                truth.clone().unwrap_or_else(|| vec![1.0]),
                ParamBox::cube(1, -5.0, 5.0)?,
            )?),
            "gaussian-identity-d2" => Some(make_psi(
                GlmFamily::gaussian_identity(),
                truth.clone().unwrap_or_else(|| vec![1.0, -0.5]),
                ParamBox::cube(2, -10.0, 10.0)?,
            )?),
            _ => None,
        };
        let (problem, truth): (Box<dyn ZProblem + Send + Sync>, Vec<f64>) = match (name, &glm) {
            (_, Some(p)) => (Box::new(p.clone()), p.truth().to_vec()),
            ("mean-d1", None) => {
                let t = truth.unwrap_or_else(|| vec![0.5]);
                if t.len() != 1 {
                    return Err(Error::invalid("theta0", "mean-d1 has one parameter"));
                }
                (
                    Box::new(LocationProblem::new(1, ParamBox::cube(1, -1.0, 2.0)?)?),
                    t,
                )
            }
            (other, None) => {
                return Err(Error::invalid(
                    "model",
                    format!(
                        "unknown model `{other}` (expected one of {})",
                        BUILTIN_MODELS.join(", ")
                    ),
                ))
            }
        };
        Ok(Model {
            name: name.to_string(),
            truth,
            problem,
            glm,
        })
    }

    /// The GLM behind the model, if it has responses.
    pub fn glm(&self) -> Option<&GlmProblem> {
        self.glm.as_ref()
    }

    pub fn problem(&self) -> &(dyn ZProblem + Send + Sync) {
        self.problem.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.truth.len()
    }
}

/// Key for one (method, n) cell of an experiment. Replicate `l` of the cell
/// uses replication index `l`.
pub fn cell_key(master_seed: u64, method: Method, n: usize) -> StreamKey {
    let tag = match method {
        Method::Lhs => 1u64,
        Method::Iid => 2u64,
    };
    StreamKey::new(master_seed, Purpose::Permutation).subkey((tag << 48) ^ n as u64)
}

/// Generate design and responses for replicate `replicate` of a cell and fit.
pub fn fit_replicate(
    model: &Model,
    method: Method,
    n: usize,
    key: &StreamKey,
    replicate: u64,
    options: &SolverOptions,
) -> Result<FitReport> {
    let k = key.with_replication(replicate);
    let design = generate(method, n, model.dim(), &k)?;
    let aux = uniform_stream(&k.with_purpose(Purpose::Response), n);
    solve(model.problem(), &design, &aux, None, options)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub methods: Vec<Method>,
    pub sizes: Vec<usize>,
    pub replications: usize,
    pub master_seed: u64,
    pub oracle_n: usize,
    pub decomposition: DecompositionSettings,
    pub solver: SolverOptions,
}

impl ExperimentConfig {
    pub fn new(
        model: &str,
        methods: Vec<Method>,
        sizes: Vec<usize>,
        replications: usize,
        master_seed: u64,
    ) -> Self {
        let oracle_n = sizes.iter().copied().max().unwrap_or(0).max(1_000_000);
        ExperimentConfig {
            model: model.to_string(),
            methods,
            sizes,
            replications,
            master_seed,
            oracle_n,
            decomposition: DecompositionSettings::default(),
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::invalid("reps", "need at least 2 replications"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("methods", "no sampling method given"));
        }
        if self.sizes.is_empty() || self.sizes[0] == 0 {
            return Err(Error::invalid(
                "sizes",
                "sizes must be non-empty and positive",
            ));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sizes", "sizes must be strictly increasing"));
        }
        if self.oracle_n < *self.sizes.last().unwrap() {
            return Err(Error::invalid(
                "oracle-n",
                "oracle budget below the largest sample size",
            ));
        }
        Ok(())
    }
}

/// Moments of one parameter's replicate estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    /// 1-based parameter index.
    pub param: usize,
    pub variance: f64,
    pub squared_bias: f64,
    /// `variance + squared_bias`.
    pub mse: f64,
    /// `n * variance`.
    pub normalized_variance: f64,
    /// Standard error of `variance` (normal-theory).
    pub variance_se: f64,
    /// Delta-method standard error of `squared_bias`.
    pub squared_bias_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    /// Successful estimates in replicate order.
    pub estimates: Vec<Vec<f64>>,
    pub rows: Vec<ParamRow>,
}

impl Cell {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.estimates.iter().map(|e| e[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    pub model: String,
    pub truth: Vec<f64>,
    pub master_seed: u64,
    pub cells: Vec<Cell>,
}

impl ExperimentTable {
    pub fn cell(&self, method: Method, n: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.n == n)
    }

    /// `method,n,param,variance,sq_bias,mse,norm_var,failures`
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,n,param,variance,sq_bias,mse,norm_var,failures")?;
        for c in &self.cells {
            for r in &c.rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    c.method,
                    c.n,
                    r.param,
                    fmt_f64(r.variance),
                    fmt_f64(r.squared_bias),
                    fmt_f64(r.mse),
                    fmt_f64(r.normalized_variance),
                    c.failures
                )?;
            }
        }
        Ok(())
    }
}

fn summarize(estimates: &[Vec<f64>], truth: &[f64], n: usize) -> Vec<ParamRow> {
    let l = estimates.len() as f64;
    (0..truth.len())
        .map(|j| {
            let col: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let variance = sample_variance(&col);
            let bias = mean(&col) - truth[j];
            let squared_bias = bias * bias;
            let bias_se = (variance / l).sqrt();
            ParamRow {
                param: j + 1,
                variance,
                squared_bias,
                mse: variance + squared_bias,
                normalized_variance: n as f64 * variance,
                variance_se: variance * (2.0 / (l - 1.0)).sqrt(),
                squared_bias_se: 2.0 * bias.abs() * bias_se + bias_se * bias_se,
            }
        })
        .collect()
}

/// Fit `replications` independent designs of one (method, n) cell.
/// Non-converged or failed fits are excluded and counted; more than 20%
/// failures aborts.
pub fn run_cell(
    model: &Model,
    method: Method,
    n: usize,
    replications: usize,
    master_seed: u64,
    options: &SolverOptions,
) -> Result<Cell> {
    let key = cell_key(master_seed, method, n);
    let fits: Vec<Option<Vec<f64>>> = (0..replications as u64)
        .into_par_iter()
        .map(
            |l| match fit_replicate(model, method, n, &key, l, options) {
                Ok(fit) if fit.converged => Some(fit.theta_hat),
                _ => None,
            },
        )
        .collect();
    let estimates: Vec<Vec<f64>> = fits.into_iter().flatten().collect();
    let failures = replications - estimates.len();
    if failures * 5 > replications || estimates.len() < 2 {
        return Err(Error::TooManyFailures {
            method: method.to_string(),
            n,
            failures,
            total: replications,
        });
    }
    let rows = summarize(&estimates, &model.truth, n);
    Ok(Cell {
        method,
        n,
        replications,
        failures,
        estimates,
        rows,
    })
}

/// Every (method, n) cell of the configuration, methods outermost.
pub fn run_sweep(model: &Model, config: &ExperimentConfig) -> Result<ExperimentTable> {
    config.validate()?;
    let mut cells = Vec::new();
    for &method in &config.methods {
        for &n in &config.sizes {
            cells.push(run_cell(
                model,
                method,
                n,
                config.replications,
                config.master_seed,
                &config.solver,
            )?);
        }
    }
    Ok(ExperimentTable {
        model: model.name.clone(),
        truth: model.truth.clone(),
        master_seed: config.master_seed,
        cells,
    })
}

/// Asymptotic covariances of `√n (θ̂ - θ₀)` at the true parameter.
#[derive(Debug, Clone)]
pub struct AsymptoticOracle {
    /// Diagonal of `covariance`.
    pub normalized_variances: Vec<f64>,
    /// `A⁻¹ R A⁻ᵀ` (LHS).
    pub covariance: DMatrix<f64>,
    /// `A⁻¹ Cov(ψ) A⁻ᵀ` (i.i.d.).
    pub iid_covariance: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub decomposition: DecompositionReport,
    pub n_oracle: usize,
}

impl AsymptoticOracle {
    pub fn iid_normalized_variances(&self) -> Vec<f64> {
        self.iid_covariance.diagonal().iter().copied().collect()
    }

    pub fn to_json(&self, model: &Model, seed: u64) -> Value {
        let d = &self.decomposition;
        json!({
            "model": model.name,
            "theta0": json_vec(&model.truth),
            "n_oracle": self.n_oracle,
            "seed": seed,
            "normalized_variances": json_vec(&self.normalized_variances),
            "iid_normalized_variances": json_vec(&self.iid_normalized_variances()),
            "covariance": json_matrix(&self.covariance),
            "iid_covariance": json_matrix(&self.iid_covariance),
            "jacobian": json_matrix(&self.jacobian),
            "R": json_matrix(&d.remainder),
            "full_cov": json_matrix(&d.full_cov),
            "residual": json_matrix(&d.residual),
            "bins": d.settings.bins,
            "inner": d.settings.inner,
        })
    }
}

/// `A = E[ψ̇_θ₀]` and `R` of `ψ_θ₀` from `n_oracle` Monte Carlo points; the
/// normalized LHS variances are `diag(A⁻¹ R A⁻ᵀ)`.
pub fn asymptotic_oracle(
    model: &Model,
    n_oracle: usize,
    settings: &DecompositionSettings,
    seed: &StreamKey,
) -> Result<AsymptoticOracle> {
    if n_oracle < 10_000 {
        return Err(Error::invalid(
            "oracle-n",
            "oracle budget must be at least 10^4",
        ));
    }
    let key = seed.with_purpose(Purpose::Oracle);
    let jacobian = expected_jacobian(model.problem(), &model.truth, n_oracle, &key.subkey(1))?;
    let field = PsiField {
        problem: model.problem(),
        theta: model.truth.clone(),
    };
    let s = DecompositionSettings {
        outer: n_oracle,
        ..*settings
    };
    let decomposition = remainder_covariance(&field, &s, &key.subkey(2))?;
    let a_inv = checked_inverse(&jacobian)?;
    let covariance = sandwich(&a_inv, &decomposition.remainder, 1.0);
    let iid_covariance = sandwich(&a_inv, &decomposition.full_cov, 1.0);
    Ok(AsymptoticOracle {
        normalized_variances: covariance.diagonal().iter().copied().collect(),
        covariance,
        iid_covariance,
        jacobian,
        decomposition,
        n_oracle,
    })
}

/// How replicate estimates are scaled before comparison with N(0, 1).
#[derive(Debug, Clone, PartialEq)]
pub enum Standardization {
    /// Asymptotic normalized variances per parameter: sd = sqrt(v / n).
    Oracle(Vec<f64>),
    /// Replicate standard deviation.
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QqColumn {
    /// 1-based parameter index.
    pub param: usize,
    pub probabilities: Vec<f64>,
    /// Sorted standardized estimates.
    pub empirical: Vec<f64>,
    pub normal: Vec<f64>,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QqTable {
    pub n: usize,
    pub columns: Vec<QqColumn>,
}

impl QqTable {
    /// `param,p,empirical_q,normal_q`
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "param,p,empirical_q,normal_q")?;
        for c in &self.columns {
            for i in 0..c.empirical.len() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    c.param,
                    fmt_f64(c.probabilities[i]),
                    fmt_f64(c.empirical[i]),
                    fmt_f64(c.normal[i])
                )?;
            }
        }
        Ok(())
    }
}

/// Q-Q table from replicate estimates at sample size `n`, with Hazen plotting
/// positions `(i - 1/2) / L`.
pub fn qq_from_estimates(
    estimates: &[Vec<f64>],
    truth: &[f64],
    n: usize,
    standardization: &Standardization,
) -> Result<QqTable> {
    let l = estimates.len();
    if l < 2 {
        return Err(Error::invalid("reps", "need at least 2 estimates"));
    }
    let probabilities: Vec<f64> = (1..=l).map(|i| (i as f64 - 0.5) / l as f64).collect();
    let normal = probabilities
        .iter()
        .map(|&p| normal_quantile(p))
        .collect::<Result<Vec<f64>>>()?;
    let columns = (0..truth.len())
        .map(|j| {
            let col: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
            let sd = match standardization {
                Standardization::Oracle(v) => (v[j] / n as f64).sqrt(),
                Standardization::Empirical => sample_variance(&col).sqrt(),
            };
            let mut empirical: Vec<f64> = col.iter().map(|t| (t - truth[j]) / sd).collect();
            empirical.sort_by(f64::total_cmp);
            let correlation = correlation(&empirical, &normal);
            QqColumn {
                param: j + 1,
                probabilities: probabilities.clone(),
                empirical,
                normal: normal.clone(),
                correlation,
            }
        })
        .collect();
    Ok(QqTable { n, columns })
}

/// Run `replications` fits at size `n` and tabulate their Q-Q pairing.
pub fn qq_data(
    model: &Model,
    method: Method,
    n: usize,
    replications: usize,
    master_seed: u64,
    standardization: &Standardization,
    options: &SolverOptions,
) -> Result<QqTable> {
    if replications < 50 {
        return Err(Error::invalid(
            "reps",
            "Q-Q tables need at least 50 replications",
        ));
    }
    if let Standardization::Oracle(v) = standardization {
        if v.len() != model.dim() {
            return Err(Error::invalid(
                "standardization",
                "oracle variances have the wrong length",
            ));
        }
    }
    let cell = run_cell(model, method, n, replications, master_seed, options)?;
    qq_from_estimates(&cell.estimates, &model.truth, n, standardization)
}

/// Summary JSON of a table (used next to `sweep.csv`).
pub fn table_summary_json(table: &ExperimentTable) -> Value {
    let cells: Vec<Value> = table
        .cells
        .iter()
        .map(|c| {
            json!({
                "method": c.method.as_str(),
                "n": c.n,
                "replications": c.replications,
                "failures": c.failures,
                "variance": json_vec(&c.rows.iter().map(|r| r.variance).collect::<Vec<_>>()),
                "variance_se": json_vec(&c.rows.iter().map(|r| r.variance_se).collect::<Vec<_>>()),
                "squared_bias": json_vec(&c.rows.iter().map(|r| r.squared_bias).collect::<Vec<_>>()),
                "squared_bias_se": json_vec(&c.rows.iter().map(|r| r.squared_bias_se).collect::<Vec<_>>()),
            })
        })
        .collect();
    json!({
        "model": table.model,
        "theta0": json_vec(&table.truth),
        "seed": table.master_seed,
        "cells": cells,
        "mean_variance_lhs_over_iid": json_f64(variance_ratio(table)),
    })
}

/// Mean over cells present for both methods of `mean_j var_lhs / var_iid`;
/// NaN when one method is missing.
fn variance_ratio(table: &ExperimentTable) -> f64 {
    let ratios: Vec<f64> = table
        .cells
        .iter()
        .filter(|c| c.method == Method::Lhs)
        .filter_map(|lhs| {
            table.cell(Method::Iid, lhs.n).map(|iid| {
                let r: Vec<f64> = lhs
                    .rows
                    .iter()
                    .zip(&iid.rows)
                    .map(|(a, b)| a.variance / b.variance)
                    .collect();
                mean(&r)
            })
        })
        .collect();
    if ratios.is_empty() {
        f64::NAN
    } else {
        mean(&ratios)
    }
}
