//! Canonical GLMs as Z-estimation problems.
//!
//! The score of observation `(x, z)` is `ψ_j = (z - h⁻¹(xᵀθ)) x_j / φ`, its
//! Jacobian is `-x_j x_k / (φ ḣ(h⁻¹(xᵀθ)))`, and the second derivative tensor
//! is `ḧ(μ) / (φ ḣ(μ)³) x_j x_k x_l`. The response `z` is a deterministic
//! function of one auxiliary uniform through the response quantile, so `ψ`
//! stays a function of uniforms.

use std::io::Write;

use nalgebra::DMatrix;

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::rngperm::{uniform_stream, Purpose, StreamKey};
use crate::stats::normal_quantile_unchecked;
use crate::zsolve::{ParamBox, ZProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Log,
    Identity,
}

impl Link {
    /// `h(μ)`
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Link::Log => mu.ln(),
            Link::Identity => mu,
        }
    }

    /// `h⁻¹(η)`
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Log => eta.exp(),
            Link::Identity => eta,
        }
    }

    /// `ḣ(μ)`
    pub fn deriv(self, mu: f64) -> f64 {
        match self {
            Link::Log => 1.0 / mu,
            Link::Identity => 1.0,
        }
    }

    /// `ḧ(μ)`
    pub fn second_deriv(self, mu: f64) -> f64 {
        match self {
            Link::Log => -1.0 / (mu * mu),
            Link::Identity => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    Poisson,
    Gaussian { sd: f64 },
}

impl Response {
    fn mean_is_valid(self, mu: f64) -> bool {
        match self {
            Response::Poisson => mu.is_finite() && mu > 0.0,
            Response::Gaussian { .. } => mu.is_finite(),
        }
    }

    /// Inverse CDF of the response with mean `mu`, at `u` in [0, 1).
    pub fn quantile(self, u: f64, mu: f64) -> f64 {
        match self {
            Response::Poisson => poisson_quantile(u, mu) as f64,
            // Shift by half an ulp of the uniform grid so u = 0 stays finite.
            Response::Gaussian { sd } => {
                mu + sd * normal_quantile_unchecked(u + f64::EPSILON / 4.0)
            }
        }
    }
}

/// Exponential family with a link and a response sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFamily {
    pub label: String,
    pub dispersion: f64,
    pub link: Link,
    pub response: Response,
}

/// Invariant diagnostics of a link on a probe grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkCheck {
    /// max `|h⁻¹(h(μ)) - μ| / |μ|`
    pub roundtrip_max_rel: f64,
    /// max `|ḣ - FD(h)| / |ḣ|`
    pub derivative_max_rel: f64,
    /// min `|ḣ(μ)|`
    pub min_abs_derivative: f64,
}

impl GlmFamily {
    /// Canonical Poisson with log link, φ = 1.
    pub fn poisson_log() -> Self {
        GlmFamily {
            label: "poisson/log".into(),
            dispersion: 1.0,
            link: Link::Log,
            response: Response::Poisson,
        }
    }

    /// Canonical Gaussian with identity link and unit variance.
    pub fn gaussian_identity() -> Self {
        GlmFamily {
            label: "gaussian/identity".into(),
            dispersion: 1.0,
            link: Link::Identity,
            response: Response::Gaussian { sd: 1.0 },
        }
    }

    /// Probe the link on 1024 points of `η ∈ [eta_lo, eta_hi]`.
    pub fn check_link(&self, eta_lo: f64, eta_hi: f64) -> LinkCheck {
        const PROBES: usize = 1024;
        let mut out = LinkCheck {
            roundtrip_max_rel: 0.0,
            derivative_max_rel: 0.0,
            min_abs_derivative: f64::INFINITY,
        };
        for i in 0..PROBES {
            let eta = eta_lo + (eta_hi - eta_lo) * i as f64 / (PROBES - 1) as f64;
            let mu = self.link.inverse(eta);
            let back = self.link.inverse(self.link.link(mu));
            out.roundtrip_max_rel = out
                .roundtrip_max_rel
                .max((back - mu).abs() / mu.abs().max(f64::MIN_POSITIVE));
            let h = if mu == 0.0 { 1e-6 } else { 1e-6 * mu.abs() };
            let fd = (self.link.link(mu + h) - self.link.link(mu - h)) / (2.0 * h);
            let dh = self.link.deriv(mu);
            out.derivative_max_rel = out.derivative_max_rel.max((dh - fd).abs() / dh.abs());
            out.min_abs_derivative = out.min_abs_derivative.min(dh.abs());
        }
        out
    }

    fn check_mean(&self, eta: f64) -> Result<f64> {
        let mu = self.link.inverse(eta);
        if self.response.mean_is_valid(mu) {
            Ok(mu)
        } else {
            Err(Error::LinkDomainViolation {
                family: self.label.clone(),
                eta,
            })
        }
    }

    /// `|ḧ(μ)| / (φ |ḣ(μ)|³)` at `μ = h⁻¹(η)`.
    fn curvature(&self, eta: f64) -> f64 {
        let mu = self.link.inverse(eta);
        self.link.second_deriv(mu).abs() / (self.dispersion * self.link.deriv(mu).abs().powi(3))
    }
}

/// Range of `xᵀθ` for `x ∈ [0,1]^d` and `θ` in `bounds`.
pub fn linear_predictor_range(bounds: &ParamBox) -> (f64, f64) {
    let lo = bounds.lower().iter().map(|&l| l.min(0.0)).sum();
    let hi = bounds.upper().iter().map(|&u| u.max(0.0)).sum();
    (lo, hi)
}

/// GLM score as a [`ZProblem`]. Responses are regenerated from the
/// auxiliary uniform with mean `h⁻¹(xᵀθ₀)`.
#[derive(Debug, Clone)]
pub struct GlmProblem {
    family: GlmFamily,
    truth: Vec<f64>,
    bounds: ParamBox,
}

impl GlmProblem {
    pub fn family(&self) -> &GlmFamily {
        &self.family
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn response(&self, x: &[f64], aux: f64) -> f64 {
        let mu = self.family.link.inverse(dot(x, &self.truth));
        self.family.response.quantile(aux, mu)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Build the score problem for `family` with true parameter `truth` and
/// parameter box `bounds`. Fails if some `xᵀθ` reachable on
/// `[0,1]^d x bounds` maps outside the response's mean domain.
pub fn make_psi(family: GlmFamily, truth: Vec<f64>, bounds: ParamBox) -> Result<GlmProblem> {
    if truth.len() != bounds.dim() {
        return Err(Error::invalid(
            "truth",
            format!("length {} != box dimension {}", truth.len(), bounds.dim()),
        ));
    }
    if !bounds.contains(&truth) {
        return Err(Error::invalid(
            "truth",
            "true parameter lies outside the parameter box",
        ));
    }
    if family.dispersion.is_nan() || family.dispersion <= 0.0 {
        return Err(Error::invalid("dispersion", "must be positive"));
    }
    let (lo, hi) = linear_predictor_range(&bounds);
    family.check_mean(lo)?;
    family.check_mean(hi)?;
    Ok(GlmProblem {
        family,
        truth,
        bounds,
    })
}

impl ZProblem for GlmProblem {
    fn theta_dim(&self) -> usize {
        self.truth.len()
    }

    fn domain_dim(&self) -> usize {
        self.truth.len()
    }

    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }

    fn psi(&self, x: &[f64], aux: f64, theta: &[f64], out: &mut [f64]) {
        let z = self.response(x, aux);
        let r = (z - self.family.link.inverse(dot(x, theta))) / self.family.dispersion;
        for (o, xj) in out.iter_mut().zip(x) {
            *o = r * xj;
        }
    }

    fn psi_dot(&self, x: &[f64], _aux: f64, theta: &[f64], out: &mut DMatrix<f64>) {
        let mu = self.family.link.inverse(dot(x, theta));
        let w = -1.0 / (self.family.dispersion * self.family.link.deriv(mu));
        let q = x.len();
        for j in 0..q {
            for k in 0..q {
                out[(j, k)] = w * x[j] * x[k];
            }
        }
    }

    fn psi_ddot_bound(&self, x: &[f64], _aux: f64) -> Option<f64> {
        let eta_max: f64 = x
            .iter()
            .zip(self.bounds.lower().iter().zip(self.bounds.upper()))
            .map(|(xj, (l, u))| (xj * l).max(xj * u))
            .sum();
        let eta_min: f64 = x
            .iter()
            .zip(self.bounds.lower().iter().zip(self.bounds.upper()))
            .map(|(xj, (l, u))| (xj * l).min(xj * u))
            .sum();
        let c = self
            .family
            .curvature(eta_max)
            .max(self.family.curvature(eta_min));
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        Some(c * norm.powi(3))
    }
}

/// Covariates with synthetic responses.
#[derive(Debug, Clone)]
pub struct GlmDataset {
    pub design: DesignMatrix,
    /// Auxiliary uniforms the responses were drawn from.
    pub aux: Vec<f64>,
    pub responses: Vec<f64>,
    pub truth: Vec<f64>,
}

impl GlmDataset {
    /// CSV with header `x1,...,xd,z`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let d = self.design.d();
        let mut header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        header.push("z".into());
        writeln!(out, "{}", header.join(","))?;
        for (row, z) in self.design.rows().zip(&self.responses) {
            let mut cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            cells.push(fmt_f64(*z));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Draw one response per design row. The auxiliary uniforms come from `seed`
/// with purpose `Response`.
pub fn generate_dataset(
    family: &GlmFamily,
    truth: &[f64],
    design: &DesignMatrix,
    seed: &StreamKey,
) -> Result<GlmDataset> {
    if truth.len() != design.d() {
        return Err(Error::invalid(
            "truth",
            format!("length {} != design dimension {}", truth.len(), design.d()),
        ));
    }
    let aux = uniform_stream(&seed.with_purpose(Purpose::Response), design.n());
    let responses = design
        .rows()
        .zip(&aux)
        .map(|(x, &u)| {
            let mu = family.check_mean(dot(x, truth))?;
            Ok(family.response.quantile(u, mu))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GlmDataset {
        design: design.clone(),
        aux,
        responses,
        truth: truth.to_vec(),
    })
}

/// Smallest `k` with `P(Poisson(λ) ≤ k) > u`.
///
/// Forward summation of the pmf in a rescaled representation
/// (`value = stored · e^scale`), so `e^{-λ}` never underflows.
pub fn poisson_quantile(u: f64, lambda: f64) -> u64 {
    debug_assert!(lambda > 0.0, "rate must be positive");
    if u <= 0.0 {
        return 0;
    }
    const RESCALE: f64 = 1e250;
    let ln_rescale = RESCALE.ln();
    let mut log_scale = -lambda;
    let mut threshold = (u.ln() - log_scale).exp();
    let mut term = 1.0f64;
    let mut cdf = 1.0f64;
    let mut k = 0u64;
    loop {
        if cdf > threshold {
            return k;
        }
        k += 1;
        term *= lambda / k as f64;
        cdf += term;
        if cdf > RESCALE {
            term /= RESCALE;
            cdf /= RESCALE;
            log_scale += ln_rescale;
            threshold = (u.ln() - log_scale).exp();
        }
        // Past the mode the remaining mass is below rounding of the sum.
        if k as f64 > lambda && term <= cdf * 1e-17 {
            return k;
        }
    }
}
