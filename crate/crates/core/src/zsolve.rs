//! Z-estimation: roots of `Ψ_n(θ) = (1/n) Σ_i ψ_θ(x_i)` and their sandwich
//! covariances.
//!
//! Under i.i.d. sampling `n · Cov(θ̂) → A⁻¹ B A⁻ᵀ` with `A = E[ψ̇_θ]` and
//! `B = E[ψ_θ ψ_θᵀ]`. Under LHS `B` is replaced by the remainder covariance
//! `R` of `ψ_θ` (see [`crate::anova`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anova::VectorField;
use crate::design::{DesignMatrix, Method};
use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, checked_solve, min_eigen, sandwich};
use crate::rngperm::StreamKey;
use rayon::prelude::*;

/// Closed box of admissible parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid(
                "bounds",
                "lower and upper must have the same non-zero length",
            ));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(
                    "bounds",
                    format!("interval [{l}, {u}] is not a finite proper interval"),
                ));
            }
        }
        Ok(ParamBox { lower, upper })
    }

    /// `[lo, hi]` in every coordinate.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (l, u))| (l..=u).contains(&t))
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (t, (l, u)) in theta.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *t = t.clamp(*l, *u);
        }
    }
}

/// An estimating function `ψ(x, u; θ)` with its Jacobian in `θ`.
pub trait ZProblem: Sync {
    fn theta_dim(&self) -> usize;
    fn domain_dim(&self) -> usize;
    fn bounds(&self) -> &ParamBox;
    fn psi(&self, x: &[f64], aux: f64, theta: &[f64], out: &mut [f64]);
    /// `∂ψ_j/∂θ_k` into `out` (q x q).
    fn psi_dot(&self, x: &[f64], aux: f64, theta: &[f64], out: &mut DMatrix<f64>);
    /// A bound on `‖ψ̈‖` valid over the whole parameter box, if known.
    fn psi_ddot_bound(&self, _x: &[f64], _aux: f64) -> Option<f64> {
        None
    }
}

/// `ψ(x, θ) = x - θ`: the sample mean as a Z-estimator.
#[derive(Debug, Clone)]
pub struct LocationProblem {
    bounds: ParamBox,
}

impl LocationProblem {
    pub fn new(d: usize, bounds: ParamBox) -> Result<Self> {
        if bounds.dim() != d {
            return Err(Error::invalid("bounds", "dimension mismatch"));
        }
        Ok(LocationProblem { bounds })
    }
}

impl ZProblem for LocationProblem {
    fn theta_dim(&self) -> usize {
        self.bounds.dim()
    }
    fn domain_dim(&self) -> usize {
        self.bounds.dim()
    }
    fn bounds(&self) -> &ParamBox {
        &self.bounds
    }
    fn psi(&self, x: &[f64], _aux: f64, theta: &[f64], out: &mut [f64]) {
        for ((o, xi), t) in out.iter_mut().zip(x).zip(theta) {
            *o = xi - t;
        }
    }
    fn psi_dot(&self, _x: &[f64], _aux: f64, _theta: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        out.fill_diagonal(-1.0);
    }
    fn psi_ddot_bound(&self, _x: &[f64], _aux: f64) -> Option<f64> {
        Some(0.0)
    }
}

/// `ψ_θ` at a fixed `θ`, seen as a vector field for the decomposition.
pub struct PsiField<'a, P: ZProblem + ?Sized> {
    pub problem: &'a P,
    pub theta: Vec<f64>,
}

impl<P: ZProblem + ?Sized> VectorField for PsiField<'_, P> {
    fn input_dim(&self) -> usize {
        self.problem.domain_dim()
    }
    fn output_dim(&self) -> usize {
        self.problem.theta_dim()
    }
    fn uses_auxiliary(&self) -> bool {
        true
    }
    fn eval(&self, x: &[f64], aux: f64, out: &mut [f64]) {
        self.problem.psi(x, aux, &self.theta, out)
    }
}

fn check_shapes<P: ZProblem + ?Sized>(
    problem: &P,
    design: &DesignMatrix,
    aux: &[f64],
    theta: &[f64],
) -> Result<()> {
    if design.d() != problem.domain_dim() {
        return Err(Error::invalid(
            "design",
            format!(
                "design has {} columns, problem expects {}",
                design.d(),
                problem.domain_dim()
            ),
        ));
    }
    if aux.len() != design.n() {
        return Err(Error::invalid(
            "aux",
            format!("{} auxiliary values for {} rows", aux.len(), design.n()),
        ));
    }
    if theta.len() != problem.theta_dim() {
        return Err(Error::invalid(
            "theta",
            format!("length {} != q = {}", theta.len(), problem.theta_dim()),
        ));
    }
    if !problem.bounds().contains(theta) {
        return Err(Error::invalid(
            "theta",
            format!("{theta:?} lies outside the parameter box"),
        ));
    }
    Ok(())
}

fn non_finite(what: &str) -> Error {
    Error::NonFiniteValue {
        context: what.to_string(),
    }
}

fn psi_bar_unchecked<P: ZProblem + ?Sized>(
    problem: &P,
    design: &DesignMatrix,
    aux: &[f64],
    theta: &[f64],
) -> Result<DVector<f64>> {
    let q = problem.theta_dim();
    let mut sum = DVector::zeros(q);
    let mut out = vec![0.0; q];
    for (row, &u) in design.rows().zip(aux) {
        problem.psi(row, u, theta, &mut out);
        for (s, v) in sum.iter_mut().zip(&out) {
            *s += v;
        }
    }
    sum /= design.n() as f64;
    if sum.iter().all(|v| v.is_finite()) {
        Ok(sum)
    } else {
        Err(non_finite("Ψ_n(θ)"))
    }
}

/// Empirical mean of `ψ_θ` over the design rows.
pub fn psi_bar<P: ZProblem + ?Sized>(
    problem: &P,
    design: &DesignMatrix,
    aux: &[f64],
    theta: &[f64],
) -> Result<DVector<f64>> {
    check_shapes(problem, design, aux, theta)?;
    if design.n() == 0 {
        return Err(Error::invalid("design", "empty design"));
    }
    psi_bar_unchecked(problem, design, aux, theta)
}

/// Empirical `A = mean ψ̇_θ` and `B = mean ψ_θ ψ_θᵀ`.
pub fn empirical_moments<P: ZProblem + ?Sized>(
    problem: &P,
    design: &DesignMatrix,
    aux: &[f64],
    theta: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = problem.theta_dim();
    let mut a = DMatrix::zeros(q, q);
    let mut b = DMatrix::zeros(q, q);
    let mut jac = DMatrix::zeros(q, q);
    let mut psi = vec![0.0; q];
    for (row, &u) in design.rows().zip(aux) {
        problem.psi_dot(row, u, theta, &mut jac);
        a += &jac;
        problem.psi(row, u, theta, &mut psi);
        for i in 0..q {
            for j in 0..q {
                b[(i, j)] += psi[i] * psi[j];
            }
        }
    }
    let n = design.n() as f64;
    a /= n;
    b /= n;
    if a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        Ok((a, b))
    } else {
        Err(non_finite("empirical Jacobian"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub theta_hat: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual norm after each iteration, starting with the initial point.
    pub trace: Vec<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_iid: DMatrix<f64>,
    pub sandwich_iid: DMatrix<f64>,
    pub sandwich_lhs: Option<DMatrix<f64>>,
    pub converged: bool,
    pub design_method: Method,
    pub n: usize,
}

/// Damped, projected Newton iteration on `Ψ_n(θ) = 0`.
///
/// Each step solves `A_n Δ = -Ψ_n` and halves the step (up to
/// `max_halvings` times) until the residual norm decreases; iterates are
/// clamped to the parameter box. A non-converged fit is reported with
/// `converged = false`; a numerically singular `A_n` is an error.
pub fn solve<P: ZProblem + ?Sized>(
    problem: &P,
    design: &DesignMatrix,
    aux: &[f64],
    theta_init: Option<&[f64]>,
    options: &SolverOptions,
) -> Result<FitReport> {
    let mut theta = theta_init
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| problem.bounds().center());
    check_shapes(problem, design, aux, &theta)?;
    if design.n() == 0 {
        return Err(Error::invalid("design", "empty design"));
    }
    if options.tol.is_nan() || options.tol <= 0.0 {
        return Err(Error::invalid("tol", "tolerance must be positive"));
    }

    let mut psi = psi_bar_unchecked(problem, design, aux, &theta)?;
    let mut norm = psi.norm();
    let mut trace = vec![norm];
    let mut iterations = 0;
    let mut converged = norm <= options.tol;

    while !converged && iterations < options.max_iter {
        let (a, _) = empirical_moments(problem, design, aux, &theta)?;
        let step = checked_solve(&a, &(-&psi))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let mut candidate: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(th, s)| th + t * s)
                .collect();
            problem.bounds().project(&mut candidate);
            if let Ok(p) = psi_bar_unchecked(problem, design, aux, &candidate) {
                let cn = p.norm();
                if cn < norm {
                    accepted = Some((candidate, p, cn));
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((c, p, cn)) => {
                theta = c;
                psi = p;
                norm = cn;
                trace.push(norm);
                converged = norm <= options.tol;
            }
            None => break,
        }
    }

    let (a_hat, b_iid) = empirical_moments(problem, design, aux, &theta)?;
    let sandwich_iid = sandwich_iid(&a_hat, &b_iid, design.n())?;
    Ok(FitReport {
        theta_hat: theta,
        iterations,
        residual_norm: norm,
        trace,
        a_hat,
        b_iid,
        sandwich_iid,
        sandwich_lhs: None,
        converged,
        design_method: design.method(),
        n: design.n(),
    })
}

/// `A⁻¹ B A⁻ᵀ / n`, symmetrized.
pub fn sandwich_iid(a_hat: &DMatrix<f64>, b: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let a_inv = checked_inverse(a_hat)?;
    Ok(sandwich(&a_inv, b, n as f64))
}

/// `A⁻¹ R A⁻ᵀ / n`, the LHS asymptotic covariance of `θ̂`. `R` must be PSD
/// up to `psd_tolerance`.
pub fn sandwich_lhs(
    a_hat: &DMatrix<f64>,
    r: &DMatrix<f64>,
    n: usize,
    psd_tolerance: f64,
) -> Result<DMatrix<f64>> {
    let (min_eigenvalue, _) = min_eigen(r);
    if min_eigenvalue < -psd_tolerance.abs() {
        return Err(Error::NonPsdInput {
            min_eigenvalue,
            tolerance: psd_tolerance.abs(),
        });
    }
    let a_inv = checked_inverse(a_hat)?;
    Ok(sandwich(&a_inv, r, n as f64))
}

/// Worst scaled discrepancy between `psi_dot` and central differences of
/// `psi`, `max ‖ψ̇ - FD(ψ)‖ / (1 + ‖ψ̇‖)` over `probes` random `(x, u, θ)`
/// (θ uniform in the box).
pub fn jacobian_check<P: ZProblem + ?Sized>(problem: &P, probes: usize, seed: &StreamKey) -> f64 {
    let d = problem.domain_dim();
    let q = problem.theta_dim();
    let bounds = problem.bounds();
    let mut s = seed.stream();
    let mut worst: f64 = 0.0;
    let mut jac = DMatrix::zeros(q, q);
    let mut plus = vec![0.0; q];
    let mut minus = vec![0.0; q];
    for _ in 0..probes {
        let x: Vec<f64> = (0..d).map(|_| s.next_f64()).collect();
        let u = s.next_f64();
        let theta: Vec<f64> = (0..q)
            .map(|k| bounds.lower()[k] + (bounds.upper()[k] - bounds.lower()[k]) * s.next_f64())
            .collect();
        problem.psi_dot(&x, u, &theta, &mut jac);
        let mut fd = DMatrix::zeros(q, q);
        for k in 0..q {
            let h = 1e-6 * (1.0 + theta[k].abs());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            problem.psi(&x, u, &tp, &mut plus);
            problem.psi(&x, u, &tm, &mut minus);
            for j in 0..q {
                fd[(j, k)] = (plus[j] - minus[j]) / (2.0 * h);
            }
        }
        worst = worst.max((&jac - &fd).norm() / (1.0 + jac.norm()));
    }
    worst
}

/// Empirical moments backing the regularity hypotheses of the CLT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCertificate {
    /// `E‖ψ_θ‖²`
    pub psi_second: f64,
    /// `E‖ψ_θ‖³`
    pub psi_third: f64,
    /// `E‖ψ̇_θ‖²`
    pub psi_dot_second: f64,
    /// `E[bound²]` for the `ψ̈` norm bound, when the problem provides one.
    pub psi_ddot_bound_second: Option<f64>,
    pub samples: usize,
}

/// Monte Carlo moments of `ψ_θ`, `ψ̇_θ` and the `ψ̈` bound over `n` i.i.d.
/// points.
pub fn moment_certificate<P: ZProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    n: usize,
    seed: &StreamKey,
) -> MomentCertificate {
    let d = problem.domain_dim();
    let q = problem.theta_dim();
    let mut s = seed.stream();
    let mut psi = vec![0.0; q];
    let mut jac = DMatrix::zeros(q, q);
    let (mut m2, mut m3, mut j2) = (0.0, 0.0, 0.0);
    let mut ddot: Option<f64> = None;
    let mut x = vec![0.0; d];
    for _ in 0..n {
        x.iter_mut().for_each(|v| *v = s.next_f64());
        let u = s.next_f64();
        problem.psi(&x, u, theta, &mut psi);
        let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
        m2 += norm * norm;
        m3 += norm * norm * norm;
        problem.psi_dot(&x, u, theta, &mut jac);
        j2 += jac.norm_squared();
        if let Some(b) = problem.psi_ddot_bound(&x, u) {
            *ddot.get_or_insert(0.0) += b * b;
        }
    }
    let nf = n as f64;
    MomentCertificate {
        psi_second: m2 / nf,
        psi_third: m3 / nf,
        psi_dot_second: j2 / nf,
        psi_ddot_bound_second: ddot.map(|v| v / nf),
        samples: n,
    }
}

/// Monte Carlo `E[ψ̇_θ(X, U)]` over `n` i.i.d. points, in fixed-size chunks
/// reduced in order (thread-count independent).
pub fn expected_jacobian<P: ZProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    n: usize,
    seed: &StreamKey,
) -> Result<DMatrix<f64>> {
    const CHUNK: usize = 4096;
    if n == 0 {
        return Err(Error::invalid("n", "need at least one Monte Carlo point"));
    }
    let d = problem.domain_dim();
    let q = problem.theta_dim();
    let partials: Vec<DMatrix<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(n - start);
            let mut streams: Vec<_> = (0..=d)
                .map(|col| {
                    let mut s = seed.with_column(col as u64).stream();
                    s.seek(start as u64);
                    s
                })
                .collect();
            let mut acc = DMatrix::zeros(q, q);
            let mut jac = DMatrix::zeros(q, q);
            let mut x = vec![0.0; d];
            for _ in 0..len {
                for (xc, s) in x.iter_mut().zip(streams.iter_mut()) {
                    *xc = s.next_f64();
                }
                let u = streams[d].next_f64();
                problem.psi_dot(&x, u, theta, &mut jac);
                acc += &jac;
            }
            acc
        })
        .collect();
    let sum = partials
        .into_iter()
        .fold(DMatrix::zeros(q, q), |acc, m| acc + m);
    let a = sum / n as f64;
    if a.iter().all(|v| v.is_finite()) {
        Ok(a)
    } else {
        Err(non_finite("expected Jacobian"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::generate;
    use crate::rngperm::Purpose;

    fn location(d: usize) -> LocationProblem {
        LocationProblem::new(d, ParamBox::cube(d, -1.0, 2.0).unwrap()).unwrap()
    }

    fn rows(v: &[f64]) -> DesignMatrix {
        DesignMatrix::from_rows(
            &v.iter().map(|&x| vec![x]).collect::<Vec<_>>(),
            1,
            Method::Iid,
        )
        .unwrap()
    }

    #[test]
    fn psi_bar_centered() {
        let x = rows(&[0.2, 0.4, 0.6, 0.8]);
        let p = psi_bar(&location(1), &x, &[0.0; 4], &[0.5]).unwrap();
        assert!(p[0].abs() < 1e-15);
        let p = psi_bar(&location(1), &x, &[0.0; 4], &[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn psi_bar_checks_theta_in_box() {
        let x = rows(&[0.2]);
        assert!(psi_bar(&location(1), &x, &[0.0], &[5.0]).is_err());
        assert!(psi_bar(&location(1), &x, &[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn affine_problem_converges_in_one_step() {
        let x = generate(Method::Lhs, 50, 3, &StreamKey::new(4, Purpose::Jitter)).unwrap();
        let fit = solve(
            &location(3),
            &x,
            &vec![0.0; 50],
            None,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        let mean = x.mean();
        for (t, m) in fit.theta_hat.iter().zip(&mean) {
            assert!((t - m).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_rows_are_singular() {
        let x = DesignMatrix::from_rows(&vec![vec![0.3, 0.7]; 10], 2, Method::Iid).unwrap();
        // ψ̇ = -x xᵀ, rank one.
        struct Gauss(ParamBox);
        impl ZProblem for Gauss {
            fn theta_dim(&self) -> usize {
                2
            }
            fn domain_dim(&self) -> usize {
                2
            }
            fn bounds(&self) -> &ParamBox {
                &self.0
            }
            fn psi(&self, x: &[f64], aux: f64, t: &[f64], out: &mut [f64]) {
                let r = aux - x[0] * t[0] - x[1] * t[1];
                out[0] = r * x[0];
                out[1] = r * x[1];
            }
            fn psi_dot(&self, x: &[f64], _: f64, _: &[f64], out: &mut DMatrix<f64>) {
                for j in 0..2 {
                    for k in 0..2 {
                        out[(j, k)] = -x[j] * x[k];
                    }
                }
            }
        }
        let p = Gauss(ParamBox::cube(2, -5.0, 5.0).unwrap());
        let err = solve(&p, &x, &[0.5; 10], None, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }));
    }

    #[test]
    fn sandwich_of_mean() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0 / 12.0);
        let s = sandwich_iid(&a, &b, 10).unwrap();
        assert!((s[(0, 0)] - 1.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn sandwich_componentwise() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let s = sandwich_iid(&a, &b, 100).unwrap();
        assert!((s[(0, 0)] - 0.01).abs() < 1e-15);
        assert!((s[(1, 1)] - 0.04).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn sandwich_lhs_cases() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.3, -1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let iid = sandwich_iid(&a, &b, 7).unwrap();
        let lhs = sandwich_lhs(&a, &b, 7, 1e-12).unwrap();
        assert!((iid - lhs).norm() < 1e-15);
        let zero = sandwich_lhs(&a, &DMatrix::zeros(2, 2), 7, 1e-12).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(
            sandwich_lhs(&a, &neg, 7, 1e-3),
            Err(Error::NonPsdInput { .. })
        ));
    }

    #[test]
    fn location_jacobian_matches_differences() {
        let err = jacobian_check(&location(3), 100, &StreamKey::new(1, Purpose::Oracle));
        assert!(err < 1e-8);
    }

    #[test]
    fn param_box_validation() {
        assert!(ParamBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(ParamBox::new(vec![0.0], vec![f64::INFINITY]).is_err());
        let b = ParamBox::cube(2, -1.0, 3.0).unwrap();
        assert_eq!(b.center(), vec![1.0, 1.0]);
        let mut t = vec![-4.0, 9.0];
        b.project(&mut t);
        assert_eq!(t, vec![-1.0, 3.0]);
    }
}
