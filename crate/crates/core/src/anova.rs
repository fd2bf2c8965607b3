//! Main-effect decomposition of a vector-valued function of the unit cube.
//!
//! For `g: [0,1]^d -> R^q` with mean `G`, the main effect of coordinate `j`
//! is `g_j(x_j) = E[g(X) - G | X_j = x_j]` and the remainder is
//! `g_rem = g - G - Σ_j g_j`. The remainder covariance
//! `R = E[g_rem g_remᵀ]` is the scale of `n · Cov(mean of g)` under LHS,
//! while `Cov(g) = R + Σ_j E[g_j g_jᵀ]` is the i.i.d. scale.
//!
//! Main effects are estimated on a `K`-bin midpoint grid with `m` inner Monte
//! Carlo samples per bin and read back by linear interpolation. `R` is then a
//! Monte Carlo average over `N` outer i.i.d. points. The inner noise inflates
//! both `R` and the main-effect second moments by a known amount (the
//! per-bin sampling variance), which is subtracted.
//!
//! Fields may consume one auxiliary uniform per evaluation (response noise).
//! The decomposition conditions on the `d` structural coordinates only, so
//! auxiliary randomness ends up in the remainder. [`StratifiedAux`] promotes
//! the auxiliary coordinate to a regular input instead.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::min_eigen;
use crate::rngperm::StreamKey;

const CHUNK: usize = 4096;
const OUTER_LABEL: u64 = 0x006f_7574_6572;
const INNER_LABEL: u64 = 0x0069_6e6e_6572;
const AUX_LABEL: u64 = 0x0061_7578;

/// A `q`-valued function of a point in `[0,1]^d` and one auxiliary uniform.
pub trait VectorField: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn uses_auxiliary(&self) -> bool {
        false
    }
    /// Write `g(x, aux)` into `out` (length `output_dim`).
    fn eval(&self, x: &[f64], aux: f64, out: &mut [f64]);
}

type FieldFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// Closure-backed field.
pub struct FnField {
    d: usize,
    q: usize,
    uses_aux: bool,
    f: Box<FieldFn>,
}

impl FnField {
    pub fn new(
        d: usize,
        q: usize,
        uses_aux: bool,
        f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FnField {
            d,
            q,
            uses_aux,
            f: Box::new(f),
        }
    }

    /// Scalar field of the structural coordinates only.
    pub fn scalar(d: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(d, 1, false, move |x, _, out| out[0] = f(x))
    }
}

impl VectorField for FnField {
    fn input_dim(&self) -> usize {
        self.d
    }
    fn output_dim(&self) -> usize {
        self.q
    }
    fn uses_auxiliary(&self) -> bool {
        self.uses_aux
    }
    fn eval(&self, x: &[f64], aux: f64, out: &mut [f64]) {
        (self.f)(x, aux, out)
    }
}

/// Treats the auxiliary uniform as input coordinate `d + 1`, so it is
/// stratified under LHS and gets its own main effect.
pub struct StratifiedAux<'a, F: VectorField + ?Sized>(pub &'a F);

impl<F: VectorField + ?Sized> VectorField for StratifiedAux<'_, F> {
    fn input_dim(&self) -> usize {
        self.0.input_dim() + 1
    }
    fn output_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn eval(&self, x: &[f64], _aux: f64, out: &mut [f64]) {
        let d = self.0.input_dim();
        self.0.eval(&x[..d], x[d], out)
    }
}

fn eval_checked<F: VectorField + ?Sized>(
    f: &F,
    x: &[f64],
    aux: f64,
    out: &mut [f64],
) -> Result<()> {
    f.eval(x, aux, out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteValue {
            context: format!("vector field at x = {x:?}, aux = {aux}"),
        })
    }
}

/// Source of outer Monte Carlo points: i.i.d. draws or rows of a given design.
#[derive(Clone, Copy)]
pub enum OuterPoints<'a> {
    Iid {
        key: StreamKey,
        count: usize,
    },
    Design {
        design: &'a DesignMatrix,
        aux_key: StreamKey,
    },
}

impl OuterPoints<'_> {
    fn count(&self) -> usize {
        match self {
            OuterPoints::Iid { count, .. } => *count,
            OuterPoints::Design { design, .. } => design.n(),
        }
    }

    /// Rows `start..start+len`, each `d` coordinates followed by the auxiliary
    /// uniform. Stream positions depend only on the row index.
    fn chunk(&self, d: usize, start: usize, len: usize) -> Vec<f64> {
        let width = d + 1;
        let mut buf = vec![0.0; len * width];
        match self {
            OuterPoints::Iid { key, .. } => {
                for c in 0..width {
                    let mut s = key.with_column(c as u64).stream();
                    s.seek(start as u64);
                    for i in 0..len {
                        buf[i * width + c] = s.next_f64();
                    }
                }
            }
            OuterPoints::Design { design, aux_key } => {
                let mut s = aux_key.stream();
                s.seek(start as u64);
                for i in 0..len {
                    buf[i * width..i * width + d].copy_from_slice(design.row(start + i));
                    buf[i * width + d] = s.next_f64();
                }
            }
        }
        buf
    }
}

/// Monte Carlo mean with per-component standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub samples: usize,
}

/// Sums shifted by the first evaluation so a constant field gives its value
/// back exactly, with zero spread.
fn mean_over<F: VectorField + ?Sized>(f: &F, points: OuterPoints<'_>) -> Result<MeanEstimate> {
    let d = f.input_dim();
    let q = f.output_dim();
    let n = points.count();
    let mut shift = vec![0.0; q];
    let first = points.chunk(d, 0, 1);
    eval_checked(f, &first[..d], first[d], &mut shift)?;

    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(n - start);
            let pts = points.chunk(d, start, len);
            let mut s1 = vec![0.0; q];
            let mut s2 = vec![0.0; q];
            let mut out = vec![0.0; q];
            for row in pts.chunks_exact(d + 1) {
                eval_checked(f, &row[..d], row[d], &mut out)?;
                for k in 0..q {
                    let v = out[k] - shift[k];
                    s1[k] += v;
                    s2[k] += v * v;
                }
            }
            Ok((s1, s2))
        })
        .collect();

    let mut s1 = vec![0.0; q];
    let mut s2 = vec![0.0; q];
    for chunk in chunks {
        let (a, b) = chunk?;
        for k in 0..q {
            s1[k] += a[k];
            s2[k] += b[k];
        }
    }
    let nf = n as f64;
    let mut mean = vec![0.0; q];
    let mut std_error = vec![0.0; q];
    for k in 0..q {
        let m = s1[k] / nf;
        mean[k] = shift[k] + m;
        let var = ((s2[k] - nf * m * m) / (nf - 1.0)).max(0.0);
        std_error[k] = (var / nf).sqrt();
    }
    Ok(MeanEstimate {
        mean,
        std_error,
        samples: n,
    })
}

/// Monte Carlo estimate of `E[f(X, U)]` from `n_mc` i.i.d. draws.
pub fn grand_mean<F: VectorField + ?Sized>(
    f: &F,
    n_mc: usize,
    seed: &StreamKey,
) -> Result<MeanEstimate> {
    if n_mc < 2 {
        return Err(Error::invalid(
            "n_mc",
            "need at least 2 Monte Carlo samples",
        ));
    }
    mean_over(
        f,
        OuterPoints::Iid {
            key: *seed,
            count: n_mc,
        },
    )
}

/// Main effect of one coordinate tabulated at bin midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MainEffect {
    pub coordinate: usize,
    /// `values[k]` estimates `E[f - G | X_j = (k + 1/2) / K]`.
    pub values: Vec<Vec<f64>>,
    /// Sampling covariance of each `values[k]` (inner covariance / m).
    pub noise_cov: Vec<DMatrix<f64>>,
    pub inner: usize,
}

impl MainEffect {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.bins() as f64
    }

    /// Left bin and weight of the right bin for linear interpolation;
    /// extrapolates linearly outside the outermost midpoints.
    fn locate(&self, x: f64) -> (usize, f64) {
        let k = self.bins();
        let t = x * k as f64 - 0.5;
        let left = (t.floor().max(0.0) as usize).min(k - 2);
        (left, t - left as f64)
    }

    /// Interpolated main effect at `x`, written into `out`.
    pub fn value_at(&self, x: f64, out: &mut [f64]) {
        let (k, w) = self.locate(x);
        for (o, (a, b)) in out
            .iter_mut()
            .zip(self.values[k].iter().zip(&self.values[k + 1]))
        {
            *o = (1.0 - w) * a + w * b;
        }
    }

    /// Adds the sampling covariance of the interpolated value at `x` to `acc`.
    fn add_noise_at(&self, x: f64, acc: &mut DMatrix<f64>) {
        let (k, w) = self.locate(x);
        *acc += &self.noise_cov[k] * ((1.0 - w) * (1.0 - w)) + &self.noise_cov[k + 1] * (w * w);
    }

    /// Midpoint-rule `∫ g_j g_jᵀ dx_j` with the inner-noise bias removed,
    /// and the inner-sampling variance of each entry.
    fn second_moment(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let q = self.values[0].len();
        let kf = self.bins() as f64;
        let mut m = DMatrix::zeros(q, q);
        let mut var = DMatrix::zeros(q, q);
        for (v, cov) in self.values.iter().zip(&self.noise_cov) {
            for a in 0..q {
                for b in 0..q {
                    m[(a, b)] += (v[a] * v[b] - cov[(a, b)]) / kf;
                    var[(a, b)] += (v[a] * v[a] * cov[(b, b)]
                        + v[b] * v[b] * cov[(a, a)]
                        + 2.0 * v[a] * v[b] * cov[(a, b)]
                        + cov[(a, a)] * cov[(b, b)]
                        + cov[(a, b)] * cov[(a, b)])
                        / (kf * kf);
                }
            }
        }
        (m, var)
    }

    /// Inner-sampling variance of `∫ ε ε_ᵀ` where ε is the interpolation noise.
    fn noise_square_variance(&self) -> DMatrix<f64> {
        let q = self.values[0].len();
        let kf = self.bins() as f64;
        let mut var = DMatrix::zeros(q, q);
        for cov in &self.noise_cov {
            for a in 0..q {
                for b in 0..q {
                    var[(a, b)] +=
                        (cov[(a, a)] * cov[(b, b)] + cov[(a, b)] * cov[(a, b)]) / (kf * kf);
                }
            }
        }
        var
    }
}

/// Estimate the main effect of coordinate `j` (0-based) on `bins` midpoints,
/// each from `inner` draws of the other coordinates and the auxiliary.
/// `grand_mean` is subtracted from every bin.
pub fn main_effect<F: VectorField + ?Sized>(
    f: &F,
    j: usize,
    bins: usize,
    inner: usize,
    grand_mean: &[f64],
    seed: &StreamKey,
) -> Result<MainEffect> {
    let d = f.input_dim();
    let q = f.output_dim();
    if j >= d {
        return Err(Error::invalid(
            "j",
            format!("coordinate {j} out of range for d = {d}"),
        ));
    }
    if bins < 2 {
        return Err(Error::invalid("bins", "need at least 2 bins"));
    }
    if inner < 2 {
        return Err(Error::invalid("inner", "need at least 2 inner samples"));
    }
    if grand_mean.len() != q {
        return Err(Error::invalid(
            "grand_mean",
            format!("length {} != q = {q}", grand_mean.len()),
        ));
    }

    let tables: Vec<Result<(Vec<f64>, DMatrix<f64>)>> = (0..bins)
        .into_par_iter()
        .map(|k| {
            let xj = (k as f64 + 0.5) / bins as f64;
            let bin_key = seed.with_replication(k as u64);
            let mut streams: Vec<_> = (0..=d)
                .map(|c| bin_key.with_column(c as u64).stream())
                .collect();
            let mut x = vec![0.0; d];
            let mut out = vec![0.0; q];
            let mut shift = vec![0.0; q];
            let mut s1 = vec![0.0; q];
            let mut s2 = DMatrix::<f64>::zeros(q, q);
            for s in 0..inner {
                for (c, xc) in x.iter_mut().enumerate() {
                    let u = streams[c].next_f64();
                    *xc = if c == j { xj } else { u };
                }
                let aux = streams[d].next_f64();
                eval_checked(f, &x, aux, &mut out)?;
                if s == 0 {
                    shift.copy_from_slice(&out);
                }
                for a in 0..q {
                    let va = out[a] - shift[a];
                    s1[a] += va;
                    for b in 0..=a {
                        s2[(a, b)] += va * (out[b] - shift[b]);
                    }
                }
            }
            let m = inner as f64;
            let mean: Vec<f64> = s1.iter().map(|v| v / m).collect();
            let mut cov = DMatrix::zeros(q, q);
            for a in 0..q {
                for b in 0..=a {
                    let c = (s2[(a, b)] - m * mean[a] * mean[b]) / (m - 1.0) / m;
                    cov[(a, b)] = c;
                    cov[(b, a)] = c;
                }
            }
            let values = (0..q)
                .map(|a| (shift[a] - grand_mean[a]) + mean[a])
                .collect();
            Ok((values, cov))
        })
        .collect();

    let mut values = Vec::with_capacity(bins);
    let mut noise_cov = Vec::with_capacity(bins);
    for t in tables {
        let (v, c) = t?;
        values.push(v);
        noise_cov.push(c);
    }
    Ok(MainEffect {
        coordinate: j,
        values,
        noise_cov,
        inner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionSettings {
    /// Outer i.i.d. points `N`.
    pub outer: usize,
    /// Bins per main-effect grid `K`.
    pub bins: usize,
    /// Inner samples per bin `m`.
    pub inner: usize,
}

impl Default for DecompositionSettings {
    fn default() -> Self {
        DecompositionSettings {
            outer: 100_000,
            bins: 64,
            inner: 2048,
        }
    }
}

impl DecompositionSettings {
    fn validate(&self, outer: usize) -> Result<()> {
        if outer < 100 {
            return Err(Error::invalid("outer", "need at least 100 outer points"));
        }
        if self.bins < 2 {
            return Err(Error::invalid("bins", "need at least 2 bins"));
        }
        if self.inner < 2 {
            return Err(Error::invalid("inner", "need at least 2 inner samples"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub grand_mean: MeanEstimate,
    pub main_effects: Vec<MainEffect>,
    /// `∫ g_j g_jᵀ dx_j` per coordinate.
    pub main_effect_moments: Vec<DMatrix<f64>>,
    /// Remainder covariance `R`.
    pub remainder: DMatrix<f64>,
    /// `Cov(g)` under i.i.d. sampling.
    pub full_cov: DMatrix<f64>,
    /// `full_cov - Σ_j A_j - R`; zero up to Monte Carlo error.
    pub residual: DMatrix<f64>,
    /// Standard errors of the entries of `R`.
    pub standard_errors: DMatrix<f64>,
    /// Standard errors of the entries of `residual`.
    pub residual_standard_errors: DMatrix<f64>,
    pub settings: DecompositionSettings,
    pub min_eigenvalue: f64,
    pub psd_tolerance: f64,
}

impl DecompositionReport {
    pub fn dim(&self) -> usize {
        self.remainder.nrows()
    }

    /// Smallest eigenvalue of `R` within its Monte Carlo noise floor of zero
    /// or above.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -self.psd_tolerance
    }
}

/// Estimate `R`, `Cov(g)` and the main-effect moments from `settings.outer`
/// i.i.d. outer points.
pub fn remainder_covariance<F: VectorField + ?Sized>(
    f: &F,
    settings: &DecompositionSettings,
    seed: &StreamKey,
) -> Result<DecompositionReport> {
    settings.validate(settings.outer)?;
    let outer = OuterPoints::Iid {
        key: seed.subkey(OUTER_LABEL),
        count: settings.outer,
    };
    decompose_with(f, settings, outer, seed)
}

/// As [`remainder_covariance`] but with the outer points taken from `design`
/// (whose rows should be an i.i.d. sample); auxiliary uniforms still come
/// from `seed`.
pub fn remainder_covariance_on<F: VectorField + ?Sized>(
    f: &F,
    design: &DesignMatrix,
    settings: &DecompositionSettings,
    seed: &StreamKey,
) -> Result<DecompositionReport> {
    if design.d() != f.input_dim() {
        return Err(Error::invalid(
            "design",
            format!(
                "design has {} columns, field expects {}",
                design.d(),
                f.input_dim()
            ),
        ));
    }
    settings.validate(design.n())?;
    let outer = OuterPoints::Design {
        design,
        aux_key: seed.subkey(AUX_LABEL),
    };
    let mut s = *settings;
    s.outer = design.n();
    decompose_with(f, &s, outer, seed)
}

struct OuterSums {
    full: DMatrix<f64>,
    rem: DMatrix<f64>,
    rem_sq: DMatrix<f64>,
    diff: DMatrix<f64>,
    diff_sq: DMatrix<f64>,
    noise: DMatrix<f64>,
}

impl OuterSums {
    fn zeros(q: usize) -> Self {
        OuterSums {
            full: DMatrix::zeros(q, q),
            rem: DMatrix::zeros(q, q),
            rem_sq: DMatrix::zeros(q, q),
            diff: DMatrix::zeros(q, q),
            diff_sq: DMatrix::zeros(q, q),
            noise: DMatrix::zeros(q, q),
        }
    }

    fn add(&mut self, o: &OuterSums) {
        self.full += &o.full;
        self.rem += &o.rem;
        self.rem_sq += &o.rem_sq;
        self.diff += &o.diff;
        self.diff_sq += &o.diff_sq;
        self.noise += &o.noise;
    }
}

fn decompose_with<F: VectorField + ?Sized>(
    f: &F,
    settings: &DecompositionSettings,
    outer: OuterPoints<'_>,
    seed: &StreamKey,
) -> Result<DecompositionReport> {
    let d = f.input_dim();
    let q = f.output_dim();
    let n = outer.count();
    let grand = mean_over(f, outer)?;
    let g = &grand.mean;

    let main_effects = (0..d)
        .map(|j| {
            main_effect(
                f,
                j,
                settings.bins,
                settings.inner,
                g,
                &seed.subkey(INNER_LABEL).with_column(j as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let partials: Vec<Result<OuterSums>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let len = CHUNK.min(n - start);
            let pts = outer.chunk(d, start, len);
            let mut sums = OuterSums::zeros(q);
            let mut out = vec![0.0; q];
            let mut effect = vec![0.0; q];
            let mut rem = vec![0.0; q];
            for row in pts.chunks_exact(d + 1) {
                eval_checked(f, &row[..d], row[d], &mut out)?;
                for (o, gk) in out.iter_mut().zip(g) {
                    *o -= gk;
                }
                rem.copy_from_slice(&out);
                for me in &main_effects {
                    let xj = row[me.coordinate];
                    me.value_at(xj, &mut effect);
                    for k in 0..q {
                        rem[k] -= effect[k];
                    }
                    me.add_noise_at(xj, &mut sums.noise);
                }
                for a in 0..q {
                    for b in 0..q {
                        let full = out[a] * out[b];
                        let r = rem[a] * rem[b];
                        sums.full[(a, b)] += full;
                        sums.rem[(a, b)] += r;
                        sums.rem_sq[(a, b)] += r * r;
                        sums.diff[(a, b)] += full - r;
                        sums.diff_sq[(a, b)] += (full - r) * (full - r);
                    }
                }
            }
            Ok(sums)
        })
        .collect();

    let mut sums = OuterSums::zeros(q);
    for p in partials {
        sums.add(&p?);
    }

    let nf = n as f64;
    let full_cov = &sums.full / nf;
    let remainder = crate::linalg::symmetrize(&((&sums.rem - &sums.noise) / nf));

    let mut main_effect_moments = Vec::with_capacity(d);
    let mut inner_var_a = DMatrix::zeros(q, q);
    let mut inner_var_r = DMatrix::zeros(q, q);
    for me in &main_effects {
        let (m, var) = me.second_moment();
        main_effect_moments.push(m);
        inner_var_a += var;
        inner_var_r += me.noise_square_variance();
    }
    let sum_a = main_effect_moments
        .iter()
        .fold(DMatrix::zeros(q, q), |acc, m| acc + m);
    let residual = &full_cov - &sum_a - &remainder;

    let mut standard_errors = DMatrix::zeros(q, q);
    let mut residual_standard_errors = DMatrix::zeros(q, q);
    for a in 0..q {
        for b in 0..q {
            let mr = sums.rem[(a, b)] / nf;
            let outer_var_r = (sums.rem_sq[(a, b)] / nf - mr * mr).max(0.0) / nf;
            standard_errors[(a, b)] = (outer_var_r + inner_var_r[(a, b)]).sqrt();
            let md = sums.diff[(a, b)] / nf;
            let outer_var_d = (sums.diff_sq[(a, b)] / nf - md * md).max(0.0) / nf;
            residual_standard_errors[(a, b)] =
                (outer_var_d + inner_var_a[(a, b)] + inner_var_r[(a, b)]).sqrt();
        }
    }

    let scale = (0..q).map(|a| full_cov[(a, a)].abs()).fold(0.0, f64::max);
    for a in 0..q {
        for b in 0..q {
            let se = residual_standard_errors[(a, b)];
            let r = residual[(a, b)];
            if r.abs() > 10.0 * se + 1e-12 * scale {
                return Err(Error::DegenerateDecomposition {
                    row: a,
                    col: b,
                    residual: r,
                    std_error: se,
                });
            }
        }
    }

    let (min_eigenvalue, v) = min_eigen(&remainder);
    let mut eig_var = 0.0;
    for a in 0..q {
        for b in 0..q {
            eig_var += (v[a] * v[b]).powi(2) * standard_errors[(a, b)].powi(2);
        }
    }
    let psd_tolerance = 1e-8 * remainder.trace().abs() + 3.0 * eig_var.sqrt();

    Ok(DecompositionReport {
        grand_mean: grand,
        main_effects,
        main_effect_moments,
        remainder,
        full_cov,
        residual,
        standard_errors,
        residual_standard_errors,
        settings: DecompositionSettings {
            outer: n,
            ..*settings
        },
        min_eigenvalue,
        psd_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngperm::Purpose;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Purpose::Oracle)
    }

    fn product() -> FnField {
        FnField::scalar(2, |x| x[0] * x[1])
    }

    #[test]
    fn grand_mean_of_product() {
        let m = grand_mean(&product(), 1_000_000, &key(1)).unwrap();
        assert!((m.mean[0] - 0.25).abs() < 0.002);
        assert!(m.std_error[0] > 0.0 && m.std_error[0] < 1e-3);
    }

    #[test]
    fn grand_mean_of_constant_is_exact() {
        let f = FnField::scalar(3, |_| 0.1);
        let m = grand_mean(&f, 10_000, &key(2)).unwrap();
        assert_eq!(m.mean[0], 0.1);
        assert_eq!(m.std_error[0], 0.0);
    }

    #[test]
    fn grand_mean_of_identity() {
        let f = FnField::scalar(1, |x| x[0]);
        let m = grand_mean(&f, 100_000, &key(3)).unwrap();
        assert!((m.mean[0] - 0.5).abs() < 4.0 * m.std_error[0]);
    }

    #[test]
    fn grand_mean_rejects_non_finite() {
        let f = FnField::scalar(1, |x| 1.0 / (x[0] - x[0]));
        assert!(matches!(
            grand_mean(&f, 10, &key(3)),
            Err(Error::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn grand_mean_needs_two_samples() {
        assert!(grand_mean(&product(), 1, &key(3)).is_err());
    }

    #[test]
    fn main_effect_of_product() {
        let me = main_effect(&product(), 0, 16, 20_000, &[0.25], &key(4)).unwrap();
        for k in 0..16 {
            let x = me.midpoint(k);
            let se = me.noise_cov[k][(0, 0)].sqrt();
            assert!((me.values[k][0] - (x / 2.0 - 0.25)).abs() < 4.0 * se + 1e-12);
        }
    }

    #[test]
    fn main_effect_of_unrelated_coordinate_is_zero() {
        let f = FnField::scalar(2, |x| x[0] * x[0]);
        let me = main_effect(&f, 1, 8, 5000, &[1.0 / 3.0], &key(5)).unwrap();
        for k in 0..8 {
            let se = me.noise_cov[k][(0, 0)].sqrt();
            assert!(me.values[k][0].abs() < 4.0 * se);
        }
    }

    #[test]
    fn main_effect_of_constant_is_exactly_zero() {
        let f = FnField::scalar(2, |_| 0.7);
        let me = main_effect(&f, 0, 4, 100, &[0.7], &key(6)).unwrap();
        assert!(me.values.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn main_effect_argument_checks() {
        assert!(main_effect(&product(), 2, 4, 10, &[0.0], &key(1)).is_err());
        assert!(main_effect(&product(), 0, 1, 10, &[0.0], &key(1)).is_err());
        assert!(main_effect(&product(), 0, 4, 1, &[0.0], &key(1)).is_err());
    }

    #[test]
    fn interpolation_reproduces_linear_effects() {
        let me = MainEffect {
            coordinate: 0,
            values: (0..4)
                .map(|k| vec![2.0 * (k as f64 + 0.5) / 4.0 - 1.0])
                .collect(),
            noise_cov: vec![DMatrix::zeros(1, 1); 4],
            inner: 2,
        };
        let mut out = [0.0];
        for x in [0.0, 0.05, 0.3, 0.61, 0.99] {
            me.value_at(x, &mut out);
            assert!((out[0] - (2.0 * x - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn remainder_of_product() {
        let r =
            remainder_covariance(&product(), &DecompositionSettings::default(), &key(7)).unwrap();
        let exact = 1.0 / 144.0;
        assert!(
            (r.remainder[(0, 0)] - exact).abs() < 0.05 * exact,
            "{}",
            r.remainder
        );
        assert!((r.full_cov[(0, 0)] - 7.0 / 144.0).abs() < 0.05 * 7.0 / 144.0);
        assert!(r.is_psd());
    }

    #[test]
    fn additive_function_has_no_remainder() {
        let f = FnField::scalar(2, |x| x[0] + x[1]);
        let r = remainder_covariance(&f, &DecompositionSettings::default(), &key(8)).unwrap();
        assert!(
            r.remainder[(0, 0)].abs() < 3.0 * r.standard_errors[(0, 0)],
            "R = {} se = {}",
            r.remainder[(0, 0)],
            r.standard_errors[(0, 0)]
        );
    }

    #[test]
    fn constant_has_zero_remainder() {
        let f = FnField::new(2, 2, false, |_, _, out| {
            out[0] = 3.0;
            out[1] = -1.5;
        });
        let r = remainder_covariance(
            &f,
            &DecompositionSettings {
                outer: 1000,
                bins: 4,
                inner: 8,
            },
            &key(9),
        )
        .unwrap();
        assert!(r.remainder.iter().all(|&v| v == 0.0));
        assert!(r.full_cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn settings_are_validated() {
        let bad = DecompositionSettings {
            outer: 99,
            bins: 4,
            inner: 8,
        };
        assert!(remainder_covariance(&product(), &bad, &key(1)).is_err());
    }

    #[test]
    fn auxiliary_noise_lands_in_remainder() {
        // g = x + (u - 1/2): the noise term has no main effect in x.
        let f = FnField::new(1, 1, true, |x, u, out| out[0] = x[0] + (u - 0.5));
        let r = remainder_covariance(&f, &DecompositionSettings::default(), &key(10)).unwrap();
        assert!((r.remainder[(0, 0)] - 1.0 / 12.0).abs() < 0.03 / 12.0);
        assert!((r.main_effect_moments[0][(0, 0)] - 1.0 / 12.0).abs() < 0.03 / 12.0);

        let strat = StratifiedAux(&f);
        let r = remainder_covariance(&strat, &DecompositionSettings::default(), &key(10)).unwrap();
        assert!(r.remainder[(0, 0)].abs() < 3.0 * r.standard_errors[(0, 0)]);
    }

    #[test]
    fn coarse_grid_is_flagged() {
        // A sharp main effect that two bins cannot follow.
        let f = FnField::scalar(1, |x| (40.0 * x[0]).sin());
        let s = DecompositionSettings {
            outer: 100_000,
            bins: 2,
            inner: 64,
        };
        assert!(matches!(
            remainder_covariance(&f, &s, &key(11)),
            Err(Error::DegenerateDecomposition { .. })
        ));
    }
}
