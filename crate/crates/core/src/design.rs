//! Latin hypercube and i.i.d. designs on the unit cube.
//!
//! An LHS column of size `n` is built from an independent permutation `π` of
//! `1..=n` and independent jitters `u`, placing point `i` at
//! `(π(i) - 1 + u_i) / n`. Strata are half-open, `[(k-1)/n, k/n)`, so no point
//! lands on 1.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::rngperm::{random_permutation, Purpose, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lhs,
    Iid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lhs => "lhs",
            Method::Iid => "iid",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lhs" => Ok(Method::Lhs),
            "iid" => Ok(Method::Iid),
            other => Err(Error::Parse(format!(
                "unknown sampling method `{other}` (expected lhs or iid)"
            ))),
        }
    }
}

/// Where a design's values live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Support {
    UnitCube,
    /// Mapped through per-coordinate quantile functions with these labels.
    Marginals(Vec<String>),
    /// Read from a file; no provenance beyond the values.
    External,
}

/// `n x d` sample matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    points: Vec<f64>,
    n: usize,
    d: usize,
    method: Method,
    seed: Option<StreamKey>,
    support: Support,
}

impl DesignMatrix {
    /// Wrap externally produced unit-cube points. Values must lie in [0, 1].
    pub fn from_rows(rows: &[Vec<f64>], d: usize, method: Method) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        let mut points = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::invalid(
                    "rows",
                    format!("row {i} has {} entries, expected {d}", row.len()),
                ));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(
                    "rows",
                    format!("row {i} has value {v} outside [0, 1]"),
                ));
            }
            points.extend_from_slice(row);
        }
        Ok(DesignMatrix {
            points,
            n: rows.len(),
            d,
            method,
            seed: None,
            support: Support::External,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> Option<&StreamKey> {
        self.seed.as_ref()
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.d)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.points[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Row-major values.
    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for row in self.rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.n as f64);
        m
    }

    /// Write as CSV: header `x1,...,xd`, one row per point, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.d).map(|j| format!("x{j}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Read a CSV produced by [`DesignMatrix::write_csv`] (or any CSV with an
    /// `x1..xd` header and unit-cube values).
    pub fn read_csv<R: BufRead>(input: R, method: Method) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty design file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let d = header.split(',').count();
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: `{c}`: {e}", lineno + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows, d, method)
    }
}

/// Stratum index of `x` among `n` equal strata of [0, 1).
pub fn stratum_of(x: f64, n: usize) -> usize {
    (x * n as f64).floor() as usize
}

/// Point inside stratum `k` (1-based) of `n`, offset by jitter `u` in [0, 1).
/// Nudged by one ulp where rounding would push it across a stratum edge.
fn place_in_stratum(k: usize, u: f64, n: usize) -> f64 {
    let mut x = ((k - 1) as f64 + u) / n as f64;
    while stratum_of(x, n) >= k {
        x = x.next_down();
    }
    while stratum_of(x, n) < k - 1 {
        x = x.next_up();
    }
    x
}

/// Generate an `n x d` design. Column `j` draws its permutation from
/// `seed` with purpose `Permutation` and column `j`, and its jitter from
/// purpose `Jitter`, column `j`; the caller's purpose field is ignored.
pub fn generate(method: Method, n: usize, d: usize, seed: &StreamKey) -> Result<DesignMatrix> {
    if n == 0 {
        return Err(Error::invalid("n", "sample size must be at least 1"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    let mut points = vec![0.0; n * d];
    for j in 0..d {
        let jitter_key = seed.with_purpose(Purpose::Jitter).with_column(j as u64);
        let mut jitter = jitter_key.stream();
        match method {
            Method::Lhs => {
                let perm_key = seed
                    .with_purpose(Purpose::Permutation)
                    .with_column(j as u64);
                let perm = random_permutation(&perm_key, n);
                for (i, &k) in perm.iter().enumerate() {
                    points[i * d + j] = place_in_stratum(k, jitter.next_f64(), n);
                }
            }
            Method::Iid => {
                for i in 0..n {
                    points[i * d + j] = jitter.next_f64();
                }
            }
        }
    }
    Ok(DesignMatrix {
        points,
        n,
        d,
        method,
        seed: Some(*seed),
        support: Support::UnitCube,
    })
}

/// A monotone quantile function for one coordinate.
#[derive(Clone)]
pub struct MarginalSpec {
    pub label: String,
    quantile: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for MarginalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarginalSpec")
            .field("label", &self.label)
            .finish()
    }
}

impl MarginalSpec {
    pub fn new(
        label: impl Into<String>,
        quantile: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        MarginalSpec {
            label: label.into(),
            quantile: Arc::new(quantile),
        }
    }

    pub fn identity() -> Self {
        Self::new("uniform(0,1)", |u| u)
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        Self::new(format!("uniform({lo},{hi})"), move |u| lo + (hi - lo) * u)
    }

    pub fn standard_normal() -> Self {
        Self::new("normal(0,1)", crate::stats::normal_quantile_unchecked)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        (self.quantile)(u)
    }

    /// Probe 1024 interior points for monotonicity and finiteness.
    fn check(&self) -> Result<()> {
        const PROBES: usize = 1024;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..PROBES {
            let u = (i as f64 + 0.5) / PROBES as f64;
            let q = self.quantile(u);
            if !q.is_finite() || q < prev {
                return Err(Error::NonMonotoneQuantile {
                    label: self.label.clone(),
                    at: u,
                });
            }
            prev = q;
        }
        Ok(())
    }
}

/// Map each column through its quantile function. Stratification in
/// probability space carries over because every `Q_j` is monotone.
pub fn transform(design: &DesignMatrix, marginals: &[MarginalSpec]) -> Result<DesignMatrix> {
    if marginals.len() != design.d {
        return Err(Error::invalid(
            "marginals",
            format!(
                "{} quantile functions for a {}-column design",
                marginals.len(),
                design.d
            ),
        ));
    }
    for m in marginals {
        m.check()?;
    }
    let points = design
        .points
        .chunks_exact(design.d)
        .flat_map(|row| row.iter().zip(marginals).map(|(&u, m)| m.quantile(u)))
        .collect();
    Ok(DesignMatrix {
        points,
        n: design.n,
        d: design.d,
        method: design.method,
        seed: design.seed,
        support: Support::Marginals(marginals.iter().map(|m| m.label.clone()).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(seed: u64) -> StreamKey {
        StreamKey::new(seed, Purpose::Permutation)
    }

    #[test]
    fn four_by_two_occupies_each_stratum_once() {
        let x = generate(Method::Lhs, 4, 2, &key(7)).unwrap();
        for j in 0..2 {
            let mut strata: Vec<usize> = x.column(j).iter().map(|&v| stratum_of(v, 4)).collect();
            strata.sort_unstable();
            assert_eq!(strata, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn single_row_design() {
        let x = generate(Method::Lhs, 1, 3, &key(1)).unwrap();
        assert_eq!(x.n(), 1);
        assert!(x.row(0).iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn rejects_empty_shapes() {
        assert!(generate(Method::Lhs, 0, 2, &key(1)).is_err());
        assert!(generate(Method::Iid, 3, 0, &key(1)).is_err());
    }

    #[test]
    fn iid_moments() {
        let x = generate(Method::Iid, 100_000, 1, &key(3)).unwrap();
        let c = x.column(0);
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
        assert!((m - 0.5).abs() < 0.004);
        assert!((v - 1.0 / 12.0).abs() < 0.002);
    }

    #[test]
    fn stratum_edges_are_respected() {
        for n in [3usize, 7, 10, 49, 1000] {
            for k in 1..=n {
                for u in [0.0, 0.5, 1.0 - f64::EPSILON / 2.0] {
                    let x = place_in_stratum(k, u, n);
                    assert_eq!(stratum_of(x, n), k - 1, "n={n} k={k} u={u}");
                    assert!(x < 1.0);
                }
            }
        }
    }

    #[test]
    fn identity_transform_is_noop() {
        let x = generate(Method::Lhs, 8, 3, &key(2)).unwrap();
        let y = transform(&x, &vec![MarginalSpec::identity(); 3]).unwrap();
        assert_eq!(x.as_slice(), y.as_slice());
    }

    #[test]
    fn linear_transform_scales() {
        let x = generate(Method::Lhs, 10_000, 1, &key(5)).unwrap();
        let y = transform(&x, &[MarginalSpec::new("2u", |u| 2.0 * u)]).unwrap();
        assert!(y.as_slice().iter().all(|v| (0.0..2.0).contains(v)));
        assert!((y.mean()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn decreasing_quantile_rejected() {
        let x = generate(Method::Lhs, 4, 1, &key(5)).unwrap();
        let err = transform(&x, &[MarginalSpec::new("1-u", |u| 1.0 - u)]).unwrap_err();
        assert!(matches!(err, Error::NonMonotoneQuantile { .. }));
    }

    #[test]
    fn marginal_count_must_match() {
        let x = generate(Method::Lhs, 4, 2, &key(5)).unwrap();
        assert!(transform(&x, &[MarginalSpec::identity()]).is_err());
    }

    #[test]
    fn normal_marginal_moments_under_lhs() {
        let normal = [MarginalSpec::standard_normal()];
        let mut means = 0.0;
        let mut vars = 0.0;
        let designs = 1000;
        for r in 0..designs {
            let x = generate(Method::Lhs, 100, 1, &key(99).with_replication(r)).unwrap();
            let y = transform(&x, &normal).unwrap().column(0);
            let m = y.iter().sum::<f64>() / 100.0;
            means += m;
            vars += y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 99.0;
        }
        assert!((means / designs as f64).abs() < 0.05);
        assert!((vars / designs as f64 - 1.0).abs() < 0.1);
    }

    #[test]
    fn method_parses() {
        assert_eq!("LHS".parse::<Method>().unwrap(), Method::Lhs);
        assert!("sobol".parse::<Method>().is_err());
    }
}
