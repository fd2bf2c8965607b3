//! Number formatting shared by the CSV and JSON writers.

use nalgebra::DMatrix;
use serde_json::{Number, Value};

/// 17 significant digits, scientific notation. Round-trips every finite f64.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// A JSON number carrying the 17-digit text of `v`; `null` when non-finite.
pub fn json_f64(v: f64) -> Value {
    if !v.is_finite() {
        return Value::Null;
    }
    fmt_f64(v)
        .parse::<Number>()
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

pub fn json_vec(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| json_f64(x)).collect())
}

/// Row-major flat array.
pub fn json_matrix(m: &DMatrix<f64>) -> Value {
    let mut flat = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            flat.push(json_f64(m[(i, j)]));
        }
    }
    Value::Array(flat)
}
