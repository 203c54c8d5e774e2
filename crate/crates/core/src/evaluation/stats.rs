use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_difference: f64,
    /// Infinite when every difference is the same nonzero value.
    pub t: f64,
    pub dof: usize,
    pub critical_value: f64,
    pub significant_at_95: bool,
}

/// Two-sided 95% critical values of Student's t for 1..=30 degrees of freedom.
const T_CRIT_95: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
    2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

/// Critical value for `dof`; beyond the table the next lower tabulated
/// row (40, 60, 120, ∞) is used, which errs on the conservative side.
pub fn t_critical_95(dof: usize) -> f64 {
    match dof {
        0 => f64::INFINITY,
        1..=30 => T_CRIT_95[dof - 1],
        31..=39 => T_CRIT_95[29],
        40..=59 => 2.021,
        60..=119 => 2.000,
        120..=999 => 1.980,
        _ => 1.960,
    }
}

/// Paired two-sided t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("a paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    let critical_value = t_critical_95(dof);
    let t = if var == 0.0 {
        if mean == 0.0 {
            return Err(Error::DegenerateSamples);
        }
        mean.signum() * f64::INFINITY
    } else {
        mean / (var.sqrt() / (n as f64).sqrt())
    };
    Ok(TTestResult {
        mean_difference: mean,
        t,
        dof,
        critical_value,
        significant_at_95: t.abs() > critical_value,
    })
}
