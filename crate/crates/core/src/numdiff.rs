//! Central differences with one level of Richardson extrapolation.
//!
//! With steps `h, h/2, h/4` the central quotient `D(h) = (f(h) - f(-h)) / 2h`
//! has an `O(h^2)` truncation error. One Richardson level
//! `R(h) = (4 D(h/2) - D(h)) / 3` removes it. The returned value is
//! `R(h/2)`; `|R(h/2) - R(h)|` is reported as the spread between step sizes.

use crate::error::Result;

/// Base step; the three probes are `h`, `h/2`, `h/4`.
pub const BASE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub value: f64,
    pub spread: f64,
}

/// Largest base step as a fraction of the admissible range. Paths such as
/// tilts are analytic with radius of convergence `limit`, so the
/// extrapolated truncation error scales like `(h / limit)^4`.
pub const LIMIT_FRACTION: f64 = 0.01;

/// Base step that keeps every probe well inside `(-limit, limit)`.
pub fn step_within(limit: f64) -> f64 {
    if limit.is_finite() {
        BASE_STEP.min(LIMIT_FRACTION * limit)
    } else {
        BASE_STEP
    }
}

fn extrapolate(d: [f64; 3]) -> (f64, f64) {
    let r1 = (4.0 * d[1] - d[0]) / 3.0;
    let r2 = (4.0 * d[2] - d[1]) / 3.0;
    (r2, (r2 - r1).abs())
}

/// Derivative of a scalar function at 0.
pub fn derivative<F>(f: F, h: f64) -> Result<Derivative>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut d = [0.0; 3];
    for (i, di) in d.iter_mut().enumerate() {
        let step = h / f64::from(1u32 << i);
        *di = (f(step)? - f(-step)?) / (2.0 * step);
    }
    let (value, spread) = extrapolate(d);
    Ok(Derivative { value, spread })
}

/// Component-wise derivative of a vector-valued function at 0.
/// Returns the derivative and the largest component spread.
pub fn derivative_vec<F>(f: F, h: f64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let mut quotients: Vec<Vec<f64>> = Vec::with_capacity(3);
    for i in 0..3 {
        let step = h / f64::from(1u32 << i);
        let plus = f(step)?;
        let minus = f(-step)?;
        quotients.push(
            plus.iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect(),
        );
    }
    let n = quotients[0].len();
    let mut value = Vec::with_capacity(n);
    let mut spread = 0.0_f64;
    for k in 0..n {
        let (v, s) = extrapolate([quotients[0][k], quotients[1][k], quotients[2][k]]);
        value.push(v);
        spread = spread.max(s);
    }
    Ok((value, spread))
}

/// `|numeric - predicted| <= max(rel * |predicted|, abs)`.
pub fn close(numeric: f64, predicted: f64, rel: f64, abs: f64) -> bool {
    (numeric - predicted).abs() <= (rel * predicted.abs()).max(abs)
}

/// Least-squares slope of `log y` against `log x` over the points where
/// both are positive. `None` when fewer than two usable points remain.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}
