//! Paths `t -> P_t` through a base distribution: linear tilts, QMD
//! verification, score recovery and derivatives of expectations along paths.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{
    center, expectation, fsum, hellinger, inner_product, l2_norm, Distribution, RealFunction,
    ScoreFunction,
};
use crate::numdiff::{self, derivative, derivative_vec, log_log_slope};
use crate::report::Check;
use crate::tolerance::Tolerances;

type DensityFn = dyn Fn(f64) -> Result<Vec<f64>> + Send + Sync;

/// A path of distributions through `base`, valid for `|t| < t_limit`.
#[derive(Clone)]
pub struct Submodel {
    name: String,
    base: Distribution,
    t_limit: f64,
    density: Arc<DensityFn>,
    declared_score: Option<ScoreFunction>,
}

impl fmt::Debug for Submodel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Submodel")
            .field("name", &self.name)
            .field("t_limit", &self.t_limit)
            .field("declared_score", &self.declared_score.is_some())
            .finish()
    }
}

impl Submodel {
    /// `density(t)` must return densities w.r.t. the base space's `nu`.
    pub fn new<F>(name: impl Into<String>, base: Distribution, t_limit: f64, density: F) -> Self
    where
        F: Fn(f64) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        Submodel {
            name: name.into(),
            base,
            t_limit,
            density: Arc::new(density),
            declared_score: None,
        }
    }

    pub fn with_score(mut self, score: ScoreFunction) -> Self {
        self.declared_score = Some(score);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> &Distribution {
        &self.base
    }

    pub fn t_limit(&self) -> f64 {
        self.t_limit
    }

    pub fn declared_score(&self) -> Option<&ScoreFunction> {
        self.declared_score.as_ref()
    }

    pub fn density_at(&self, t: f64) -> Result<Distribution> {
        if t == 0.0 {
            return Ok(self.base.clone());
        }
        if !(t.abs() < self.t_limit) {
            return Err(Error::OutOfRange {
                t,
                limit: self.t_limit,
            });
        }
        Distribution::new(self.base.space().clone(), (self.density)(t)?)
    }

    /// Declared score, or the numerically recovered one.
    pub fn score(&self) -> Result<ScoreFunction> {
        match &self.declared_score {
            Some(s) => Ok(s.clone()),
            None => recover_score(self, numdiff::step_within(self.t_limit)),
        }
    }

    /// Base finite-difference step for this path.
    pub fn fd_step(&self) -> f64 {
        numdiff::step_within(self.t_limit)
    }
}

/// The path `p_t = p0 (1 + t g)` for `|t| < 1 / ||g||_inf`.
pub fn linear_tilt(p0: &Distribution, g: &ScoreFunction) -> Result<Submodel> {
    p0.require_full_support()?;
    let mean = expectation(p0, g.function())?;
    if mean.abs() > crate::model::MEAN_ZERO_TOL {
        return Err(Error::NotMeanZero { mean });
    }
    // exact re-centering keeps every p_t inside the normalization gate
    let g = ScoreFunction::new(p0, g.function().map(|v| v - mean))?;
    let sup = g.sup_norm();
    let t_limit = if sup > 0.0 { 1.0 / sup } else { f64::INFINITY };
    let base = p0.density().to_vec();
    let dir = g.values().to_vec();
    Ok(Submodel::new("linear tilt", p0.clone(), t_limit, move |t| {
        Ok(base
            .iter()
            .zip(&dir)
            .map(|(p, gv)| p * (1.0 + t * gv))
            .collect())
    })
    .with_score(g))
}

fn check_t(sub: &Submodel, t: f64) -> Result<()> {
    if t == 0.0 {
        return Err(Error::ZeroStep);
    }
    if !(t.abs() < sub.t_limit) {
        return Err(Error::OutOfRange {
            t,
            limit: sub.t_limit,
        });
    }
    Ok(())
}

/// `int ((sqrt p_t - sqrt p0)/t - s sqrt(p0)/2)^2 dnu` evaluated exactly.
pub fn qmd_residual(sub: &Submodel, s: &ScoreFunction, t: f64) -> Result<f64> {
    check_t(sub, t)?;
    let pt = sub.density_at(t)?;
    let p0 = sub.base();
    let nu = p0.space().nu();
    if s.values().len() != p0.len() {
        return Err(Error::DimensionMismatch {
            expected: p0.len(),
            actual: s.values().len(),
        });
    }
    Ok(fsum((0..p0.len()).map(|k| {
        let (a, b) = (pt.density()[k], p0.density()[k]);
        let denom = a.sqrt() + b.sqrt();
        let diff = if denom > 0.0 { (a - b) / denom } else { 0.0 };
        let r = diff / t - 0.5 * s.values()[k] * b.sqrt();
        r * r * nu[k]
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreVerdict {
    /// Remainder decays at the expected rate.
    Score,
    /// Remainder plateaus: the candidate is not the score of this path.
    NotScore,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmdReport {
    pub t_grid: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Fitted log-log slope; infinite when every residual is zero.
    pub slope: f64,
    pub verdict: ScoreVerdict,
    pub pass: bool,
    pub slope_min: f64,
    pub res_max: f64,
}

impl QmdReport {
    pub fn smallest_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new(
                "qmd.slope",
                self.slope,
                self.slope_min,
                self.slope >= self.slope_min,
            ),
            Check::new(
                "qmd.residual_at_smallest_t",
                self.smallest_residual(),
                self.res_max,
                self.smallest_residual() <= self.res_max,
            ),
        ]
    }
}

/// Log-spaced default grid that fits inside `(0, limit)`.
pub fn default_qmd_grid(limit: f64) -> Vec<f64> {
    let scale = if limit.is_finite() {
        (0.5 * limit / 1e-2).min(1.0)
    } else {
        1.0
    };
    [1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4, 5e-5, 2e-5, 1e-5]
        .iter()
        .map(|t| t * scale)
        .collect()
}

fn validate_grid(t_grid: &[f64], min_points: usize) -> Result<()> {
    if t_grid.len() < min_points {
        return Err(Error::GridTooSmall {
            needed: min_points,
            got: t_grid.len(),
        });
    }
    let decreasing = t_grid.windows(2).all(|w| w[1] < w[0]);
    if !decreasing || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::BadGrid);
    }
    Ok(())
}

pub fn verify_qmd(
    sub: &Submodel,
    s: &ScoreFunction,
    t_grid: &[f64],
    tol: &Tolerances,
) -> Result<QmdReport> {
    validate_grid(t_grid, 3)?;
    let residuals = t_grid
        .iter()
        .map(|t| qmd_residual(sub, s, *t))
        .collect::<Result<Vec<_>>>()?;
    let slope = match log_log_slope(t_grid, &residuals) {
        Some(v) => v,
        None if residuals.iter().all(|r| *r == 0.0) => f64::INFINITY,
        None => f64::NAN,
    };
    let last = *residuals.last().unwrap();
    let pass = slope >= tol.slope_min && last <= tol.res_max;
    let verdict = if pass {
        ScoreVerdict::Score
    } else if slope < 0.5 {
        ScoreVerdict::NotScore
    } else {
        ScoreVerdict::Inconclusive
    };
    Ok(QmdReport {
        t_grid: t_grid.to_vec(),
        residuals,
        slope,
        verdict,
        pass,
        slope_min: tol.slope_min,
        res_max: tol.res_max,
    })
}

/// Estimates the score as the derivative of `p_t / p0` at 0, then centers it.
pub fn recover_score(sub: &Submodel, base_step: f64) -> Result<ScoreFunction> {
    let p0 = sub.base();
    p0.require_full_support()?;
    let (ratio_slope, _) = derivative_vec(
        |t| {
            let pt = sub.density_at(t)?;
            if let Some(index) = pt.density().iter().position(|v| *v <= 0.0) {
                return Err(Error::SupportLost { t, index });
            }
            Ok(pt
                .density()
                .iter()
                .zip(p0.density())
                .map(|(a, b)| (a - b) / b)
                .collect())
        },
        base_step,
    )?;
    let f = RealFunction::new(p0.space().clone(), ratio_slope)?;
    center(p0, &f)
}

/// A numerically measured derivative paired with its closed-form prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub numeric: f64,
    pub predicted: f64,
    pub pass: bool,
}

impl DerivativeCheck {
    pub fn new(numeric: f64, predicted: f64, tol: &Tolerances) -> Self {
        DerivativeCheck {
            numeric,
            predicted,
            pass: tol.derivative_close(numeric, predicted),
        }
    }

    pub fn error(&self) -> f64 {
        (self.numeric - self.predicted).abs()
    }
}

/// `d/dt E_{P_t}[f]` at 0, compared with `E0[f s]`.
pub fn ddt_expectation_fixed(
    sub: &Submodel,
    f: &RealFunction,
    tol: &Tolerances,
) -> Result<DerivativeCheck> {
    let s = sub.score()?;
    let d = derivative(|t| expectation(&sub.density_at(t)?, f), sub.fd_step())?;
    let predicted = inner_product(sub.base(), f, s.function())?;
    Ok(DerivativeCheck::new(d.value, predicted, tol))
}

/// `d/dt E_{P_t}[f_t]` at 0, compared with `E0[f_0 s] + E0[f_dot]`.
pub fn ddt_expectation_varying<F>(
    sub: &Submodel,
    family: F,
    tol: &Tolerances,
) -> Result<DerivativeCheck>
where
    F: Fn(f64) -> Result<RealFunction>,
{
    let s = sub.score()?;
    let h = sub.fd_step();
    let d = derivative(|t| expectation(&sub.density_at(t)?, &family(t)?), h)?;
    let f0 = family(0.0)?;
    let (f_dot, _) = derivative_vec(|t| Ok(family(t)?.into_values()), h)?;
    let f_dot = RealFunction::new(sub.base().space().clone(), f_dot)?;
    let predicted =
        inner_product(sub.base(), &f0, s.function())? + expectation(sub.base(), &f_dot)?;
    Ok(DerivativeCheck::new(d.value, predicted, tol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HellingerGapReport {
    pub t_grid: Vec<f64>,
    pub ratios: Vec<f64>,
    /// `||s - g||_{L2(P0)} / (2 sqrt 2)`.
    pub bound: f64,
    pub gap_slack: f64,
    pub pass: bool,
}

impl HellingerGapReport {
    pub fn smallest_t_ratio(&self) -> f64 {
        *self.ratios.last().unwrap_or(&f64::NAN)
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![Check::new(
            "hellinger_gap.ratio_at_smallest_t",
            self.smallest_t_ratio(),
            self.bound * (1.0 + self.gap_slack),
            self.pass,
        )]
    }
}

pub fn hellinger_gap_check(
    sub_s: &Submodel,
    sub_g: &Submodel,
    t_grid: &[f64],
    tol: &Tolerances,
) -> Result<HellingerGapReport> {
    validate_grid(t_grid, 1)?;
    if sub_s.base() != sub_g.base() {
        return Err(Error::Invalid(
            "submodels must share a base distribution".into(),
        ));
    }
    let s = sub_s.score()?;
    let g = sub_g.score()?;
    let bound = l2_norm(sub_s.base(), &s.function().sub(g.function())?)? / (2.0 * 2f64.sqrt());
    let ratios = t_grid
        .iter()
        .map(|t| Ok(hellinger(&sub_s.density_at(*t)?, &sub_g.density_at(*t)?)? / t.abs()))
        .collect::<Result<Vec<_>>>()?;
    let last = *ratios.last().unwrap();
    Ok(HellingerGapReport {
        t_grid: t_grid.to_vec(),
        ratios,
        bound,
        gap_slack: tol.gap_slack,
        pass: last <= bound * (1.0 + tol.gap_slack),
    })
}

/// Numerical rank of the scores of `linear_tilt(base, d)` over the given
/// directions, measured in the `L2(P0)` geometry.
pub fn tilt_score_rank(base: &Distribution, directions: &[ScoreFunction]) -> Result<usize> {
    let k = base.len();
    let weights: Vec<f64> = base.masses().iter().map(|m| m.sqrt()).collect();
    let mut cols = Vec::with_capacity(directions.len() * k);
    for d in directions {
        let sub = linear_tilt(base, d)?;
        let s = recover_score(&sub, sub.fd_step())?;
        cols.extend(s.values().iter().zip(&weights).map(|(v, w)| v * w));
    }
    if directions.is_empty() {
        return Ok(0);
    }
    let m = DMatrix::from_column_slice(k, directions.len(), &cols);
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    Ok(sv.iter().filter(|v| **v > 1e-8 * top.max(1e-300)).count())
}
