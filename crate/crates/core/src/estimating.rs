//! Estimating functions `m(z; beta, eta)`: correct specification, Neyman
//! orthogonality, the Jacobian `G`, the L2 chain rule and the forward and
//! reverse equivalence verifiers.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functional::{
    compute_eif, nuisance_path_derivative, pathwise_derivative, sup_norm, verify_influence,
    InfluenceReport, NuisanceFunctional, ScalarFunctional,
};
use crate::model::{
    center, fsum, inner_product, l2_norm, Distribution, RealFunction, ScoreFunction,
};
use crate::numdiff::{derivative, derivative_vec, log_log_slope, BASE_STEP};
use crate::report::{all_pass, Check};
use crate::submodel::{linear_tilt, DerivativeCheck, Submodel};
use crate::tolerance::Tolerances;

type EvalFn = dyn Fn(usize, f64, &[f64]) -> Result<f64> + Send + Sync;
type AdmissibleFn = dyn Fn(&[f64]) -> bool + Send + Sync;

/// `|G|` at or below this is treated as degenerate.
pub const DEGENERATE_JACOBIAN: f64 = 1e-8;

/// Neighborhood used by the correct-specification spot check.
pub const SPEC_SAMPLES: usize = 20;
pub const SPEC_RADIUS: f64 = 0.1;
const SPEC_SEED: u64 = 0x5eed;

/// `m(z; beta, eta)` with `z` an atom index and `eta` a flat coordinate vector.
#[derive(Clone)]
pub struct EstimatingFunction {
    name: String,
    dim: usize,
    eval: Arc<EvalFn>,
    admissible: Arc<AdmissibleFn>,
}

impl fmt::Debug for EstimatingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EstimatingFunction({}, dim = {})", self.name, self.dim)
    }
}

impl EstimatingFunction {
    /// Every finite `eta` of length `dim` is admissible.
    pub fn new<F>(name: impl Into<String>, dim: usize, eval: F) -> Self
    where
        F: Fn(usize, f64, &[f64]) -> Result<f64> + Send + Sync + 'static,
    {
        EstimatingFunction {
            name: name.into(),
            dim,
            eval: Arc::new(eval),
            admissible: Arc::new(|eta: &[f64]| eta.iter().all(|v| v.is_finite())),
        }
    }

    /// Restricts the nuisance set; non-finite vectors stay inadmissible.
    pub fn with_admissible<A>(mut self, admissible: A) -> Self
    where
        A: Fn(&[f64]) -> bool + Send + Sync + 'static,
    {
        self.admissible =
            Arc::new(move |eta: &[f64]| eta.iter().all(|v| v.is_finite()) && admissible(eta));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_admissible(&self, eta: &[f64]) -> bool {
        eta.len() == self.dim && (self.admissible)(eta)
    }

    pub fn evaluate(&self, atom: usize, beta: f64, eta: &[f64]) -> Result<f64> {
        if eta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: eta.len(),
            });
        }
        let v = (self.eval)(atom, beta, eta)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { index: atom });
        }
        Ok(v)
    }

    /// `z -> m(z; beta, eta)` on the atoms of `dist`.
    pub fn values(&self, dist: &Distribution, beta: f64, eta: &[f64]) -> Result<RealFunction> {
        let v = (0..dist.len())
            .map(|k| self.evaluate(k, beta, eta))
            .collect::<Result<Vec<_>>>()?;
        RealFunction::new(dist.space().clone(), v)
    }

    /// `E_dist[m(Z; beta, eta)]`.
    pub fn moment(&self, dist: &Distribution, beta: f64, eta: &[f64]) -> Result<f64> {
        if !self.is_admissible(eta) {
            return Err(Error::InadmissibleNuisance(format!("{eta:?}")));
        }
        let terms = (0..dist.len())
            .map(|k| Ok(self.evaluate(k, beta, eta)? * dist.mass(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(fsum(terms))
    }

    /// `m(z; beta) = f(z) - slope * beta`, no nuisance.
    pub fn linear(f: RealFunction, slope: f64) -> Self {
        let values = f.into_values();
        EstimatingFunction::new("linear", 0, move |k, beta, _| Ok(values[k] - slope * beta))
    }

    /// `m(z; beta, eta) = 2 eta(z) - 2 beta` with `eta` the density itself.
    pub fn density_counterexample(atoms: usize) -> Self {
        EstimatingFunction::new("density counterexample", atoms, |k, beta, eta| {
            Ok(2.0 * eta[k] - 2.0 * beta)
        })
    }
}

/// `(beta0, eta0)` together with the distribution they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPair {
    pub beta0: f64,
    pub eta0: Vec<f64>,
    pub provenance: Distribution,
}

impl ParameterPair {
    pub fn at(
        beta: &ScalarFunctional,
        eta: &NuisanceFunctional,
        dist: &Distribution,
    ) -> Result<Self> {
        Ok(ParameterPair {
            beta0: beta.evaluate(dist)?,
            eta0: eta.evaluate(dist)?,
            provenance: dist.clone(),
        })
    }
}

/// One `(P, beta(P), eta(P))` triple of a correct-specification check.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecSample {
    pub dist: Distribution,
    pub beta: f64,
    pub eta: Vec<f64>,
}

impl SpecSample {
    pub fn at(
        beta: &ScalarFunctional,
        eta: &NuisanceFunctional,
        dist: &Distribution,
    ) -> Result<Self> {
        Ok(SpecSample {
            dist: dist.clone(),
            beta: beta.evaluate(dist)?,
            eta: eta.evaluate(dist)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecReport {
    /// `E_P[m(Z; beta(P), eta(P))]` per sample.
    pub residuals: Vec<f64>,
    /// Indices of samples above tolerance.
    pub violations: Vec<usize>,
    pub tolerance: f64,
    pub pass: bool,
}

impl SpecReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(r.abs()))
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![Check::new(
            "spec.max_abs_moment",
            self.max_residual(),
            self.tolerance,
            self.pass,
        )]
    }
}

pub fn check_correct_specification(
    m: &EstimatingFunction,
    samples: &[SpecSample],
    tol: &Tolerances,
) -> Result<SpecReport> {
    let residuals = samples
        .iter()
        .map(|s| m.moment(&s.dist, s.beta, &s.eta))
        .collect::<Result<Vec<_>>>()?;
    let violations: Vec<usize> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r.abs() <= tol.spec))
        .map(|(i, _)| i)
        .collect();
    Ok(SpecReport {
        pass: violations.is_empty(),
        residuals,
        violations,
        tolerance: tol.spec,
    })
}

/// `base` plus `n` random tilts `p0 (1 + g)` with `||g||_inf <= radius`.
/// Draw `i` uses ChaCha stream `i` of `seed`.
pub fn sample_neighborhood(
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    base: &Distribution,
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<SpecSample>> {
    base.require_full_support()?;
    let mut out = vec![SpecSample::at(beta, eta, base)?];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let raw: Vec<f64> = (0..base.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let g = center(base, &RealFunction::new(base.space().clone(), raw)?)?;
        let sup = g.sup_norm();
        if sup == 0.0 {
            continue;
        }
        let t = radius / sup * rng.random_range(0.1..1.0);
        let dist = linear_tilt(base, &g)?.density_at(t)?;
        out.push(SpecSample::at(beta, eta, &dist)?);
    }
    Ok(out)
}

/// `m(.; beta0, eta0 + t h)` stays admissible on every probe of the
/// finite-difference stencil with base step `step`.
fn stencil_admissible(m: &EstimatingFunction, eta0: &[f64], h: &[f64], step: f64) -> bool {
    (0..3).all(|i| {
        let s = step / f64::from(1u32 << i);
        [s, -s].iter().all(|t| {
            let eta: Vec<f64> = eta0.iter().zip(h).map(|(e, d)| e + t * d).collect();
            m.is_admissible(&eta)
        })
    })
}

/// `d/dt E0[m(Z; beta0, eta0 + t h)]` at 0, under the fixed base measure.
pub fn nuisance_gateaux(
    m: &EstimatingFunction,
    base: &Distribution,
    pair: &ParameterPair,
    h: &[f64],
) -> Result<f64> {
    if h.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            actual: h.len(),
        });
    }
    if let Some(index) = h.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    if h.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    if !m.is_admissible(&pair.eta0) {
        return Err(Error::InadmissibleNuisance(format!("{:?}", pair.eta0)));
    }
    let mut step = BASE_STEP * sup_norm(&pair.eta0).max(1.0);
    let mut halvings = 0;
    while !stencil_admissible(m, &pair.eta0, h, step) {
        halvings += 1;
        if halvings > 40 {
            return Err(Error::InadmissibleDirection(format!(
                "eta0 + t h leaves the nuisance set for all small t (h = {h:?})"
            )));
        }
        step *= 0.5;
    }
    let d = derivative(
        |t| {
            let eta: Vec<f64> = pair.eta0.iter().zip(h).map(|(e, d)| e + t * d).collect();
            m.moment(base, pair.beta0, &eta)
        },
        step,
    )?;
    Ok(d.value)
}

/// Unit vectors `e_1, ..., e_d`.
pub fn canonical_directions(dim: usize) -> Vec<Vec<f64>> {
    (0..dim)
        .map(|j| {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDerivative {
    pub label: String,
    pub direction: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeymanReport {
    pub derivatives: Vec<DirectionDerivative>,
    pub tolerance: f64,
    pub pass: bool,
    pub warning: Option<String>,
}

impl NeymanReport {
    pub fn max_abs(&self) -> f64 {
        self.derivatives
            .iter()
            .fold(0.0, |a, d| a.max(d.value.abs()))
    }

    pub fn checks(&self) -> Vec<Check> {
        self.derivatives
            .iter()
            .map(|d| Check::abs_le(format!("neyman[{}]", d.label), d.value, self.tolerance))
            .collect()
    }
}

/// Labels `e_j` directions by the nuisance coordinate names when available.
pub fn direction_label(direction: &[f64], labels: &[String]) -> String {
    let nonzero: Vec<usize> = (0..direction.len())
        .filter(|j| direction[*j] != 0.0)
        .collect();
    match nonzero.as_slice() {
        [j] if direction[*j] == 1.0 => labels.get(*j).cloned().unwrap_or_else(|| format!("e{j}")),
        _ => format!("h{direction:?}"),
    }
}

pub fn check_neyman(
    m: &EstimatingFunction,
    base: &Distribution,
    pair: &ParameterPair,
    directions: &[Vec<f64>],
    labels: &[String],
    tol: &Tolerances,
) -> Result<NeymanReport> {
    if directions.is_empty() {
        return Ok(NeymanReport {
            derivatives: Vec::new(),
            tolerance: tol.neyman,
            pass: true,
            warning: Some("empty direction set: orthogonality holds vacuously".into()),
        });
    }
    let derivatives = directions
        .par_iter()
        .map(|h| {
            Ok(DirectionDerivative {
                label: direction_label(h, labels),
                direction: h.clone(),
                value: nuisance_gateaux(m, base, pair, h)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = derivatives.iter().all(|d| d.value.abs() <= tol.neyman);
    Ok(NeymanReport {
        derivatives,
        tolerance: tol.neyman,
        pass,
        warning: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian {
    pub value: f64,
    pub degenerate: bool,
}

/// `G = d/d beta E0[m(Z; beta, eta0)]` at `beta0`.
pub fn jacobian_g(
    m: &EstimatingFunction,
    base: &Distribution,
    pair: &ParameterPair,
) -> Result<Jacobian> {
    let step = BASE_STEP * pair.beta0.abs().max(1.0);
    let d = derivative(|b| m.moment(base, pair.beta0 + b, &pair.eta0), step)?;
    Ok(Jacobian {
        value: d.value,
        degenerate: d.value.abs() <= DEGENERATE_JACOBIAN,
    })
}

/// Which half of the equivalence a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub direction: Direction,
    pub gateaux: Vec<DirectionDerivative>,
    pub jacobian: f64,
    /// Candidate influence function `-m0 / G` (forward) or `m0` (reverse).
    pub phi: ScoreFunction,
    pub influence: InfluenceReport,
    /// Intermediate identity (forward) or master identity (reverse) residuals.
    pub identity_residuals: Vec<f64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn pathwise_pair(
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    sub: &Submodel,
) -> Result<(f64, Vec<f64>)> {
    Ok((
        pathwise_derivative(beta, sub)?,
        nuisance_path_derivative(eta, sub)?,
    ))
}

/// Neyman orthogonality implies pathwise differentiability: builds
/// `phi = -m0 / G`, checks it against `beta` along every score and evaluates
/// `E0[m0 s] + G beta_dot + d_eta E0[m][eta_dot]` per score.
pub fn forward_verify(
    m: &EstimatingFunction,
    base: &Distribution,
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    scores: &[ScoreFunction],
    tol: &Tolerances,
) -> Result<EquivalenceReport> {
    base.require_full_support()?;
    let pair = ParameterPair::at(beta, eta, base)?;
    if !m.is_admissible(&pair.eta0) {
        return Err(Error::InadmissibleNuisance(format!("{:?}", pair.eta0)));
    }
    let samples = sample_neighborhood(beta, eta, base, SPEC_SAMPLES, SPEC_RADIUS, SPEC_SEED)?;
    let spec = check_correct_specification(m, &samples, tol)?;
    if !spec.pass {
        return Err(Error::Misspecified(format!(
            "{} of {} neighborhood samples violate |E_P[m]| <= {:e} (max {:e})",
            spec.violations.len(),
            samples.len(),
            tol.spec,
            spec.max_residual()
        )));
    }
    let g = jacobian_g(m, base, &pair)?;
    if g.degenerate {
        return Err(Error::DegenerateJacobian(g.value));
    }
    let m0 = m.values(base, pair.beta0, &pair.eta0)?;
    let raw_phi = m0.scale(-1.0 / g.value);
    let phi_mean = crate::model::expectation(base, &raw_phi)?;
    let phi = center(base, &raw_phi)?;
    let influence = verify_influence(beta, &phi.clone().into(), scores, tol)?;

    let residuals = scores
        .par_iter()
        .map(|s| {
            let sub = linear_tilt(base, s)?;
            let (b_dot, e_dot) = pathwise_pair(beta, eta, &sub)?;
            let nuis = nuisance_gateaux(m, base, &pair, &e_dot)?;
            Ok(inner_product(base, &m0, s.function())? + g.value * b_dot + nuis)
        })
        .collect::<Result<Vec<f64>>>()?;

    let neyman = check_neyman(
        m,
        base,
        &pair,
        &canonical_directions(m.dim()),
        eta.labels(),
        tol,
    )?;

    let mut checks = spec.checks();
    checks.push(Check::abs_le("phi.mean", phi_mean, tol.spec));
    checks.push(Check::new(
        "jacobian.G",
        g.value,
        DEGENERATE_JACOBIAN,
        !g.degenerate,
    ));
    checks.extend(neyman.checks());
    checks.extend(influence.checks(tol));
    let worst = residuals.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
    checks.push(Check::abs_le(
        "intermediate_identity.max_abs",
        worst,
        tol.identity,
    ));
    let pass = all_pass(&checks);
    Ok(EquivalenceReport {
        direction: Direction::Forward,
        gateaux: neyman.derivatives,
        jacobian: g.value,
        phi,
        influence,
        identity_residuals: residuals,
        checks,
        pass,
    })
}

/// A nuisance-coordinate submodel and the direction it claims to move `eta` in.
#[derive(Debug, Clone)]
pub struct EtaCoordinate {
    pub direction: Vec<f64>,
    pub submodel: Submodel,
}

fn centered_indicators(base: &Distribution) -> Result<Vec<ScoreFunction>> {
    (0..base.len())
        .map(|k| center(base, &RealFunction::indicator(base.space().clone(), k)))
        .collect()
}

/// Pathwise differentiability implies Neyman orthogonality. Checks the
/// first-order behavior of every coordinate submodel, then evaluates the
/// master identity `(1 + G) beta_dot + d_eta E0[m][eta_dot]` on each.
pub fn reverse_verify(
    m: &EstimatingFunction,
    base: &Distribution,
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    beta_coord: &Submodel,
    eta_coords: &[EtaCoordinate],
    tol: &Tolerances,
) -> Result<EquivalenceReport> {
    base.require_full_support()?;
    let pair = ParameterPair::at(beta, eta, base)?;
    if !m.is_admissible(&pair.eta0) {
        return Err(Error::InadmissibleNuisance(format!("{:?}", pair.eta0)));
    }

    // first-order coordinate conditions
    let (b_dot, e_dot) = pathwise_pair(beta, eta, beta_coord)?;
    let mut violations = Vec::new();
    if (b_dot - 1.0).abs() > tol.coord {
        violations.push(format!(
            "beta-coordinate submodel moves beta at rate {b_dot}, not 1"
        ));
    }
    if sup_norm(&e_dot) > tol.coord {
        violations.push(format!(
            "beta-coordinate submodel moves eta (|eta_dot|_inf = {:e})",
            sup_norm(&e_dot)
        ));
    }
    let mut coords = vec![(b_dot, e_dot)];
    for c in eta_coords {
        if c.direction.len() != m.dim() {
            return Err(Error::DimensionMismatch {
                expected: m.dim(),
                actual: c.direction.len(),
            });
        }
        let (b, e) = pathwise_pair(beta, eta, &c.submodel)?;
        let label = direction_label(&c.direction, eta.labels());
        if b.abs() > tol.coord {
            violations.push(format!(
                "eta-coordinate submodel {label} moves beta at rate {b}"
            ));
        }
        let gap: Vec<f64> = e.iter().zip(&c.direction).map(|(a, h)| a - h).collect();
        if sup_norm(&gap) > tol.coord {
            violations.push(format!(
                "eta-coordinate submodel {label} misses its direction by {:e}",
                sup_norm(&gap)
            ));
        }
        coords.push((b, e));
    }
    if !violations.is_empty() {
        return Err(Error::ProductStructure(violations.join("; ")));
    }

    let m0 = m.values(base, pair.beta0, &pair.eta0)?;
    let phi = center(base, &m0)?;
    let mut scores = centered_indicators(base)?;
    scores.push(beta_coord.score()?);
    for c in eta_coords {
        scores.push(c.submodel.score()?);
    }
    let influence = verify_influence(beta, &phi.clone().into(), &scores, tol)?;

    let g = jacobian_g(m, base, &pair)?;
    let residuals = coords
        .par_iter()
        .map(|(b, e)| Ok((1.0 + g.value) * b + nuisance_gateaux(m, base, &pair, e)?))
        .collect::<Result<Vec<f64>>>()?;
    let directions: Vec<Vec<f64>> = eta_coords.iter().map(|c| c.direction.clone()).collect();
    let neyman = check_neyman(m, base, &pair, &directions, eta.labels(), tol)?;

    let mut checks = influence.checks(tol);
    let worst = residuals.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
    checks.push(Check::abs_le(
        "master_identity.max_abs",
        worst,
        tol.identity,
    ));
    checks.push(Check::near("jacobian.G", g.value, -1.0, tol.coord));
    checks.extend(neyman.checks());
    let pass = all_pass(&checks);
    Ok(EquivalenceReport {
        direction: Direction::Reverse,
        gateaux: neyman.derivatives,
        jacobian: g.value,
        phi,
        influence,
        identity_residuals: residuals,
        checks,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRuleReport {
    pub t_grid: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Log-log slope, `NaN` when every residual vanishes.
    pub slope: f64,
    pub slope_min: f64,
    /// Residuals at or below this count as exact.
    pub exact_floor: f64,
    pub pass: bool,
}

impl ChainRuleReport {
    pub fn smallest_t_residual(&self) -> f64 {
        *self.residuals.last().unwrap_or(&f64::NAN)
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            Check::new(
                "chain_rule.residual_at_smallest_t",
                self.smallest_t_residual(),
                self.exact_floor,
                self.pass,
            ),
            Check::new("chain_rule.slope", self.slope, self.slope_min, self.pass),
        ]
    }
}

pub const CHAIN_RULE_SLOPE_MIN: f64 = 0.9;
pub const CHAIN_RULE_EXACT: f64 = 1e-9;

/// Grid for the chain rule remainder, kept inside the path's range.
pub fn default_chain_grid(limit: f64) -> Vec<f64> {
    let scale = if limit.is_finite() {
        (0.5 * limit / 1e-2).min(1.0)
    } else {
        1.0
    };
    [1e-2, 5e-3, 2e-3, 1e-3].iter().map(|t| t * scale).collect()
}

/// `|| (f_t - f_0)/t - (d_beta m * beta_dot + d_eta m[eta_dot]) ||` in
/// `L2(P0)` with `f_t = m(.; beta(P_t), eta(P_t))`.
pub fn chain_rule_check(
    m: &EstimatingFunction,
    sub: &Submodel,
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    t_grid: &[f64],
) -> Result<ChainRuleReport> {
    if t_grid.len() < 2 {
        return Err(Error::GridTooSmall {
            needed: 2,
            got: t_grid.len(),
        });
    }
    if t_grid.windows(2).any(|w| !(w[1] < w[0])) || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::BadGrid);
    }
    let base = sub.base();
    let pair = ParameterPair::at(beta, eta, base)?;
    let (b_dot, e_dot) = pathwise_pair(beta, eta, sub)?;
    let n = base.len();
    let b_step = BASE_STEP * pair.beta0.abs().max(1.0);
    let (d_beta, _) = derivative_vec(
        |b| {
            (0..n)
                .map(|k| m.evaluate(k, pair.beta0 + b, &pair.eta0))
                .collect()
        },
        b_step,
    )?;
    let d_eta = if e_dot.iter().all(|v| *v == 0.0) {
        vec![0.0; n]
    } else {
        let e_step = BASE_STEP * sup_norm(&pair.eta0).max(1.0);
        derivative_vec(
            |t| {
                let e: Vec<f64> = pair
                    .eta0
                    .iter()
                    .zip(&e_dot)
                    .map(|(a, d)| a + t * d)
                    .collect();
                (0..n).map(|k| m.evaluate(k, pair.beta0, &e)).collect()
            },
            e_step,
        )?
        .0
    };
    let lin: Vec<f64> = (0..n).map(|k| d_beta[k] * b_dot + d_eta[k]).collect();
    let f0 = m.values(base, pair.beta0, &pair.eta0)?;
    let residuals = t_grid
        .iter()
        .map(|t| {
            let pt = sub.density_at(*t)?;
            let ft = m.values(base, beta.evaluate(&pt)?, &eta.evaluate(&pt)?)?;
            let r: Vec<f64> = (0..n)
                .map(|k| (ft.values()[k] - f0.values()[k]) / t - lin[k])
                .collect();
            l2_norm(base, &RealFunction::new(base.space().clone(), r)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let slope = log_log_slope(t_grid, &residuals).unwrap_or(f64::NAN);
    let last = *residuals.last().unwrap();
    let pass = last <= CHAIN_RULE_EXACT || slope >= CHAIN_RULE_SLOPE_MIN;
    Ok(ChainRuleReport {
        t_grid: t_grid.to_vec(),
        residuals,
        slope,
        slope_min: CHAIN_RULE_SLOPE_MIN,
        exact_floor: CHAIN_RULE_EXACT,
        pass,
    })
}

/// `f(s) = d/dt E0[D(Z; beta(P_t), eta(P_t))]` against `-E0[D0 s]`.
pub fn gradient_characterization_check(
    d: &EstimatingFunction,
    sub: &Submodel,
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
    tol: &Tolerances,
) -> Result<DerivativeCheck> {
    let base = sub.base();
    let pair = ParameterPair::at(beta, eta, base)?;
    let s = sub.score()?;
    let numeric = derivative(
        |t| {
            let pt = sub.density_at(t)?;
            d.moment(base, beta.evaluate(&pt)?, &eta.evaluate(&pt)?)
        },
        sub.fd_step(),
    )?
    .value;
    let d0 = d.values(base, pair.beta0, &pair.eta0)?;
    let predicted = -inner_product(base, &d0, s.function())?;
    Ok(DerivativeCheck::new(numeric, predicted, tol))
}

/// Efficient-influence variances below this count as zero.
pub const ZERO_VARIANCE: f64 = 1e-14;

/// `h1'(beta0) = d/d beta E0[D(Z; beta, eta0)]` at `beta0`.
pub fn negative_identity_check(
    d: &EstimatingFunction,
    base: &Distribution,
    beta: &ScalarFunctional,
    eta: &NuisanceFunctional,
) -> Result<f64> {
    let phi = compute_eif(beta, base)?;
    if phi.norm().powi(2) <= ZERO_VARIANCE {
        return Err(Error::ZeroVariance);
    }
    let pair = ParameterPair::at(beta, eta, base)?;
    Ok(jacobian_g(d, base, &pair)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expectation, SampleSpace};

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(SampleSpace::indexed(p.len()).unwrap(), p.to_vec()).unwrap()
    }

    fn func(d: &Distribution, v: &[f64]) -> RealFunction {
        RealFunction::new(d.space().clone(), v.to_vec()).unwrap()
    }

    fn counterexample() -> (
        Distribution,
        EstimatingFunction,
        ScalarFunctional,
        NuisanceFunctional,
    ) {
        let p0 = dist(&[0.7, 0.3]);
        (
            p0,
            EstimatingFunction::density_counterexample(2),
            ScalarFunctional::sum_of_squares(),
            NuisanceFunctional::density(vec!["p(z0)".into(), "p(z1)".into()]),
        )
    }

    fn linear_problem() -> (
        Distribution,
        RealFunction,
        EstimatingFunction,
        ScalarFunctional,
    ) {
        let p0 = dist(&[0.2, 0.3, 0.5]);
        let f = func(&p0, &[1.0, 4.0, -2.0]);
        let m = EstimatingFunction::linear(f.clone(), 1.0);
        (p0, f.clone(), m, ScalarFunctional::mean(f))
    }

    #[test]
    fn specification_examples() {
        let tol = Tolerances::default();
        let (p0, f, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let samples = sample_neighborhood(&beta, &eta, &p0, SPEC_SAMPLES, SPEC_RADIUS, 3).unwrap();
        assert_eq!(samples.len(), SPEC_SAMPLES + 1);
        assert!(
            check_correct_specification(&m, &samples, &tol)
                .unwrap()
                .pass
        );

        let values = f.into_values();
        let off = EstimatingFunction::new("offset", 0, move |k, b, _| Ok(values[k] - b + 0.1));
        let rep = check_correct_specification(&off, &samples[..1], &tol).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.violations, vec![0]);
        assert!((rep.residuals[0] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn neighborhood_stays_within_radius() {
        let (p0, _, _, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        for s in sample_neighborhood(&beta, &eta, &p0, 20, 0.1, 9).unwrap() {
            for (a, b) in s.dist.density().iter().zip(p0.density()) {
                assert!((a / b - 1.0).abs() <= 0.1 + 1e-12);
            }
        }
    }

    #[test]
    fn gateaux_counterexample() {
        let (p0, m, beta, eta) = counterexample();
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        let d = nuisance_gateaux(&m, &p0, &pair, &[0.1, -0.1]).unwrap();
        // closed form 2 sum h p0 nu
        let oracle = 2.0 * (0.1 * 0.7 - 0.1 * 0.3);
        assert!((d - oracle).abs() < 1e-12);
        assert!((d - 0.08).abs() < 1e-8);
        assert_eq!(nuisance_gateaux(&m, &p0, &pair, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn gateaux_inadmissible_direction() {
        let (p0, m, beta, eta) = counterexample();
        let m = m.with_admissible(|e| e[0] <= 0.7);
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        assert!(matches!(
            nuisance_gateaux(&m, &p0, &pair, &[1.0, 0.0]),
            Err(Error::InadmissibleDirection(_))
        ));
    }

    #[test]
    fn gateaux_shrinks_step_near_boundary() {
        let (p0, m, beta, eta) = counterexample();
        let m = m.with_admissible(|e| e[0] > 0.6999);
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        let d = nuisance_gateaux(&m, &p0, &pair, &[0.1, -0.1]).unwrap();
        assert!((d - 0.08).abs() < 1e-8);
    }

    #[test]
    fn neyman_examples() {
        let tol = Tolerances::default();
        let (p0, m, beta, eta) = counterexample();
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        let rep =
            check_neyman(&m, &p0, &pair, &canonical_directions(2), eta.labels(), &tol).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.derivatives[0].label, "p(z0)");
        let empty = check_neyman(&m, &p0, &pair, &[], eta.labels(), &tol).unwrap();
        assert!(empty.pass && empty.warning.is_some());
    }

    #[test]
    fn jacobian_examples() {
        let (p0, f, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        let g = jacobian_g(&m, &p0, &pair).unwrap();
        assert!((g.value + 1.0).abs() < 1e-12 && !g.degenerate);
        let g2 = jacobian_g(&EstimatingFunction::linear(f.clone(), 2.0), &p0, &pair).unwrap();
        assert!((g2.value + 2.0).abs() < 1e-12);
        let flat = jacobian_g(&EstimatingFunction::linear(f, 0.0), &p0, &pair).unwrap();
        assert!(flat.degenerate && flat.value == 0.0);
    }

    fn random_scores(p0: &Distribution, n: usize, seed: u64) -> Vec<ScoreFunction> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..p0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                center(p0, &func(p0, &raw)).unwrap()
            })
            .collect()
    }

    #[test]
    fn forward_linear_problem() {
        let tol = Tolerances::default();
        let (p0, f, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let rep = forward_verify(&m, &p0, &beta, &eta, &random_scores(&p0, 10, 1), &tol).unwrap();
        assert!(rep.pass, "{:#?}", rep.checks);
        assert!((rep.jacobian + 1.0).abs() < 1e-12);
        let fc = center(&p0, &f).unwrap();
        for (a, b) in rep.phi.values().iter().zip(fc.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_counterexample_fails_influence() {
        let tol = Tolerances::default();
        let (p0, m, beta, eta) = counterexample();
        let scores = random_scores(&p0, 5, 2);
        let rep = forward_verify(&m, &p0, &beta, &eta, &scores, &tol).unwrap();
        assert!(!rep.pass && !rep.influence.pass);
        // phi = -m0/G = m0/2 is half the EIF; the gap is the nuisance term
        // d_eta E0[m][eta_dot] routed through -1/G
        let pair = ParameterPair::at(&beta, &eta, &p0).unwrap();
        for (s, e) in scores.iter().zip(&rep.influence.entries) {
            let sub = linear_tilt(&p0, s).unwrap();
            let e_dot = nuisance_path_derivative(&eta, &sub).unwrap();
            let nuis = nuisance_gateaux(&m, &p0, &pair, &e_dot).unwrap();
            assert!(((e.pathwise - e.predicted) - nuis / 2.0).abs() < 1e-8);
        }
        assert!(rep.identity_residuals.iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn forward_rejects_misspecified_and_degenerate() {
        let tol = Tolerances::default();
        let (p0, f, _, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let values = f.clone().into_values();
        let off = EstimatingFunction::new("offset", 0, move |k, b, _| Ok(values[k] - b + 0.1));
        assert!(matches!(
            forward_verify(&off, &p0, &beta, &eta, &[], &tol),
            Err(Error::Misspecified(_))
        ));
        let zero = EstimatingFunction::new("zero", 0, |_, _, _| Ok(0.0));
        assert!(matches!(
            forward_verify(&zero, &p0, &beta, &eta, &[], &tol),
            Err(Error::DegenerateJacobian(_))
        ));
    }

    #[test]
    fn reverse_linear_problem() {
        let tol = Tolerances::default();
        let (p0, f, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        // exact coordinate tilt: score (f - Ef)/Var f moves E f at unit rate
        let fc = center(&p0, &f).unwrap();
        let var = inner_product(&p0, fc.function(), fc.function()).unwrap();
        let sub = linear_tilt(&p0, &fc.scale(1.0 / var)).unwrap();
        let rep = reverse_verify(&m, &p0, &beta, &eta, &sub, &[], &tol).unwrap();
        assert!(rep.pass, "{:#?}", rep.checks);
        assert!((rep.jacobian + 1.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_counterexample_reports_product_structure() {
        let tol = Tolerances::default();
        let (p0, m, beta, eta) = counterexample();
        // best candidate: tilt along the EIF scaled to unit beta rate
        let phi = compute_eif(&beta, &p0).unwrap();
        let sub = linear_tilt(&p0, &phi.scale(1.0 / phi.norm().powi(2))).unwrap();
        assert!(matches!(
            reverse_verify(&m, &p0, &beta, &eta, &sub, &[], &tol),
            Err(Error::ProductStructure(_))
        ));
    }

    #[test]
    fn chain_rule_examples() {
        let (p0, _, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let g = center(&p0, &func(&p0, &[1.0, -0.5, 0.2])).unwrap();
        let sub = linear_tilt(&p0, &g).unwrap();
        let rep = chain_rule_check(&m, &sub, &beta, &eta, &[1e-2, 5e-3, 2e-3, 1e-3]).unwrap();
        assert!(rep.pass && rep.smallest_t_residual() <= 1e-9);

        let frozen = Submodel::new("frozen", p0.clone(), f64::INFINITY, {
            let d = p0.density().to_vec();
            move |_| Ok(d.clone())
        })
        .with_score(ScoreFunction::zero(&p0));
        let rep = chain_rule_check(&m, &frozen, &beta, &eta, &[1e-2, 1e-3]).unwrap();
        assert!(rep.residuals.iter().all(|r| *r == 0.0) && rep.pass);
    }

    #[test]
    fn chain_rule_nonlinear_decays_linearly() {
        let (p0, m, beta, eta) = counterexample();
        let g = center(&p0, &func(&p0, &[1.0, -1.0])).unwrap();
        let sub = linear_tilt(&p0, &g).unwrap();
        let rep =
            chain_rule_check(&m, &sub, &beta, &eta, &default_chain_grid(sub.t_limit())).unwrap();
        // beta(P_t) is quadratic in t, so the remainder is exactly linear
        assert!((rep.slope - 1.0).abs() < 1e-3, "{}", rep.slope);
        assert!(rep.pass);
    }

    #[test]
    fn gradient_characterization_examples() {
        let tol = Tolerances::default();
        let (p0, f, m, beta) = linear_problem();
        let eta = NuisanceFunctional::empty();
        let phi = compute_eif(&beta, &p0).unwrap();

        // nuisance direction: orthogonal to phi
        let basis = crate::functional::nuisance_tangent_basis(&beta, &p0).unwrap();
        let sub = linear_tilt(&p0, &basis[0]).unwrap();
        let c = gradient_characterization_check(&m, &sub, &beta, &eta, &tol).unwrap();
        assert!(c.pass && c.numeric.abs() < 1e-9);

        // s = phi: both sides equal -beta_dot
        let sub = linear_tilt(&p0, &phi).unwrap();
        let c = gradient_characterization_check(&m, &sub, &beta, &eta, &tol).unwrap();
        let b_dot = derivative(|t| expectation(&sub.density_at(t)?, &f), 1e-4)
            .unwrap()
            .value;
        assert!(c.pass && (c.numeric + b_dot).abs() < 1e-9);

        let zero = EstimatingFunction::new("zero", 0, |_, _, _| Ok(0.0));
        let c = gradient_characterization_check(&zero, &sub, &beta, &eta, &tol).unwrap();
        assert!(c.pass && c.numeric == 0.0 && c.predicted == 0.0);
    }

    #[test]
    fn negative_identity_examples() {
        let (p0, _, m, beta) = linear_problem();
        let v = negative_identity_check(&m, &p0, &beta, &NuisanceFunctional::empty()).unwrap();
        assert!((v + 1.0).abs() < 1e-12);

        let (p0, m, beta, eta) = counterexample();
        let v = negative_identity_check(&m, &p0, &beta, &eta).unwrap();
        assert!((v + 2.0).abs() < 1e-12);

        let flat = ScalarFunctional::constant(1.0);
        assert_eq!(
            negative_identity_check(&m, &p0, &flat, &eta),
            Err(Error::ZeroVariance)
        );
    }
}
