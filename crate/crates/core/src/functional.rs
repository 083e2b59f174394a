//! Target and nuisance functionals, pathwise derivatives and influence
//! functions in the saturated finite model.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{center, hellinger, inner_product, Distribution, RealFunction, ScoreFunction};
use crate::numdiff::{derivative, derivative_vec, Derivative, BASE_STEP};
use crate::report::Check;
use crate::submodel::{linear_tilt, Submodel};
use crate::tolerance::Tolerances;

type ScalarFn = dyn Fn(&Distribution) -> Result<f64> + Send + Sync;
type VectorFn = dyn Fn(&Distribution) -> Result<Vec<f64>> + Send + Sync;

/// `beta : P -> R`.
#[derive(Clone)]
pub struct ScalarFunctional {
    name: String,
    eval: Arc<ScalarFn>,
}

impl fmt::Debug for ScalarFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFunctional({})", self.name)
    }
}

impl ScalarFunctional {
    pub fn new<F>(name: impl Into<String>, eval: F) -> Self
    where
        F: Fn(&Distribution) -> Result<f64> + Send + Sync + 'static,
    {
        ScalarFunctional {
            name: name.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn evaluate(&self, dist: &Distribution) -> Result<f64> {
        let v = (self.eval)(dist)?;
        if !v.is_finite() {
            return Err(Error::FunctionalFailed {
                name: self.name.clone(),
                reason: format!("non-finite value {v}"),
            });
        }
        Ok(v)
    }

    /// `E_P[f]`.
    pub fn mean(f: RealFunction) -> Self {
        Self::new("mean", move |p| crate::model::expectation(p, &f))
    }

    /// `sum_k p_k^2 nu_k`.
    pub fn sum_of_squares() -> Self {
        Self::new("sum of squared densities", |p| {
            let nu = p.space().nu();
            Ok(p.density().iter().zip(nu).map(|(v, w)| v * v * w).sum())
        })
    }

    pub fn constant(c: f64) -> Self {
        Self::new("constant", move |_| Ok(c))
    }
}

/// `eta : P -> R^d`, with named coordinates and the sup-norm.
#[derive(Clone)]
pub struct NuisanceFunctional {
    name: String,
    labels: Vec<String>,
    eval: Arc<VectorFn>,
}

impl fmt::Debug for NuisanceFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "NuisanceFunctional({}, d={})",
            self.name,
            self.labels.len()
        )
    }
}

impl NuisanceFunctional {
    pub fn new<F>(name: impl Into<String>, labels: Vec<String>, eval: F) -> Self
    where
        F: Fn(&Distribution) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        NuisanceFunctional {
            name: name.into(),
            labels,
            eval: Arc::new(eval),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn evaluate(&self, dist: &Distribution) -> Result<Vec<f64>> {
        let v = (self.eval)(dist)?;
        if v.len() != self.labels.len() {
            return Err(Error::FunctionalFailed {
                name: self.name.clone(),
                reason: format!(
                    "expected {} coordinates, got {}",
                    self.labels.len(),
                    v.len()
                ),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::FunctionalFailed {
                name: self.name.clone(),
                reason: "non-finite coordinate".into(),
            });
        }
        Ok(v)
    }

    /// The density itself, `eta(P) = p`.
    pub fn density(labels: Vec<String>) -> Self {
        Self::new("density", labels, |p| Ok(p.density().to_vec()))
    }

    /// No nuisance coordinates.
    pub fn empty() -> Self {
        Self::new("none", Vec::new(), |_| Ok(Vec::new()))
    }
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// A proposed influence function; mean-zero under its base.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceCandidate(pub ScoreFunction);

impl InfluenceCandidate {
    pub fn score(&self) -> &ScoreFunction {
        &self.0
    }
}

impl From<ScoreFunction> for InfluenceCandidate {
    fn from(s: ScoreFunction) -> Self {
        InfluenceCandidate(s)
    }
}

pub(crate) fn pathwise_derivative_full(
    beta: &ScalarFunctional,
    sub: &Submodel,
) -> Result<Derivative> {
    derivative(|t| beta.evaluate(&sub.density_at(t)?), sub.fd_step())
}

/// `d/dt beta(P_t)` at 0.
pub fn pathwise_derivative(beta: &ScalarFunctional, sub: &Submodel) -> Result<f64> {
    Ok(pathwise_derivative_full(beta, sub)?.value)
}

/// `d/dt eta(P_t)` at 0, coordinate-wise.
pub fn nuisance_path_derivative(eta: &NuisanceFunctional, sub: &Submodel) -> Result<Vec<f64>> {
    if eta.dim() == 0 {
        return Ok(Vec::new());
    }
    Ok(derivative_vec(|t| eta.evaluate(&sub.density_at(t)?), sub.fd_step())?.0)
}

/// Efficient influence function in the saturated model.
pub fn compute_eif(beta: &ScalarFunctional, base: &Distribution) -> Result<ScoreFunction> {
    compute_eif_with_step(beta, base, BASE_STEP)
}

/// Tilts `base` along each centered atom indicator `1_k - P0(k)`. Since
/// `E0[phi (1_k - P0(k))] = phi(k) P0(k)` for mean-zero `phi`, the gradient
/// is read off one atom at a time.
pub fn compute_eif_with_step(
    beta: &ScalarFunctional,
    base: &Distribution,
    step: f64,
) -> Result<ScoreFunction> {
    base.require_full_support()?;
    let space = base.space().clone();
    let values = (0..base.len())
        .into_par_iter()
        .map(|k| {
            let g = center(base, &RealFunction::indicator(space.clone(), k))?;
            let sub = linear_tilt(base, &g)?;
            let d = derivative(
                |t| beta.evaluate(&sub.density_at(t)?),
                step.min(sub.fd_step()),
            )?;
            let tolerance = 1e-5 * (1.0 + d.value.abs());
            if d.spread > tolerance {
                return Err(Error::NotDifferentiable {
                    spread: d.spread,
                    tolerance,
                });
            }
            Ok(d.value / base.mass(k))
        })
        .collect::<Result<Vec<f64>>>()?;
    center(base, &RealFunction::new(space, values)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceEntry {
    /// `d/dt beta(P_{t,s})` along the tilt with score `s`.
    pub pathwise: f64,
    /// `E0[phi s]`.
    pub predicted: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceReport {
    pub entries: Vec<InfluenceEntry>,
    pub pass: bool,
}

impl InfluenceReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.pathwise - e.predicted).abs())
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| !e.pass).count()
    }

    pub fn checks(&self, tol: &Tolerances) -> Vec<Check> {
        vec![
            Check::new(
                "influence.max_abs_error",
                self.max_error(),
                tol.deriv_rel,
                self.pass,
            ),
            Check::new(
                "influence.failed_scores",
                self.failures() as f64,
                0.0,
                self.failures() == 0,
            ),
        ]
    }
}

/// Compares `d/dt beta` along `linear_tilt(base, s)` with `E0[phi s]` for
/// every supplied score.
pub fn verify_influence(
    beta: &ScalarFunctional,
    phi: &InfluenceCandidate,
    scores: &[ScoreFunction],
    tol: &Tolerances,
) -> Result<InfluenceReport> {
    let base = phi.0.base();
    let entries = scores
        .par_iter()
        .map(|s| {
            let sub = linear_tilt(base, s)?;
            let pathwise = pathwise_derivative(beta, &sub)?;
            let predicted = inner_product(base, phi.0.function(), s.function())?;
            Ok(InfluenceEntry {
                pathwise,
                predicted,
                pass: tol.derivative_close(pathwise, predicted),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = entries.iter().all(|e| e.pass);
    Ok(InfluenceReport { entries, pass })
}

/// Gram-Schmidt in `L2(P0)` against the already-accepted `basis`.
/// Returns `None` when `v` is (numerically) in their span.
fn orthonormalize(
    base: &Distribution,
    basis: &[RealFunction],
    v: &RealFunction,
) -> Result<Option<RealFunction>> {
    let norm0 = crate::model::l2_norm(base, v)?;
    let mut w = v.clone();
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = inner_product(base, &w, b)?;
            w = w.sub(&b.scale(c))?;
        }
    }
    let norm = crate::model::l2_norm(base, &w)?;
    if norm <= 1e-10 * norm0.max(1e-300) {
        return Ok(None);
    }
    Ok(Some(w.scale(1.0 / norm)))
}

/// Orthonormal basis of `{s in L2^0(P0) : E0[phi* s] = 0}`.
pub fn nuisance_tangent_basis(
    beta: &ScalarFunctional,
    base: &Distribution,
) -> Result<Vec<ScoreFunction>> {
    let phi = compute_eif(beta, base)?;
    let space = base.space().clone();
    let mut accepted = vec![RealFunction::constant(space.clone(), 1.0)];
    if let Some(u) = orthonormalize(base, &accepted, phi.function())? {
        accepted.push(u);
    }
    let fixed = accepted.len();
    for k in 0..base.len() {
        if accepted.len() == base.len() {
            break;
        }
        if let Some(u) =
            orthonormalize(base, &accepted, &RealFunction::indicator(space.clone(), k))?
        {
            accepted.push(u);
        }
    }
    accepted
        .into_iter()
        .skip(fixed)
        .map(|f| center(base, &f))
        .collect()
}

/// `L2(P0)` orthogonal projection of `f` onto `span(basis)`.
pub fn project_onto(
    base: &Distribution,
    f: &RealFunction,
    basis: &[ScoreFunction],
) -> Result<RealFunction> {
    let n = basis.len();
    if n == 0 {
        return Ok(RealFunction::zeros(base.space().clone()));
    }
    let mut gram = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        rhs[i] = inner_product(base, basis[i].function(), f)?;
        for j in 0..=i {
            let v = inner_product(base, basis[i].function(), basis[j].function())?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(gram.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let bottom = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(top > 0.0) || bottom <= 1e-12 * top {
        return Err(Error::RankDeficient);
    }
    let coef = gram.cholesky().ok_or(Error::RankDeficient)?.solve(&rhs);
    let mut out = vec![0.0; base.len()];
    for (c, b) in coef.iter().zip(basis) {
        for (o, v) in out.iter_mut().zip(b.values()) {
            *o += c * v;
        }
    }
    RealFunction::new(base.space().clone(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub pairs_used: usize,
    /// Pairs with `H(P1, P2) = 0`.
    pub skipped_degenerate: usize,
    /// Draws rejected by the admissibility predicate.
    pub rejected: usize,
    pub bound: Option<f64>,
    pub pass: Option<bool>,
}

impl LipschitzReport {
    pub fn checks(&self) -> Vec<Check> {
        match (self.bound, self.pass) {
            (Some(b), Some(p)) => vec![Check::new(
                "hellinger_lipschitz.max_ratio",
                self.max_ratio,
                b,
                p,
            )],
            _ => vec![Check::new(
                "hellinger_lipschitz.max_ratio",
                self.max_ratio,
                f64::INFINITY,
                true,
            )],
        }
    }
}

/// Random bounded tilt of `base` within Hellinger radius `radius`.
fn random_nearby(
    base: &Distribution,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Distribution>> {
    let coeffs: Vec<f64> = (0..base.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let g = center(base, &RealFunction::new(base.space().clone(), coeffs)?)?;
    let sup = g.sup_norm();
    if sup == 0.0 {
        return Ok(None);
    }
    let mut t = 0.9 / sup * rng.random_range(0.05..1.0);
    let sub = linear_tilt(base, &g)?;
    for _ in 0..80 {
        let q = sub.density_at(t)?;
        if hellinger(&q, base)? <= radius {
            return Ok(Some(q));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// Largest `|beta(P1) - beta(P2)| / H(P1, P2)` over random pairs near `base`.
/// Each pair draws from its own ChaCha stream, so the result does not depend
/// on evaluation order.
pub fn hellinger_lipschitz_probe(
    beta: &ScalarFunctional,
    base: &Distribution,
    n_pairs: usize,
    radius: f64,
    seed: u64,
    bound: Option<f64>,
    admissible: Option<&(dyn Fn(&Distribution) -> bool + Sync)>,
) -> Result<LipschitzReport> {
    if !(radius > 0.0) {
        return Err(Error::Invalid(format!(
            "radius must be positive, got {radius}"
        )));
    }
    base.require_full_support()?;
    const ATTEMPTS: usize = 20;
    let outcomes = (0..n_pairs)
        .into_par_iter()
        .map(|i| -> Result<(Option<f64>, usize)> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut rejected = 0;
            let mut draw = |rng: &mut ChaCha8Rng| -> Result<Option<Distribution>> {
                for _ in 0..ATTEMPTS {
                    match random_nearby(base, radius, rng)? {
                        Some(q) if admissible.is_none_or(|ok| ok(&q)) => return Ok(Some(q)),
                        _ => rejected += 1,
                    }
                }
                Ok(None)
            };
            let (Some(p1), Some(p2)) = (draw(&mut rng)?, draw(&mut rng)?) else {
                return Ok((None, rejected));
            };
            let h = hellinger(&p1, &p2)?;
            if h == 0.0 {
                return Ok((Some(f64::NAN), rejected));
            }
            let ratio = (beta.evaluate(&p1)? - beta.evaluate(&p2)?).abs() / h;
            Ok((Some(ratio), rejected))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut max_ratio = 0.0_f64;
    let (mut used, mut degenerate, mut rejected) = (0, 0, 0);
    for (ratio, rej) in outcomes {
        rejected += rej;
        match ratio {
            Some(r) if r.is_nan() => degenerate += 1,
            Some(r) => {
                used += 1;
                max_ratio = max_ratio.max(r);
            }
            None => {}
        }
    }
    Ok(LipschitzReport {
        max_ratio,
        pairs_used: used,
        skipped_degenerate: degenerate,
        rejected,
        bound,
        pass: bound.map(|b| max_ratio <= b),
    })
}
