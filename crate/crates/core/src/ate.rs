//! Average treatment effect on a finite `(Y, X, A)` space: AIPW estimating
//! function, coordinate submodels, regularity conditions and the bias sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimating::{EstimatingFunction, EtaCoordinate};
use crate::functional::{
    hellinger_lipschitz_probe, LipschitzReport, NuisanceFunctional, ScalarFunctional,
};
use crate::model::{
    center, fsum, Distribution, RealFunction, SampleSpace, ScoreFunction, SpaceRef,
};
use crate::numdiff::log_log_slope;
use crate::report::Check;
use crate::submodel::{linear_tilt, Submodel};

const SUM_TOL: f64 = 1e-12;
/// `Var(tau)` at or below this violates heterogeneity.
const VAR_FLOOR: f64 = 1e-14;

/// Declared inputs of an ATE model.
#[derive(Debug, Clone, PartialEq)]
pub struct ATEModelSpec {
    pub x_probs: Vec<f64>,
    pub pi: Vec<f64>,
    pub y_support: Vec<f64>,
    /// `p(y | x, a = 1)`, one row per `x`.
    pub y_cond_a1: Vec<Vec<f64>>,
    /// `p(y | x, a = 0)`, one row per `x`.
    pub y_cond_a0: Vec<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub c_y: Option<f64>,
    pub sigma2_min: Option<f64>,
}

impl ATEModelSpec {
    /// Two-point `X`, constant propensity 1/2, binary `Y` with
    /// `P(Y=1|x,1) = (0.6, 0.9)` and `P(Y=1|x,0) = (0.2, 0.3)`.
    pub fn reference() -> Self {
        ATEModelSpec {
            x_probs: vec![0.5, 0.5],
            pi: vec![0.5, 0.5],
            y_support: vec![0.0, 1.0],
            y_cond_a1: vec![vec![0.4, 0.6], vec![0.1, 0.9]],
            y_cond_a0: vec![vec![0.8, 0.2], vec![0.7, 0.3]],
            epsilon: None,
            c_y: None,
            sigma2_min: None,
        }
    }

    /// The reference outcome law with propensities `(0.3, 0.7)`. With a
    /// constant propensity of 1/2 the second-order bias term of the default
    /// sweep direction cancels; this variant keeps it.
    pub fn sweep_reference() -> Self {
        ATEModelSpec {
            pi: vec![0.3, 0.7],
            ..Self::reference()
        }
    }

    fn validate(&self) -> Result<()> {
        let nx = self.x_probs.len();
        let ny = self.y_support.len();
        if nx == 0 || ny == 0 {
            return Err(Error::Invalid(
                "x.probs and y.support must be nonempty".into(),
            ));
        }
        let all = self
            .x_probs
            .iter()
            .chain(&self.pi)
            .chain(&self.y_support)
            .chain(self.y_cond_a1.iter().flatten())
            .chain(self.y_cond_a0.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("ATE spec contains non-finite values".into()));
        }
        if self.x_probs.iter().any(|p| *p <= 0.0) {
            return Err(Error::Invalid("x.probs must be strictly positive".into()));
        }
        let total = fsum(self.x_probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Invalid(format!("x.probs sums to {total}, not 1")));
        }
        if self.pi.len() != nx {
            return Err(Error::Invalid(format!(
                "pi has {} entries, x.probs has {nx}",
                self.pi.len()
            )));
        }
        if self.pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("pi entries must lie in [0, 1]".into()));
        }
        for (i, a) in self.y_support.iter().enumerate() {
            if self.y_support[..i].contains(a) {
                return Err(Error::Invalid(format!("duplicate y.support value {a}")));
            }
        }
        for (name, rows) in [
            ("y.cond.a1", &self.y_cond_a1),
            ("y.cond.a0", &self.y_cond_a0),
        ] {
            if rows.len() != nx {
                return Err(Error::Invalid(format!(
                    "{name} has {} rows, expected {nx}",
                    rows.len()
                )));
            }
            for (x, row) in rows.iter().enumerate() {
                if row.len() != ny {
                    return Err(Error::Invalid(format!(
                        "{name} row {x} has {} entries, y.support has {ny}",
                        row.len()
                    )));
                }
                if row.iter().any(|p| *p <= 0.0) {
                    return Err(Error::Invalid(format!(
                        "{name} row {x} must be strictly positive"
                    )));
                }
                let s = fsum(row.iter().copied());
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(Error::Invalid(format!("{name} row {x} sums to {s}, not 1")));
                }
            }
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("c_y", self.c_y),
            ("sigma2_min", self.sigma2_min),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Atom bookkeeping: atom `(x, a, y_i)` sits at `(2x + a) ny + y_i`.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    nx: usize,
    y: Vec<f64>,
}

impl Layout {
    fn ny(&self) -> usize {
        self.y.len()
    }

    fn len(&self) -> usize {
        2 * self.nx * self.ny()
    }

    fn index(&self, x: usize, a: usize, yi: usize) -> usize {
        (2 * x + a) * self.ny() + yi
    }

    /// `(x, a, y_i)` of an atom index.
    fn decode(&self, k: usize) -> (usize, usize, usize) {
        let cell = k / self.ny();
        (cell / 2, cell % 2, k % self.ny())
    }

    fn atom_ids(&self) -> Vec<String> {
        (0..self.len())
            .map(|k| {
                let (x, a, yi) = self.decode(k);
                format!("y={},x={x},a={a}", self.y[yi])
            })
            .collect()
    }

    fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(3 * self.nx);
        for name in ["mu1", "mu0", "pi"] {
            for x in 0..self.nx {
                out.push(format!("{name}[x{x}]"));
            }
        }
        out
    }

    /// `(p_X, mu1, mu0, pi)` of an arbitrary distribution on the layout.
    fn nuisances(&self, masses: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let ny = self.ny();
        let mut px = vec![0.0; self.nx];
        let mut mu = [vec![0.0; self.nx], vec![0.0; self.nx]];
        let mut pi = vec![0.0; self.nx];
        for x in 0..self.nx {
            let mut arm_mass = [0.0; 2];
            for a in 0..2 {
                let cell = &masses[self.index(x, a, 0)..self.index(x, a, 0) + ny];
                let w = fsum(cell.iter().copied());
                if !(w > 0.0) {
                    return Err(Error::FunctionalFailed {
                        name: "ate nuisance".into(),
                        reason: format!("cell (x{x}, a={a}) has no mass"),
                    });
                }
                mu[a][x] = fsum(cell.iter().zip(&self.y).map(|(m, y)| m * y)) / w;
                arm_mass[a] = w;
            }
            px[x] = arm_mass[0] + arm_mass[1];
            pi[x] = arm_mass[1] / px[x];
        }
        let [mu0, mu1] = mu;
        Ok((px, mu1, mu0, pi))
    }
}

/// Closed-form nuisances at `P0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ATENuisances {
    pub mu1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub tau: Vec<f64>,
    pub pi: Vec<f64>,
    pub beta0: f64,
    /// `Var(Y | x, a = 1)`.
    pub sigma2_1: Vec<f64>,
    /// `Var(Y | x, a = 0)`.
    pub sigma2_0: Vec<f64>,
    pub var_tau: f64,
}

impl ATENuisances {
    /// `eta0 = (mu1, mu0, pi)` flattened.
    pub fn eta0(&self) -> Vec<f64> {
        [self.mu1.as_slice(), &self.mu0, &self.pi].concat()
    }
}

/// Perturbation direction `(h1, h0, h_pi)`, one value per `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaDirection {
    pub h1: Vec<f64>,
    pub h0: Vec<f64>,
    pub hpi: Vec<f64>,
}

impl EtaDirection {
    pub fn zero(nx: usize) -> Self {
        EtaDirection {
            h1: vec![0.0; nx],
            h0: vec![0.0; nx],
            hpi: vec![0.0; nx],
        }
    }

    /// Inverse of `flatten`.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.is_empty() || v.len() % 3 != 0 {
            return Err(Error::Invalid(format!(
                "direction length {} is not a positive multiple of 3",
                v.len()
            )));
        }
        let nx = v.len() / 3;
        Ok(EtaDirection {
            h1: v[..nx].to_vec(),
            h0: v[nx..2 * nx].to_vec(),
            hpi: v[2 * nx..].to_vec(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        [self.h1.as_slice(), &self.h0, &self.hpi].concat()
    }

    /// Unit vectors in `(mu1, mu0, pi)` coordinates.
    pub fn canonical(nx: usize) -> Vec<Self> {
        (0..3 * nx)
            .map(|j| {
                let mut v = vec![0.0; 3 * nx];
                v[j] = 1.0;
                Self::from_flat(&v).unwrap()
            })
            .collect()
    }

    /// `h1(x) = sin(x+1)`, `h0 = -h1`, `h_pi(x) = cos(x+1)/2`, scaled to
    /// sup-norm 1.
    pub fn sweep_default(nx: usize) -> Self {
        let h1: Vec<f64> = (0..nx).map(|j| ((j + 1) as f64).sin()).collect();
        let h0: Vec<f64> = h1.iter().map(|v| -v).collect();
        let hpi: Vec<f64> = (0..nx).map(|j| 0.5 * ((j + 1) as f64).cos()).collect();
        let d = EtaDirection { h1, h0, hpi };
        let norm = d.flatten().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let v: Vec<f64> = d.flatten().iter().map(|v| v / norm).collect();
        Self::from_flat(&v).unwrap()
    }
}

/// A validated factorized ATE model with its flattened joint `P0`.
#[derive(Debug, Clone)]
pub struct ATEModel {
    spec: ATEModelSpec,
    layout: Layout,
    space: SpaceRef,
    p0: Distribution,
    nuisances: ATENuisances,
    epsilon: f64,
    epsilon_margin: f64,
    c_y: f64,
    sigma2_min: f64,
}

impl ATEModel {
    /// Structural validation and exact nuisances; regularity is not enforced.
    pub fn from_spec(spec: &ATEModelSpec) -> Result<(ATEModel, ATENuisances)> {
        spec.validate()?;
        let nx = spec.x_probs.len();
        let layout = Layout {
            nx,
            y: spec.y_support.clone(),
        };
        let space = SampleSpace::counting(layout.atom_ids())?;
        let mut p = vec![0.0; layout.len()];
        for x in 0..nx {
            for a in 0..2 {
                let arm = if a == 1 { spec.pi[x] } else { 1.0 - spec.pi[x] };
                let row = if a == 1 {
                    &spec.y_cond_a1[x]
                } else {
                    &spec.y_cond_a0[x]
                };
                for (yi, py) in row.iter().enumerate() {
                    p[layout.index(x, a, yi)] = spec.x_probs[x] * arm * py;
                }
            }
        }
        let p0 = Distribution::new(space.clone(), p)?;

        let cond = |row: &[f64]| {
            let mean = fsum(row.iter().zip(&spec.y_support).map(|(p, y)| p * y));
            let var = fsum(
                row.iter()
                    .zip(&spec.y_support)
                    .map(|(p, y)| p * (y - mean).powi(2)),
            );
            (mean, var)
        };
        let (mu1, sigma2_1): (Vec<f64>, Vec<f64>) = spec.y_cond_a1.iter().map(|r| cond(r)).unzip();
        let (mu0, sigma2_0): (Vec<f64>, Vec<f64>) = spec.y_cond_a0.iter().map(|r| cond(r)).unzip();
        let tau: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let beta0 = fsum(spec.x_probs.iter().zip(&tau).map(|(p, t)| p * t));
        let var_tau = fsum(
            spec.x_probs
                .iter()
                .zip(&tau)
                .map(|(p, t)| p * (t - beta0).powi(2)),
        );
        let nuisances = ATENuisances {
            mu1,
            mu0,
            tau,
            pi: spec.pi.clone(),
            beta0,
            sigma2_1,
            sigma2_0,
            var_tau,
        };

        let epsilon_margin = spec
            .pi
            .iter()
            .fold(f64::INFINITY, |a, p| a.min(p.min(1.0 - p)));
        let c_y = spec
            .c_y
            .unwrap_or_else(|| spec.y_support.iter().fold(0.0, |a, y| a.max(y.abs())));
        let sigma2_min = spec.sigma2_min.unwrap_or_else(|| {
            nuisances
                .sigma2_1
                .iter()
                .chain(&nuisances.sigma2_0)
                .fold(f64::INFINITY, |a, v| a.min(*v))
        });
        let model = ATEModel {
            spec: spec.clone(),
            layout,
            space,
            p0,
            nuisances: nuisances.clone(),
            epsilon: spec.epsilon.unwrap_or(epsilon_margin / 2.0),
            epsilon_margin,
            c_y,
            sigma2_min,
        };
        Ok((model, nuisances))
    }

    /// `from_spec` followed by a hard regularity gate.
    pub fn build(spec: &ATEModelSpec) -> Result<(ATEModel, ATENuisances)> {
        let (model, nuisances) = Self::from_spec(spec)?;
        let report = model.check_regularity();
        if let Some(c) = report.conditions.iter().find(|c| !c.pass) {
            return Err(Error::Regularity {
                condition: c.condition,
                detail: c.detail.clone(),
            });
        }
        Ok((model, nuisances))
    }

    pub fn spec(&self) -> &ATEModelSpec {
        &self.spec
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn p0(&self) -> &Distribution {
        &self.p0
    }

    pub fn nuisances(&self) -> &ATENuisances {
        &self.nuisances
    }

    pub fn nx(&self) -> usize {
        self.layout.nx
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn c_y(&self) -> f64 {
        self.c_y
    }

    pub fn eta_labels(&self) -> Vec<String> {
        self.layout.labels()
    }

    /// `(x, a, y)` of an atom.
    pub fn atom(&self, k: usize) -> (usize, usize, f64) {
        let (x, a, yi) = self.layout.decode(k);
        (x, a, self.layout.y[yi])
    }

    /// Atom index of `(x, a, y_i)`.
    pub fn atom_index(&self, x: usize, a: usize, yi: usize) -> usize {
        self.layout.index(x, a, yi)
    }

    /// `beta(P) = E_P[mu1^P(X) - mu0^P(X)]`.
    pub fn beta_functional(&self) -> ScalarFunctional {
        let layout = self.layout.clone();
        ScalarFunctional::new("ate", move |p| {
            let (px, mu1, mu0, _) = layout.nuisances(&p.masses())?;
            Ok(fsum((0..layout.nx).map(|x| px[x] * (mu1[x] - mu0[x]))))
        })
    }

    /// `eta(P) = (mu1^P, mu0^P, pi^P)` flattened over `x`.
    pub fn eta_functional(&self) -> NuisanceFunctional {
        let layout = self.layout.clone();
        NuisanceFunctional::new("ate nuisances", self.layout.labels(), move |p| {
            let (_, mu1, mu0, pi) = layout.nuisances(&p.masses())?;
            Ok([mu1, mu0, pi].concat())
        })
    }

    /// The AIPW estimating function; admissible iff every `pi` lies in `(0, 1)`.
    pub fn estimating_function(&self) -> EstimatingFunction {
        let layout = self.layout.clone();
        let nx = layout.nx;
        EstimatingFunction::new("aipw", 3 * nx, move |k, beta, eta| {
            let (x, a, yi) = layout.decode(k);
            ate_m_raw(a, layout.y[yi], eta[x], eta[nx + x], eta[2 * nx + x], beta)
        })
        .with_admissible(move |eta| eta[2 * nx..].iter().all(|p| *p > 0.0 && *p < 1.0))
    }

    /// `m(z; beta, eta)` at atom `k`.
    pub fn ate_m(&self, k: usize, beta: f64, eta: &[f64]) -> Result<f64> {
        self.estimating_function().evaluate(k, beta, eta)
    }

    /// `phi(z) = m(z; beta0, eta0)` at atom `k`.
    pub fn ate_phi(&self, k: usize) -> Result<f64> {
        self.ate_m(k, self.nuisances.beta0, &self.nuisances.eta0())
    }

    /// `phi` over every atom.
    pub fn phi(&self) -> Result<ScoreFunction> {
        let values = (0..self.layout.len())
            .map(|k| self.ate_phi(k))
            .collect::<Result<Vec<_>>>()?;
        ScoreFunction::from_values(&self.p0, values)
    }

    fn x_function(&self, f: impl Fn(usize) -> f64) -> Result<RealFunction> {
        let v = (0..self.layout.len())
            .map(|k| f(self.layout.decode(k).0))
            .collect();
        RealFunction::new(self.space.clone(), v)
    }

    /// `g_beta(x) = (tau(x) - beta0) / Var(tau)`, one value per `x`.
    pub fn g_beta(&self) -> Result<Vec<f64>> {
        let n = &self.nuisances;
        if !(n.var_tau > VAR_FLOOR) {
            return Err(Error::Regularity {
                condition: "R4",
                detail: format!("Var(tau) = {:e}", n.var_tau),
            });
        }
        Ok(n.tau.iter().map(|t| (t - n.beta0) / n.var_tau).collect())
    }

    fn g_beta_score(&self) -> Result<ScoreFunction> {
        let g = self.g_beta()?;
        ScoreFunction::new(&self.p0, self.x_function(|x| g[x])?)
    }

    /// Linear tilt along `g_beta`: moves `beta` at unit rate, freezes `eta`.
    pub fn beta_coordinate_submodel(&self) -> Result<Submodel> {
        linear_tilt(&self.p0, &self.g_beta_score()?)
    }

    /// `alpha0 = -E0[h1(X) - h0(X)]`.
    pub fn alpha0(&self, h: &EtaDirection) -> f64 {
        -fsum((0..self.nx()).map(|x| self.spec.x_probs[x] * (h.h1[x] - h.h0[x])))
    }

    fn check_direction(&self, h: &EtaDirection) -> Result<()> {
        let nx = self.nx();
        for v in [&h.h1, &h.h0, &h.hpi] {
            if v.len() != nx {
                return Err(Error::DimensionMismatch {
                    expected: nx,
                    actual: v.len(),
                });
            }
        }
        if let Some(index) = h.flatten().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    /// `s_h = g_a + g_{h_pi} + alpha0 g_beta`.
    pub fn eta_score(&self, h: &EtaDirection) -> Result<ScoreFunction> {
        self.check_direction(h)?;
        let n = &self.nuisances;
        let alpha0 = self.alpha0(h);
        let g_beta = if alpha0 != 0.0 {
            self.g_beta()?
        } else {
            vec![0.0; self.nx()]
        };
        let mut values = Vec::with_capacity(self.layout.len());
        for k in 0..self.layout.len() {
            let (x, a, y) = self.atom(k);
            let (ha, mu, s2) = if a == 1 {
                (h.h1[x], n.mu1[x], n.sigma2_1[x])
            } else {
                (h.h0[x], n.mu0[x], n.sigma2_0[x])
            };
            let g_a = if ha == 0.0 {
                0.0
            } else if s2 > 0.0 {
                ha * (y - mu) / s2
            } else {
                return Err(Error::Regularity {
                    condition: "R3",
                    detail: format!("Var(Y | x{x}, a={a}) = 0"),
                });
            };
            let pi = n.pi[x];
            let g_pi = h.hpi[x] * (a as f64 - pi) / (pi * (1.0 - pi));
            values.push(g_a + g_pi + alpha0 * g_beta[x]);
        }
        let f = RealFunction::new(self.space.clone(), values)?;
        // re-center to absorb round-off in the conditional means
        center(&self.p0, &f)
    }

    /// Linear tilt along `s_h`: moves `eta` in direction `h`, freezes `beta`.
    pub fn eta_coordinate_submodel(&self, h: &EtaDirection) -> Result<Submodel> {
        linear_tilt(&self.p0, &self.eta_score(h)?)
    }

    /// Coordinate submodels for every canonical direction.
    pub fn canonical_eta_coordinates(&self) -> Result<Vec<EtaCoordinate>> {
        EtaDirection::canonical(self.nx())
            .into_iter()
            .map(|h| {
                Ok(EtaCoordinate {
                    direction: h.flatten(),
                    submodel: self.eta_coordinate_submodel(&h)?,
                })
            })
            .collect()
    }

    /// `(mu1_dot, mu0_dot, pi_dot)` along a path with score `s`, from
    /// `E0[(Y - mu_a) s | x, a]` and `E0[(A - pi) s | x]`.
    pub fn coordinate_derivatives(&self, s: &ScoreFunction) -> Result<Vec<f64>> {
        let nx = self.nx();
        let n = &self.nuisances;
        let masses = self.p0.masses();
        let mut out = vec![0.0; 3 * nx];
        for x in 0..nx {
            let mut arm = [0.0; 2];
            let mut cov_pi = 0.0;
            for a in 0..2 {
                let mu = if a == 1 { n.mu1[x] } else { n.mu0[x] };
                let mut num = 0.0;
                let mut w = 0.0;
                for yi in 0..self.layout.ny() {
                    let k = self.layout.index(x, a, yi);
                    num += masses[k] * (self.layout.y[yi] - mu) * s.values()[k];
                    w += masses[k];
                    cov_pi += masses[k] * (a as f64 - n.pi[x]) * s.values()[k];
                }
                arm[a] = num / w;
            }
            out[x] = arm[1];
            out[nx + x] = arm[0];
            out[2 * nx + x] = cov_pi / self.spec.x_probs[x];
        }
        Ok(out)
    }

    /// `c = 4 sqrt(2) C_Y (1 + 1/epsilon)`.
    pub fn hellinger_lipschitz_constant(&self) -> f64 {
        4.0 * 2f64.sqrt() * self.c_y * (1.0 + 1.0 / self.epsilon)
    }

    /// Random pairs near `P0` that keep `pi` inside `[epsilon, 1 - epsilon]`.
    pub fn lipschitz_probe(
        &self,
        n_pairs: usize,
        radius: f64,
        seed: u64,
    ) -> Result<LipschitzReport> {
        let layout = self.layout.clone();
        let eps = self.epsilon;
        let admissible = move |p: &Distribution| match layout.nuisances(&p.masses()) {
            Ok((_, _, _, pi)) => pi.iter().all(|v| *v >= eps && *v <= 1.0 - eps),
            Err(_) => false,
        };
        hellinger_lipschitz_probe(
            &self.beta_functional(),
            &self.p0,
            n_pairs,
            radius,
            seed,
            Some(self.hellinger_lipschitz_constant()),
            Some(&admissible),
        )
    }

    pub fn check_regularity(&self) -> RegularityReport {
        let n = &self.nuisances;
        let eps = self.epsilon;
        let pi_lo = n.pi.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        let pi_hi = n.pi.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let r1 = pi_lo >= eps && pi_hi <= 1.0 - eps && self.epsilon_margin > eps;
        let y_max = self
            .spec
            .y_support
            .iter()
            .fold(0.0_f64, |a, y| a.max(y.abs()));
        let s2_actual = n
            .sigma2_1
            .iter()
            .chain(&n.sigma2_0)
            .fold(f64::INFINITY, |a, v| a.min(*v));
        let r3 = self.sigma2_min > 0.0 && s2_actual >= self.sigma2_min;
        let conditions = vec![
            Condition {
                condition: "R1",
                pass: r1,
                value: self.epsilon_margin,
                detail: format!(
                    "pi in [{pi_lo}, {pi_hi}], epsilon = {eps}, interior margin epsilon' = {}",
                    self.epsilon_margin
                ),
            },
            Condition {
                condition: "R2",
                pass: y_max <= self.c_y,
                value: y_max,
                detail: format!("max |y| = {y_max}, C_Y = {}", self.c_y),
            },
            Condition {
                condition: "R3",
                pass: r3,
                value: s2_actual,
                detail: format!(
                    "min Var(Y | x, a) = {s2_actual}, sigma^2 = {}",
                    self.sigma2_min
                ),
            },
            Condition {
                condition: "R4",
                pass: n.var_tau > VAR_FLOOR,
                value: n.var_tau,
                detail: format!("Var(tau) = {:e}", n.var_tau),
            },
        ];
        RegularityReport {
            pass: conditions.iter().all(|c| c.pass),
            conditions,
            epsilon: eps,
            c_y: self.c_y,
            sigma2_min: self.sigma2_min,
            lipschitz_c: self.hellinger_lipschitz_constant(),
        }
    }

    /// Population bias of both estimators at nuisance `eta0 + eps h`.
    fn population_bias(&self, h: &EtaDirection, eps: f64) -> Result<(f64, f64)> {
        let eta = self.perturbed_eta(h, eps)?;
        let m = self.estimating_function();
        let orth = m.moment(&self.p0, self.nuisances.beta0, &eta)?;
        let nx = self.nx();
        let plug = fsum((0..nx).map(|x| self.spec.x_probs[x] * (eta[x] - eta[nx + x])))
            - self.nuisances.beta0;
        Ok((orth, plug))
    }

    fn perturbed_eta(&self, h: &EtaDirection, eps: f64) -> Result<Vec<f64>> {
        let eta: Vec<f64> = self
            .nuisances
            .eta0()
            .iter()
            .zip(h.flatten())
            .map(|(e, d)| e + eps * d)
            .collect();
        let nx = self.nx();
        let lo = self.epsilon;
        if let Some(x) = (0..nx).find(|x| !(eta[2 * nx + x] >= lo && eta[2 * nx + x] <= 1.0 - lo)) {
            return Err(Error::Regularity {
                condition: "R1",
                detail: format!(
                    "perturbed pi[x{x}] = {} leaves [{lo}, {}] at eps = {eps}",
                    eta[2 * nx + x],
                    1.0 - lo
                ),
            });
        }
        Ok(eta)
    }

    /// Inverse-CDF draw of `n` atom indices.
    fn draw(&self, cdf: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
            })
            .collect()
    }

    /// Bias of the orthogonal (AIPW) and plug-in estimators when the
    /// nuisances are perturbed by `eps h`, over a grid of `eps`.
    pub fn bias_sweep(&self, config: &SweepConfig) -> Result<SweepTable> {
        if config.eps.is_empty() {
            return Err(Error::Invalid("eps grid is empty".into()));
        }
        if config.eps.iter().any(|e| !(e.is_finite() && *e >= 0.0))
            || config.eps.windows(2).any(|w| !(w[1] < w[0]))
        {
            return Err(Error::Invalid(
                "eps grid must be nonnegative and strictly decreasing".into(),
            ));
        }
        let h = config
            .direction
            .clone()
            .unwrap_or_else(|| EtaDirection::sweep_default(self.nx()));
        self.check_direction(&h)?;
        let etas = config
            .eps
            .iter()
            .map(|e| self.perturbed_eta(&h, *e))
            .collect::<Result<Vec<_>>>()?;

        let mut rows = Vec::with_capacity(2 * config.eps.len());
        if config.population {
            for e in &config.eps {
                let (orth, plug) = self.population_bias(&h, *e)?;
                for (estimator, b) in [(Estimator::Orthogonal, orth), (Estimator::Plugin, plug)] {
                    rows.push(SweepRow {
                        estimator,
                        eps: *e,
                        n: None,
                        reps: None,
                        mean_bias: b,
                        se: 0.0,
                        abs_bias: b.abs(),
                    });
                }
            }
        } else {
            if config.n == 0 || config.reps < 2 {
                return Err(Error::Invalid(
                    "sampled sweep needs n >= 1 and reps >= 2".into(),
                ));
            }
            let m = self.estimating_function();
            let nx = self.nx();
            let masses = self.p0.masses();
            let mut acc = 0.0;
            let cdf: Vec<f64> = masses
                .iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect();
            // replicate r draws from stream r; all eps share the draw
            let per_rep = (0..config.reps)
                .into_par_iter()
                .map(|r| -> Result<Vec<(f64, f64)>> {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(r as u64);
                    let sample = self.draw(&cdf, config.n, &mut rng);
                    let mut px = vec![0.0; nx];
                    for k in &sample {
                        px[self.layout.decode(*k).0] += 1.0 / config.n as f64;
                    }
                    etas.iter()
                        .map(|eta| {
                            let pseudo = sample
                                .iter()
                                .map(|k| m.evaluate(*k, 0.0, eta))
                                .collect::<Result<Vec<_>>>()?;
                            let orth = fsum(pseudo) / config.n as f64;
                            let plug = fsum((0..nx).map(|x| px[x] * (eta[x] - eta[nx + x])));
                            Ok((orth - self.nuisances.beta0, plug - self.nuisances.beta0))
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>>>()?;
            let reps = config.reps as f64;
            for (i, e) in config.eps.iter().enumerate() {
                for (estimator, pick) in
                    [(Estimator::Orthogonal, 0usize), (Estimator::Plugin, 1usize)]
                {
                    let b: Vec<f64> = per_rep
                        .iter()
                        .map(|r| if pick == 0 { r[i].0 } else { r[i].1 })
                        .collect();
                    let mean = fsum(b.iter().copied()) / reps;
                    let var = fsum(b.iter().map(|v| (v - mean).powi(2))) / (reps - 1.0);
                    rows.push(SweepRow {
                        estimator,
                        eps: *e,
                        n: Some(config.n),
                        reps: Some(config.reps),
                        mean_bias: mean,
                        se: (var / reps).sqrt(),
                        abs_bias: mean.abs(),
                    });
                }
            }
        }
        let slope = |which: Estimator| {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.estimator == which && r.eps > 0.0)
                .map(|r| (r.eps, r.abs_bias))
                .unzip();
            log_log_slope(&x, &y).unwrap_or(f64::NAN)
        };
        Ok(SweepTable {
            slope_orthogonal: slope(Estimator::Orthogonal),
            slope_plugin: slope(Estimator::Plugin),
            rows,
            direction: h,
            population: config.population,
        })
    }
}

/// `m = A/pi (Y - mu1) - (1-A)/(1-pi) (Y - mu0) + mu1 - mu0 - beta`.
fn ate_m_raw(a: usize, y: f64, mu1: f64, mu0: f64, pi: f64, beta: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InadmissibleNuisance(format!(
            "pi = {pi} outside (0, 1)"
        )));
    }
    let ipw = if a == 1 {
        (y - mu1) / pi
    } else {
        -(y - mu0) / (1.0 - pi)
    };
    Ok(ipw + mu1 - mu0 - beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub condition: &'static str,
    pub pass: bool,
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub conditions: Vec<Condition>,
    pub epsilon: f64,
    pub c_y: f64,
    pub sigma2_min: f64,
    /// Hellinger-Lipschitz constant of `beta`.
    pub lipschitz_c: f64,
    pub pass: bool,
}

impl RegularityReport {
    pub fn checks(&self) -> Vec<Check> {
        let mut out: Vec<Check> = self
            .conditions
            .iter()
            .map(|c| {
                let tol = match c.condition {
                    "R1" => self.epsilon,
                    "R2" => self.c_y,
                    "R3" => self.sigma2_min,
                    _ => VAR_FLOOR,
                };
                Check::new(format!("regularity.{}", c.condition), c.value, tol, c.pass)
            })
            .collect();
        out.push(Check::new(
            "hellinger_lipschitz.c",
            self.lipschitz_c,
            f64::INFINITY,
            true,
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Orthogonal,
    Plugin,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Orthogonal => "orthogonal",
            Estimator::Plugin => "plugin",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub eps: Vec<f64>,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub population: bool,
    /// Defaults to `EtaDirection::sweep_default`.
    pub direction: Option<EtaDirection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub estimator: Estimator,
    pub eps: f64,
    /// `None` in population mode.
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub mean_bias: f64,
    pub se: f64,
    pub abs_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub slope_orthogonal: f64,
    pub slope_plugin: f64,
    pub direction: EtaDirection,
    pub population: bool,
}

pub const ORTHOGONAL_SLOPE: (f64, f64) = (1.7, 2.3);
pub const PLUGIN_SLOPE: (f64, f64) = (0.8, 1.2);

impl SweepTable {
    pub fn checks(&self) -> Vec<Check> {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        vec![
            Check::new(
                "bias_sweep.slope_orthogonal",
                self.slope_orthogonal,
                ORTHOGONAL_SLOPE.1 - 2.0,
                within(self.slope_orthogonal, ORTHOGONAL_SLOPE),
            ),
            Check::new(
                "bias_sweep.slope_plugin",
                self.slope_plugin,
                PLUGIN_SLOPE.1 - 1.0,
                within(self.slope_plugin, PLUGIN_SLOPE),
            ),
        ]
    }
}
