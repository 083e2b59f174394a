//! Finite measure spaces, distributions on them, and the `L2(P0)` geometry
//! shared by every other module.
//!
//! A [`SampleSpace`] is a list of opaque atoms with positive weights `nu`
//! (the dominating measure). A [`Distribution`] stores a density `p` with
//! respect to `nu`, so the probability of atom `k` is `p[k] * nu[k]`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Absolute tolerance on `sum_k p_k nu_k = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Absolute tolerance on `E0[s] = 0` for score functions.
pub const MEAN_ZERO_TOL: f64 = 1e-10;

/// Neumaier-compensated sum.
pub(crate) fn fsum<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for x in terms {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpace {
    atoms: Vec<String>,
    nu: Vec<f64>,
}

pub type SpaceRef = Arc<SampleSpace>;

impl SampleSpace {
    pub fn new(atoms: Vec<String>, nu: Vec<f64>) -> Result<SpaceRef> {
        if atoms.len() < 2 {
            return Err(Error::InvalidSpace(format!(
                "need at least 2 atoms, got {}",
                atoms.len()
            )));
        }
        if atoms.len() != nu.len() {
            return Err(Error::DimensionMismatch {
                expected: atoms.len(),
                actual: nu.len(),
            });
        }
        if let Some(i) = nu.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidSpace(format!(
                "weight nu[{i}] = {} must be positive and finite",
                nu[i]
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(atoms.len());
        for a in &atoms {
            if !seen.insert(a.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate atom '{a}'")));
            }
        }
        Ok(Arc::new(SampleSpace { atoms, nu }))
    }

    /// Space with counting measure.
    pub fn counting(atoms: Vec<String>) -> Result<SpaceRef> {
        let nu = vec![1.0; atoms.len()];
        Self::new(atoms, nu)
    }

    /// Counting-measure space with atoms named `z0, z1, ...`.
    pub fn indexed(k: usize) -> Result<SpaceRef> {
        Self::counting((0..k).map(|i| format!("z{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn index_of(&self, atom: &str) -> Option<usize> {
        self.atoms.iter().position(|a| a == atom)
    }
}

fn same_space(a: &SpaceRef, b: &SpaceRef) -> Result<()> {
    if Arc::ptr_eq(a, b) {
        return Ok(());
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a != b {
        return Err(Error::SpaceMismatch);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    space: SpaceRef,
    p: Vec<f64>,
}

impl Distribution {
    /// Builds a distribution from densities with respect to `nu`.
    pub fn new(space: SpaceRef, p: Vec<f64>) -> Result<Self> {
        if p.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                actual: p.len(),
            });
        }
        if let Some(index) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(i) = p.iter().position(|v| *v < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "negative density p[{i}] = {}",
                p[i]
            )));
        }
        let total = fsum(p.iter().zip(space.nu()).map(|(pk, w)| pk * w));
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "total mass {total} differs from 1"
            )));
        }
        Ok(Distribution { space, p })
    }

    /// Builds a distribution from atom probabilities `P({z_k})`.
    pub fn from_masses(space: SpaceRef, masses: &[f64]) -> Result<Self> {
        if masses.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                actual: masses.len(),
            });
        }
        let p = masses.iter().zip(space.nu()).map(|(m, w)| m / w).collect();
        Self::new(space, p)
    }

    pub fn uniform(space: SpaceRef) -> Self {
        let total: f64 = space.nu().iter().sum();
        let p = vec![1.0 / total; space.len()];
        Distribution { space, p }
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Densities with respect to `nu`.
    pub fn density(&self) -> &[f64] {
        &self.p
    }

    /// Probability of atom `k`.
    pub fn mass(&self, k: usize) -> f64 {
        self.p[k] * self.space.nu[k]
    }

    pub fn masses(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.mass(k)).collect()
    }

    pub fn is_full_support(&self) -> bool {
        self.p.iter().all(|v| *v > 0.0)
    }

    pub(crate) fn require_full_support(&self) -> Result<()> {
        match self.p.iter().position(|v| *v <= 0.0) {
            Some(index) => Err(Error::NotFullSupport { index }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealFunction {
    space: SpaceRef,
    values: Vec<f64>,
}

impl RealFunction {
    pub fn new(space: SpaceRef, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(RealFunction { space, values })
    }

    pub fn zeros(space: SpaceRef) -> Self {
        Self::constant(space, 0.0)
    }

    pub fn constant(space: SpaceRef, c: f64) -> Self {
        let values = vec![c; space.len()];
        RealFunction { space, values }
    }

    /// Indicator of atom `k`.
    pub fn indicator(space: SpaceRef, k: usize) -> Self {
        let mut values = vec![0.0; space.len()];
        values[k] = 1.0;
        RealFunction { space, values }
    }

    pub fn space(&self) -> &SpaceRef {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        RealFunction {
            space: self.space.clone(),
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &RealFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(RealFunction {
            space: self.space.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn add(&self, other: &RealFunction) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RealFunction) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }
}

/// A mean-zero function under `base`; an element of `L2^0(P0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFunction {
    function: RealFunction,
    base: Distribution,
}

impl ScoreFunction {
    pub fn new(base: &Distribution, function: RealFunction) -> Result<Self> {
        let mean = expectation(base, &function)?;
        if mean.abs() > MEAN_ZERO_TOL {
            return Err(Error::NotMeanZero { mean });
        }
        Ok(ScoreFunction {
            function,
            base: base.clone(),
        })
    }

    pub fn from_values(base: &Distribution, values: Vec<f64>) -> Result<Self> {
        let f = RealFunction::new(base.space().clone(), values)?;
        Self::new(base, f)
    }

    pub fn zero(base: &Distribution) -> Self {
        ScoreFunction {
            function: RealFunction::zeros(base.space().clone()),
            base: base.clone(),
        }
    }

    pub fn function(&self) -> &RealFunction {
        &self.function
    }

    pub fn values(&self) -> &[f64] {
        self.function.values()
    }

    pub fn base(&self) -> &Distribution {
        &self.base
    }

    pub fn sup_norm(&self) -> f64 {
        self.function.sup_norm()
    }

    pub fn scale(&self, c: f64) -> Self {
        ScoreFunction {
            function: self.function.scale(c),
            base: self.base.clone(),
        }
    }

    /// `L2(P0)` norm.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.base, &self.function).unwrap_or(f64::NAN)
    }
}

pub fn expectation(dist: &Distribution, f: &RealFunction) -> Result<f64> {
    same_space(dist.space(), f.space())?;
    let nu = dist.space.nu();
    Ok(fsum(
        (0..dist.len()).map(|k| f.values[k] * dist.p[k] * nu[k]),
    ))
}

pub fn inner_product(dist: &Distribution, f: &RealFunction, g: &RealFunction) -> Result<f64> {
    same_space(dist.space(), f.space())?;
    same_space(dist.space(), g.space())?;
    let nu = dist.space.nu();
    Ok(fsum(
        (0..dist.len()).map(|k| f.values[k] * g.values[k] * dist.p[k] * nu[k]),
    ))
}

pub fn l2_norm(dist: &Distribution, f: &RealFunction) -> Result<f64> {
    Ok(inner_product(dist, f, f)?.sqrt())
}

/// `f - E_dist[f]`.
pub fn center(dist: &Distribution, f: &RealFunction) -> Result<ScoreFunction> {
    let mean = expectation(dist, f)?;
    let centered = f.map(|v| v - mean);
    ScoreFunction::new(dist, centered)
}

/// Hellinger distance `(1/sqrt 2) * || sqrt p1 - sqrt p2 ||_{L2(nu)}`.
pub fn hellinger(d1: &Distribution, d2: &Distribution) -> Result<f64> {
    same_space(d1.space(), d2.space())?;
    let nu = d1.space.nu();
    let ss = fsum((0..d1.len()).map(|k| {
        let (a, b) = (d1.p[k], d2.p[k]);
        // (sqrt a - sqrt b) = (a - b) / (sqrt a + sqrt b) avoids cancellation
        let denom = a.sqrt() + b.sqrt();
        let diff = if denom > 0.0 { (a - b) / denom } else { 0.0 };
        diff * diff * nu[k]
    }));
    Ok((ss / 2.0).sqrt())
}

/// `sum_k |p1 - p2| nu_k` (no factor 1/2).
pub fn total_variation(d1: &Distribution, d2: &Distribution) -> Result<f64> {
    same_space(d1.space(), d2.space())?;
    let nu = d1.space.nu();
    Ok(fsum(
        (0..d1.len()).map(|k| (d1.p[k] - d2.p[k]).abs() * nu[k]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point(p: [f64; 2]) -> Distribution {
        Distribution::new(SampleSpace::indexed(2).unwrap(), p.to_vec()).unwrap()
    }

    fn func(d: &Distribution, v: &[f64]) -> RealFunction {
        RealFunction::new(d.space().clone(), v.to_vec()).unwrap()
    }

    #[test]
    fn space_validation() {
        assert!(SampleSpace::indexed(1).is_err());
        assert!(SampleSpace::new(vec!["a".into(), "a".into()], vec![1.0, 1.0]).is_err());
        assert!(SampleSpace::new(vec!["a".into(), "b".into()], vec![1.0, 0.0]).is_err());
        assert!(SampleSpace::new(vec!["a".into(), "b".into()], vec![1.0]).is_err());
    }

    #[test]
    fn distribution_validation() {
        let s = SampleSpace::indexed(2).unwrap();
        assert!(Distribution::new(s.clone(), vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(s.clone(), vec![1.1, -0.1]).is_err());
        assert!(Distribution::new(s.clone(), vec![1.0]).is_err());
        let d = Distribution::new(s, vec![1.0, 0.0]).unwrap();
        assert!(!d.is_full_support());
    }

    #[test]
    fn non_counting_measure() {
        let s = SampleSpace::new(vec!["a".into(), "b".into()], vec![2.0, 0.5]).unwrap();
        let d = Distribution::new(s, vec![0.25, 1.0]).unwrap();
        assert_eq!(d.masses(), vec![0.5, 0.5]);
    }

    #[test]
    fn expectation_examples() {
        let d = two_point([0.5, 0.5]);
        assert_eq!(expectation(&d, &func(&d, &[2.0, 4.0])).unwrap(), 3.0);
        assert_eq!(expectation(&d, &func(&d, &[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(expectation(&d, &func(&d, &[1.0, 1.0])).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let d = two_point([0.5, 0.5]);
        let other = RealFunction::zeros(SampleSpace::indexed(3).unwrap());
        assert!(matches!(
            expectation(&d, &other),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn inner_product_examples() {
        let d = two_point([0.5, 0.5]);
        let f = func(&d, &[2.0, 4.0]);
        assert_eq!(
            inner_product(&d, &f, &func(&d, &[1.0, -1.0])).unwrap(),
            -1.0
        );
        assert_eq!(inner_product(&d, &f, &func(&d, &[0.0, 0.0])).unwrap(), 0.0);
        let one = func(&d, &[1.0, 1.0]);
        assert_eq!(inner_product(&d, &one, &one).unwrap(), 1.0);
    }

    #[test]
    fn center_examples() {
        let d = two_point([0.5, 0.5]);
        assert_eq!(
            center(&d, &func(&d, &[2.0, 4.0])).unwrap().values(),
            &[-1.0, 1.0]
        );
        assert_eq!(
            center(&d, &func(&d, &[7.0, 7.0])).unwrap().values(),
            &[0.0, 0.0]
        );
        assert_eq!(
            center(&d, &func(&d, &[1.0, -1.0])).unwrap().values(),
            &[1.0, -1.0]
        );
    }

    #[test]
    fn score_rejects_nonzero_mean() {
        let d = two_point([0.5, 0.5]);
        assert!(matches!(
            ScoreFunction::new(&d, func(&d, &[1.0, 0.0])),
            Err(Error::NotMeanZero { .. })
        ));
    }

    #[test]
    fn hellinger_and_tv_examples() {
        let a = two_point([0.5, 0.5]);
        assert_eq!(hellinger(&a, &a).unwrap(), 0.0);
        assert_eq!(total_variation(&a, &a).unwrap(), 0.0);

        let (e0, e1) = (two_point([1.0, 0.0]), two_point([0.0, 1.0]));
        assert!((hellinger(&e0, &e1).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(total_variation(&e0, &e1).unwrap(), 2.0);

        // direct formula: (1/sqrt2) * sqrt((sqrt.5-sqrt.7)^2 + (sqrt.5-sqrt.3)^2)
        let b = two_point([0.7, 0.3]);
        let oracle = ((0.5f64.sqrt() - 0.7f64.sqrt()).powi(2)
            + (0.5f64.sqrt() - 0.3f64.sqrt()).powi(2))
        .sqrt()
            / 2f64.sqrt();
        let h = hellinger(&a, &b).unwrap();
        assert!((h - oracle).abs() < 1e-15);
        assert!((h - 0.14524).abs() < 1e-5);
    }

    fn dist_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-3).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    fn renormalized(space: &SpaceRef, w: Vec<f64>) -> Distribution {
        // re-normalize with compensated sum so construction never trips the 1e-12 gate
        let s = fsum(w.iter().copied());
        Distribution::new(space.clone(), w.iter().map(|x| x / s).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn tv_bounded_by_hellinger((a, b) in (2usize..30).prop_flat_map(|k| (dist_strategy(k), dist_strategy(k)))) {
            let space = SampleSpace::indexed(a.len()).unwrap();
            let d1 = renormalized(&space, a);
            let d2 = renormalized(&space, b);
            let h = hellinger(&d1, &d2).unwrap();
            let tv = total_variation(&d1, &d2).unwrap();
            prop_assert!(h >= 0.0 && tv >= 0.0);
            prop_assert!(tv <= 2.0 * 2f64.sqrt() * h + 1e-12);
            prop_assert_eq!(hellinger(&d1, &d1).unwrap(), 0.0);
        }

        #[test]
        fn center_is_idempotent_and_mean_zero(
            (w, f) in (2usize..30).prop_flat_map(|k| (dist_strategy(k), proptest::collection::vec(-10.0f64..10.0, k)))
        ) {
            let space = SampleSpace::indexed(w.len()).unwrap();
            let d = renormalized(&space, w);
            let f = RealFunction::new(space, f).unwrap();
            let c1 = center(&d, &f).unwrap();
            prop_assert!(expectation(&d, c1.function()).unwrap().abs() <= 1e-12);
            let c2 = center(&d, c1.function()).unwrap();
            for (x, y) in c1.values().iter().zip(c2.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn inner_product_bilinear_psd(
            (w, f, g, c) in (2usize..20).prop_flat_map(|k| (
                dist_strategy(k),
                proptest::collection::vec(-5.0f64..5.0, k),
                proptest::collection::vec(-5.0f64..5.0, k),
                -3.0f64..3.0,
            ))
        ) {
            let space = SampleSpace::indexed(w.len()).unwrap();
            let d = renormalized(&space, w);
            let f = RealFunction::new(space.clone(), f).unwrap();
            let g = RealFunction::new(space, g).unwrap();
            let fg = inner_product(&d, &f, &g).unwrap();
            prop_assert!((fg - inner_product(&d, &g, &f).unwrap()).abs() < 1e-12);
            prop_assert!(inner_product(&d, &f, &f).unwrap() >= 0.0);
            let lhs = inner_product(&d, &f.scale(c).add(&g).unwrap(), &g).unwrap();
            let rhs = c * fg + inner_product(&d, &g, &g).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
            let lin = expectation(&d, &f.scale(c).add(&g).unwrap()).unwrap();
            prop_assert!((lin - c * expectation(&d, &f).unwrap() - expectation(&d, &g).unwrap()).abs() < 1e-10);
        }
    }
}
