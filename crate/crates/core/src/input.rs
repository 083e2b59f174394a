//! Input files. All three formats are TOML documents with dotted keys, e.g.
//!
//! ```text
//! space.atoms = ["a", "b"]
//! space.nu = [1.0, 1.0]
//! p0 = [0.7, 0.3]
//! beta.kind = "sum_sq"
//! estimating.kind = "density"
//! ```
//!
//! Length mismatches, negative entries and invalid distributions are
//! reported with the line of the offending key.

use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use crate::ate::ATEModelSpec;
use crate::error::{Error, Result};
use crate::estimating::EstimatingFunction;
use crate::functional::{NuisanceFunctional, ScalarFunctional};
use crate::model::{Distribution, RealFunction, SampleSpace, ScoreFunction};

fn line_of(src: &str, span: &Range<usize>) -> usize {
    src[..span.start.min(src.len())].matches('\n').count() + 1
}

fn at<T>(src: &str, v: &Spanned<T>, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line_of(src, &v.span()),
        message: message.into(),
    }
}

fn parse_toml<'de, T: Deserialize<'de>>(src: &'de str) -> Result<T> {
    toml::from_str(src).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(src, &s)).unwrap_or(0),
        message: e.message().to_string(),
    })
}

fn check_len<T>(src: &str, key: &str, v: &Spanned<Vec<T>>, expected: usize) -> Result<()> {
    if v.get_ref().len() != expected {
        return Err(at(
            src,
            v,
            format!(
                "{key} has {} entries, expected {expected}",
                v.get_ref().len()
            ),
        ));
    }
    Ok(())
}

fn check_nonneg(src: &str, key: &str, v: &Spanned<Vec<f64>>) -> Result<()> {
    if let Some(i) = v.get_ref().iter().position(|x| *x < 0.0) {
        return Err(at(
            src,
            v,
            format!("{key}[{i}] = {} is negative", v.get_ref()[i]),
        ));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceSection {
    atoms: Spanned<Vec<String>>,
    nu: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BetaSection {
    kind: Spanned<String>,
    f: Option<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatingSection {
    kind: Spanned<String>,
    slope: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    space: SpaceSection,
    p0: Spanned<Vec<f64>>,
    beta: Option<BetaSection>,
    estimating: Option<EstimatingSection>,
}

/// A parsed model file: base distribution plus optional target functional
/// and estimating function.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub p0: Distribution,
    pub beta: Option<ScalarFunctional>,
    /// Estimating function with the nuisance functional it is paired with.
    pub estimating: Option<(EstimatingFunction, NuisanceFunctional)>,
}

impl ModelInput {
    pub fn beta(&self) -> Result<&ScalarFunctional> {
        self.beta
            .as_ref()
            .ok_or_else(|| Error::Invalid("model file has no beta section".into()))
    }

    pub fn estimating(&self) -> Result<&(EstimatingFunction, NuisanceFunctional)> {
        self.estimating
            .as_ref()
            .ok_or_else(|| Error::Invalid("model file has no estimating section".into()))
    }
}

pub fn parse_model(src: &str) -> Result<ModelInput> {
    let file: ModelFile = parse_toml(src)?;
    let atoms = file.space.atoms.get_ref().clone();
    let k = atoms.len();
    let nu = match &file.space.nu {
        Some(nu) => {
            check_len(src, "space.nu", nu, k)?;
            nu.get_ref().clone()
        }
        None => vec![1.0; k],
    };
    let space =
        SampleSpace::new(atoms, nu).map_err(|e| at(src, &file.space.atoms, e.to_string()))?;
    check_len(src, "p0", &file.p0, k)?;
    check_nonneg(src, "p0", &file.p0)?;
    let p0 = Distribution::new(space.clone(), file.p0.get_ref().clone())
        .map_err(|e| at(src, &file.p0, e.to_string()))?;

    let mut mean_f = None;
    let beta = match &file.beta {
        None => None,
        Some(b) => Some(match b.kind.get_ref().as_str() {
            "sum_sq" => ScalarFunctional::sum_of_squares(),
            "mean" => {
                let f =
                    b.f.as_ref()
                        .ok_or_else(|| at(src, &b.kind, "beta.kind = \"mean\" needs beta.f"))?;
                check_len(src, "beta.f", f, k)?;
                let f = RealFunction::new(space.clone(), f.get_ref().clone())
                    .map_err(|e| at(src, &b.kind, e.to_string()))?;
                mean_f = Some(f.clone());
                ScalarFunctional::mean(f)
            }
            other => {
                return Err(at(
                    src,
                    &b.kind,
                    format!("unknown beta.kind '{other}' (expected mean or sum_sq)"),
                ))
            }
        }),
    };

    let estimating = match &file.estimating {
        None => None,
        Some(e) => Some(match e.kind.get_ref().as_str() {
            "linear" => {
                let f = mean_f.clone().ok_or_else(|| {
                    at(
                        src,
                        &e.kind,
                        "estimating.kind = \"linear\" needs beta.kind = \"mean\"",
                    )
                })?;
                (
                    EstimatingFunction::linear(f, e.slope.unwrap_or(1.0)),
                    NuisanceFunctional::empty(),
                )
            }
            "density" => (
                EstimatingFunction::density_counterexample(k),
                NuisanceFunctional::density(
                    space.atoms().iter().map(|a| format!("p({a})")).collect(),
                ),
            ),
            other => {
                return Err(at(
                    src,
                    &e.kind,
                    format!("unknown estimating.kind '{other}' (expected linear or density)"),
                ))
            }
        }),
    };
    Ok(ModelInput {
        p0,
        beta,
        estimating,
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreFile {
    score: Option<Spanned<Vec<f64>>>,
    tilt: Option<Spanned<Vec<f64>>>,
    alt: Option<Spanned<Vec<f64>>>,
    phi: Option<Spanned<Vec<f64>>>,
    scores: Option<Spanned<Vec<Vec<f64>>>>,
    directions: Option<Spanned<Vec<Vec<f64>>>>,
}

/// Score-side inputs, validated against a model's base distribution.
#[derive(Debug, Clone, Default)]
pub struct ScoreInput {
    /// Candidate score `s`.
    pub score: Option<ScoreFunction>,
    /// Direction of the linear tilt; defaults to `score`.
    pub tilt: Option<ScoreFunction>,
    /// Second score for the Hellinger gap.
    pub alt: Option<ScoreFunction>,
    /// Candidate influence function.
    pub phi: Option<ScoreFunction>,
    pub scores: Vec<ScoreFunction>,
    /// Nuisance directions, not tied to the base distribution.
    pub directions: Vec<Vec<f64>>,
}

impl ScoreInput {
    pub fn score(&self) -> Result<&ScoreFunction> {
        self.score
            .as_ref()
            .ok_or_else(|| Error::Invalid("score file has no score".into()))
    }

    /// Tilt direction: `tilt` when given, else `score`.
    pub fn tilt(&self) -> Result<&ScoreFunction> {
        match &self.tilt {
            Some(t) => Ok(t),
            None => self.score(),
        }
    }
}

fn mean_zero(
    src: &str,
    key: &str,
    v: &Spanned<Vec<f64>>,
    base: &Distribution,
) -> Result<ScoreFunction> {
    check_len(src, key, v, base.len())?;
    let f = RealFunction::new(base.space().clone(), v.get_ref().clone())
        .map_err(|e| at(src, v, e.to_string()))?;
    ScoreFunction::new(base, f).map_err(|e| at(src, v, format!("{key}: {e}")))
}

pub fn parse_scores(src: &str, base: &Distribution) -> Result<ScoreInput> {
    let file: ScoreFile = parse_toml(src)?;
    let one = |key: &str, v: &Option<Spanned<Vec<f64>>>| -> Result<Option<ScoreFunction>> {
        v.as_ref().map(|v| mean_zero(src, key, v, base)).transpose()
    };
    let scores = match &file.scores {
        None => Vec::new(),
        Some(rows) => rows
            .get_ref()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.len() != base.len() {
                    return Err(at(
                        src,
                        rows,
                        format!(
                            "scores[{i}] has {} entries, expected {}",
                            r.len(),
                            base.len()
                        ),
                    ));
                }
                let f = RealFunction::new(base.space().clone(), r.clone())
                    .map_err(|e| at(src, rows, e.to_string()))?;
                ScoreFunction::new(base, f).map_err(|e| at(src, rows, format!("scores[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(ScoreInput {
        score: one("score", &file.score)?,
        tilt: one("tilt", &file.tilt)?,
        alt: one("alt", &file.alt)?,
        phi: one("phi", &file.phi)?,
        scores,
        directions: file.directions.map(|d| d.into_inner()).unwrap_or_default(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct XSection {
    probs: Spanned<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CondSection {
    a1: Spanned<Vec<Vec<f64>>>,
    a0: Spanned<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct YSection {
    support: Spanned<Vec<f64>>,
    cond: CondSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AteFile {
    x: XSection,
    pi: Spanned<Vec<f64>>,
    y: YSection,
    epsilon: Option<f64>,
    c_y: Option<f64>,
    sigma2_min: Option<f64>,
}

pub fn parse_ate_spec(src: &str) -> Result<ATEModelSpec> {
    let file: AteFile = parse_toml(src)?;
    let nx = file.x.probs.get_ref().len();
    let ny = file.y.support.get_ref().len();
    check_nonneg(src, "x.probs", &file.x.probs)?;
    check_len(src, "pi", &file.pi, nx)?;
    check_nonneg(src, "pi", &file.pi)?;
    for (key, m) in [
        ("y.cond.a1", &file.y.cond.a1),
        ("y.cond.a0", &file.y.cond.a0),
    ] {
        check_len(src, key, m, nx)?;
        for (x, row) in m.get_ref().iter().enumerate() {
            if row.len() != ny {
                return Err(at(
                    src,
                    m,
                    format!("{key} row {x} has {} entries, expected {ny}", row.len()),
                ));
            }
            if let Some(i) = row.iter().position(|v| *v < 0.0) {
                return Err(at(
                    src,
                    m,
                    format!("{key}[{x}][{i}] = {} is negative", row[i]),
                ));
            }
        }
    }
    Ok(ATEModelSpec {
        x_probs: file.x.probs.into_inner(),
        pi: file.pi.into_inner(),
        y_support: file.y.support.into_inner(),
        y_cond_a1: file.y.cond.a1.into_inner(),
        y_cond_a0: file.y.cond.a0.into_inner(),
        epsilon: file.epsilon,
        c_y: file.c_y,
        sigma2_min: file.sigma2_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"
space.atoms = ["a", "b"]
p0 = [0.7, 0.3]
beta.kind = "sum_sq"
estimating.kind = "density"
"#;

    #[test]
    fn parses_model() {
        let m = parse_model(MODEL).unwrap();
        assert_eq!(m.p0.density(), &[0.7, 0.3]);
        assert!((m.beta().unwrap().evaluate(&m.p0).unwrap() - 0.58).abs() < 1e-15);
        assert_eq!(
            m.estimating().unwrap().1.labels(),
            &["p(a)".to_string(), "p(b)".to_string()]
        );
    }

    #[test]
    fn length_mismatch_names_line() {
        let src = "space.atoms = [\"a\", \"b\"]\nspace.nu = [1.0]\np0 = [0.5, 0.5]\n";
        assert_eq!(
            parse_model(src).unwrap_err(),
            Error::Parse {
                line: 2,
                message: "space.nu has 1 entries, expected 2".into()
            }
        );
        let src = "space.atoms = [\"a\", \"b\"]\n\np0 = [0.5, 0.2, 0.3]\n";
        assert!(matches!(
            parse_model(src),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn negative_entry_names_line() {
        let src = "space.atoms = [\"a\", \"b\"]\np0 = [1.5, -0.5]\n";
        let err = parse_model(src).unwrap_err();
        assert!(
            matches!(err, Error::Parse { line: 2, ref message } if message.contains("negative"))
        );
    }

    #[test]
    fn unnormalized_p0_names_line() {
        let src = "space.atoms = [\"a\", \"b\"]\n# comment\np0 = [0.5, 0.6]\n";
        assert!(matches!(
            parse_model(src),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn syntax_error_has_line() {
        let src = "space.atoms = [\"a\", \"b\"]\np0 = [0.5, 0.5\n";
        assert!(matches!(parse_model(src), Err(Error::Parse { line, .. }) if line >= 2));
    }

    #[test]
    fn scores_validated_against_base() {
        let m = parse_model(MODEL).unwrap();
        let s = parse_scores(
            "score = [0.3, -0.7]\nscores = [[0.3, -0.7], [-0.3, 0.7]]\n",
            &m.p0,
        )
        .unwrap();
        assert_eq!(s.scores.len(), 2);
        assert_eq!(s.tilt().unwrap().values(), &[0.3, -0.7]);
        let err = parse_scores("\nscore = [1.0, 1.0]\n", &m.p0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn parses_ate_spec() {
        let src = r#"
x.probs = [0.5, 0.5]
pi = [0.5, 0.5]
y.support = [0, 1]
y.cond.a1 = [[0.4, 0.6], [0.1, 0.9]]
y.cond.a0 = [[0.8, 0.2], [0.7, 0.3]]
"#;
        assert_eq!(parse_ate_spec(src).unwrap(), ATEModelSpec::reference());
        let bad = src.replace("[[0.8, 0.2], [0.7, 0.3]]", "[[0.8, 0.2]]");
        assert!(matches!(
            parse_ate_spec(&bad),
            Err(Error::Parse { line: 6, .. })
        ));
        let neg = src.replace("pi = [0.5, 0.5]", "pi = [0.5, -0.5]");
        assert!(matches!(
            parse_ate_spec(&neg),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
