//! The `ortho` command line.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails or the
//! mathematics rejects the input (misspecification, broken product
//! structure, ...), 2 on usage or input errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ate::{ATEModel, ATEModelSpec, EtaDirection, SweepConfig, SweepTable};
use crate::error::{Error, Result};
use crate::estimating::{
    canonical_directions, chain_rule_check, check_neyman, default_chain_grid, forward_verify,
    gradient_characterization_check, jacobian_g, negative_identity_check, reverse_verify,
    EquivalenceReport, EstimatingFunction, EtaCoordinate, ParameterPair, DEGENERATE_JACOBIAN,
};
use crate::functional::{
    compute_eif, nuisance_path_derivative, nuisance_tangent_basis, pathwise_derivative, sup_norm,
    verify_influence, NuisanceFunctional, ScalarFunctional,
};
use crate::input::{parse_ate_spec, parse_model, parse_scores, ModelInput, ScoreInput};
use crate::model::{center, inner_product, Distribution, RealFunction, SampleSpace, ScoreFunction};
use crate::report::{all_pass, Check};
use crate::submodel::{
    default_qmd_grid, hellinger_gap_check, linear_tilt, recover_score, verify_qmd, DerivativeCheck,
};
use crate::tolerance::Tolerances;

const DEFAULT_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
const DEFAULT_N: usize = 2000;
const DEFAULT_REPS: usize = 200;
const ATE_RANDOM_TILTS: usize = 50;
const LIPSCHITZ_PAIRS: usize = 200;
const LIPSCHITZ_RADIUS: f64 = 0.05;
/// `beta(P_t) - beta0 - t` along the ATE beta-coordinate submodel.
const BETA_COORD_EXACT: f64 = 1e-12;
const BETA_COORD_T: f64 = 1e-3;
const COUNTEREXAMPLE_STEP: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(
    name = "ortho",
    version,
    about = "Numerical checks of Neyman orthogonality and pathwise differentiability"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model file (sample space, p0, target, estimating function).
    #[arg(long, global = true)]
    model: Option<PathBuf>,

    /// ATE model file; the built-in reference model is used when omitted.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,

    /// Score file (score, tilt, alt, phi, scores, directions).
    #[arg(long, global = true)]
    score: Option<PathBuf>,

    /// Comma-separated, strictly decreasing t grid.
    #[arg(long, global = true, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,

    /// Tolerance override `key=value`; repeatable.
    #[arg(long = "tol", global = true, value_parser = parse_tol)]
    tol: Vec<(String, f64)>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    /// Exact expectations instead of Monte Carlo in `ate bias-sweep`.
    #[arg(long, global = true)]
    population: bool,

    /// Comma-separated, strictly decreasing perturbation sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,

    /// Sample size per replicate in a sampled sweep.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Replicates in a sampled sweep.
    #[arg(long, global = true)]
    reps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// QMD remainder of the linear tilt along `tilt` against `score`.
    Qmd,
    /// Recover the score of the linear tilt by finite differences.
    ScoreRecover,
    /// Hellinger distance between the tilts along `score` and `alt`.
    HellingerGap,
    /// Efficient influence function of the model's target.
    Eif,
    /// Check `phi` against pathwise derivatives along `scores`.
    InfluenceVerify,
    /// Basis of the scores along which the target does not move.
    NuisanceBasis,
    /// Gateaux derivatives of the moment in nuisance directions.
    Neyman,
    /// Derivative of the moment in beta.
    Jacobian,
    /// Orthogonality implies pathwise differentiability.
    Forward,
    /// Pathwise differentiability implies orthogonality.
    Reverse,
    /// First-order expansion of `m(.; beta(P_t), eta(P_t))`.
    ChainRule,
    /// `d/dt E0[m(beta_t, eta_t)] = -E0[m0 s]`.
    GradientChar,
    /// `d/dbeta E0[m(beta, eta0)]`, expected to be -1.
    NegativeIdentity,
    /// Non-orthogonal estimating function whose target is still pathwise differentiable.
    Counterexample {
        #[arg(long, value_enum, default_value_t = CheckKind::All)]
        check: CheckKind,
        /// Print whether the expected outcome (Neyman fails, influence passes) was met.
        #[arg(long)]
        expect_nonorthogonal: bool,
    },
    /// Average treatment effect model.
    Ate {
        #[command(subcommand)]
        command: AteCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CheckKind {
    Neyman,
    Influence,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyDirection {
    Forward,
    Reverse,
}

#[derive(Debug, Subcommand)]
enum AteCommand {
    Verify {
        #[arg(long, value_enum, default_value_t = VerifyDirection::Forward)]
        direction: VerifyDirection,
    },
    /// Pathwise derivatives along the coordinate submodels.
    Coords,
    /// Bias of orthogonal and plug-in estimators under nuisance perturbation.
    BiasSweep,
    Regularity,
}

fn parse_tol(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|e| format!("bad value in '{s}': {e}"))?;
    Tolerances::default().set(k.trim(), v)?;
    Ok((k.trim().to_string(), v))
}

/// Checks plus context, rendered as text or CSV.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub command: String,
    pub info: Vec<String>,
    pub checks: Vec<Check>,
    pub digest: String,
    pub seed: u64,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        all_pass(&self.checks)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ortho {}\n", self.command);
        for line in &self.info {
            let _ = writeln!(s, "  {line}");
        }
        s.push_str("checks:\n");
        for c in &self.checks {
            let _ = writeln!(s, "  {c}");
        }
        let _ = writeln!(s, "overall: {}", if self.pass() { "PASS" } else { "FAIL" });
        s.push_str(&self.provenance());
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let row =
            |w: &mut csv::Writer<Vec<u8>>, r: [String; 4]| w.write_record(&r).map_err(csv_err);
        row(
            &mut w,
            ["check", "value", "tolerance", "pass"].map(String::from),
        )?;
        for c in &self.checks {
            row(
                &mut w,
                [
                    c.name.clone(),
                    num(c.value),
                    num(c.tolerance),
                    c.pass.to_string(),
                ],
            )?;
        }
        row(
            &mut w,
            [
                "overall".into(),
                "NA".into(),
                "NA".into(),
                self.pass().to_string(),
            ],
        )?;
        finish_csv(w)
    }

    fn provenance(&self) -> String {
        provenance(&self.digest, self.seed)
    }
}

fn provenance(digest: &str, seed: u64) -> String {
    format!(
        "provenance:\n  input_sha256: {digest}\n  version: {} {}\n  seed: {seed}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    )
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

/// Shortest round-trip representation, scientific outside `[1e-4, 1e15)`;
/// locale independent.
fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&v.abs()) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt_num(v: Option<usize>) -> String {
    v.map(|n| n.to_string()).unwrap_or_else(|| "NA".into())
}

fn sweep_csv(table: &SweepTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "estimator",
        "eps",
        "n",
        "reps",
        "mean_bias",
        "se",
        "abs_bias",
    ])
    .map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.estimator.as_str().to_string(),
            num(r.eps),
            opt_num(r.n),
            opt_num(r.reps),
            num(r.mean_bias),
            num(r.se),
            num(r.abs_bias),
        ])
        .map_err(csv_err)?;
    }
    for (name, v) in [
        ("slope:orthogonal", table.slope_orthogonal),
        ("slope:plugin", table.slope_plugin),
    ] {
        w.write_record([name, "NA", "NA", "NA", &num(v), "NA", "NA"])
            .map_err(csv_err)?;
    }
    finish_csv(w)
}

fn sweep_text(table: &SweepTable) -> String {
    let mut s = format!(
        "  mode: {}\n  {:<11} {:>8} {:>7} {:>6} {:>14} {:>12} {:>12}\n",
        if table.population {
            "population"
        } else {
            "sampled"
        },
        "estimator",
        "eps",
        "n",
        "reps",
        "mean_bias",
        "se",
        "abs_bias"
    );
    for r in &table.rows {
        let _ = writeln!(
            s,
            "  {:<11} {:>8} {:>7} {:>6} {:>+14.6e} {:>12.4e} {:>12.4e}",
            r.estimator.as_str(),
            r.eps,
            opt_num(r.n),
            opt_num(r.reps),
            r.mean_bias,
            r.se,
            r.abs_bias
        );
    }
    s
}

/// Inputs read from disk, with a digest over their bytes.
struct Inputs {
    model: Option<ModelInput>,
    score_src: Option<String>,
    spec: Option<ATEModelSpec>,
    digest: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

impl Inputs {
    fn load(cli: &Cli) -> Result<Self> {
        let mut hasher = Sha256::new();
        let mut any = false;
        let mut take = |tag: &str, path: &Option<PathBuf>| -> Result<Option<String>> {
            let Some(p) = path else { return Ok(None) };
            let src = read(p)?;
            hasher.update(tag.as_bytes());
            hasher.update((src.len() as u64).to_le_bytes());
            hasher.update(src.as_bytes());
            any = true;
            Ok(Some(src))
        };
        let model_src = take("model", &cli.model)?;
        let score_src = take("score", &cli.score)?;
        let spec_src = take("spec", &cli.spec)?;
        let digest = if any {
            hex::encode(hasher.finalize())
        } else {
            "builtin".to_string()
        };
        let model = match (&model_src, &cli.model) {
            (Some(src), Some(p)) => Some(parse_model(src).map_err(|e| with_path(p, e))?),
            _ => None,
        };
        let spec = match (&spec_src, &cli.spec) {
            (Some(src), Some(p)) => Some(parse_ate_spec(src).map_err(|e| with_path(p, e))?),
            _ => None,
        };
        Ok(Inputs {
            model,
            score_src,
            spec,
            digest,
        })
    }

    fn model(&self) -> Result<&ModelInput> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Invalid("this command needs --model".into()))
    }

    fn scores(&self, cli: &Cli, base: &Distribution) -> Result<ScoreInput> {
        match (&self.score_src, &cli.score) {
            (Some(src), Some(p)) => parse_scores(src, base).map_err(|e| with_path(p, e)),
            _ => Ok(ScoreInput::default()),
        }
    }

    fn require_scores(&self, cli: &Cli, base: &Distribution) -> Result<ScoreInput> {
        if cli.score.is_none() {
            return Err(Error::Invalid("this command needs --score".into()));
        }
        self.scores(cli, base)
    }
}

/// Exit code of an error: 2 for malformed input, 1 for mathematical findings.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Invalid(_)
        | Error::DimensionMismatch { .. }
        | Error::InvalidSpace(_)
        | Error::InvalidDistribution(_)
        | Error::NotMeanZero { .. }
        | Error::NotFullSupport { .. }
        | Error::NonFinite { .. }
        | Error::SpaceMismatch
        | Error::GridTooSmall { .. }
        | Error::BadGrid
        | Error::OutOfRange { .. }
        | Error::ZeroStep => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok((text, pass)) => match write_output(&cli, &text) {
            Ok(()) => i32::from(!pass),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_output(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Invalid(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn tolerances(cli: &Cli) -> Result<Tolerances> {
    let mut tol = Tolerances::default();
    for (k, v) in &cli.tol {
        tol.set(k, *v).map_err(Error::Invalid)?;
    }
    Ok(tol)
}

fn execute(cli: &Cli) -> Result<(String, bool)> {
    let tol = tolerances(cli)?;
    let inputs = Inputs::load(cli)?;
    if let Command::Ate {
        command: AteCommand::BiasSweep,
    } = &cli.command
    {
        return bias_sweep(cli, &inputs);
    }
    let (name, info, checks) = match &cli.command {
        Command::Qmd => qmd(cli, &inputs, &tol)?,
        Command::ScoreRecover => score_recover(cli, &inputs, &tol)?,
        Command::HellingerGap => hellinger_gap(cli, &inputs, &tol)?,
        Command::Eif => eif(cli, &inputs, &tol)?,
        Command::InfluenceVerify => influence_verify(cli, &inputs, &tol)?,
        Command::NuisanceBasis => nuisance_basis(&inputs, &tol)?,
        Command::Neyman => neyman(cli, &inputs, &tol)?,
        Command::Jacobian => jacobian(&inputs)?,
        Command::Forward => forward(cli, &inputs, &tol)?,
        Command::Reverse => reverse(&inputs, &tol)?,
        Command::ChainRule => chain_rule(cli, &inputs)?,
        Command::GradientChar => gradient_char(cli, &inputs, &tol)?,
        Command::NegativeIdentity => negative_identity(&inputs, &tol)?,
        Command::Counterexample {
            check,
            expect_nonorthogonal,
        } => counterexample(cli, &inputs, &tol, *check, *expect_nonorthogonal)?,
        Command::Ate { command } => ate(cli, &inputs, &tol, command)?,
    };
    let report = CheckReport {
        command: name.into(),
        info,
        checks,
        digest: inputs.digest.clone(),
        seed: cli.seed,
    };
    let text = match cli.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv()?,
    };
    Ok((text, report.pass()))
}

type Outcome = (&'static str, Vec<String>, Vec<Check>);

fn fmt_values(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:+.9}")).collect();
    format!("[{}]", parts.join(", "))
}

fn qmd(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let sub = linear_tilt(&m.p0, s.tilt()?)?;
    let grid = cli
        .t_grid
        .clone()
        .unwrap_or_else(|| default_qmd_grid(sub.t_limit()));
    let r = verify_qmd(&sub, s.score()?, &grid, tol)?;
    let mut info = vec![format!("verdict: {:?}", r.verdict)];
    info.extend(
        r.t_grid
            .iter()
            .zip(&r.residuals)
            .map(|(t, res)| format!("t = {t:.3e}  residual = {res:.6e}")),
    );
    Ok(("qmd", info, r.checks()))
}

fn score_recover(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let g = s.tilt()?;
    let sub = linear_tilt(&m.p0, g)?;
    let rec = recover_score(&sub, sub.fd_step())?;
    let err = rec
        .values()
        .iter()
        .zip(g.values())
        .fold(0.0_f64, |a, (r, v)| a.max((r - v).abs()));
    Ok((
        "score-recover",
        vec![format!("recovered score: {}", fmt_values(rec.values()))],
        vec![Check::abs_le(
            "score_recover.max_abs_error",
            err,
            tol.identity,
        )],
    ))
}

fn hellinger_gap(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let alt = s
        .alt
        .as_ref()
        .ok_or_else(|| Error::Invalid("score file has no alt".into()))?;
    let sub_s = linear_tilt(&m.p0, s.score()?)?;
    let sub_g = linear_tilt(&m.p0, alt)?;
    let grid = cli.t_grid.clone().unwrap_or_else(|| {
        let limit = sub_s.t_limit().min(sub_g.t_limit());
        let scale = if limit.is_finite() {
            (0.5 * limit / 1e-2).min(1.0)
        } else {
            1.0
        };
        [1e-2, 1e-3, 1e-4].iter().map(|t| t * scale).collect()
    });
    let r = hellinger_gap_check(&sub_s, &sub_g, &grid, tol)?;
    let mut info = vec![format!("bound ||s - g|| / (2 sqrt 2) = {:.9}", r.bound)];
    info.extend(
        r.t_grid
            .iter()
            .zip(&r.ratios)
            .map(|(t, q)| format!("t = {t:.3e}  H/t = {q:.9}")),
    );
    Ok(("hellinger-gap", info, r.checks()))
}

fn eif(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let phi = compute_eif(m.beta()?, &m.p0)?;
    let mut checks = vec![Check::abs_le(
        "eif.mean",
        crate::model::expectation(&m.p0, phi.function())?,
        tol.spec,
    )];
    if let Some(expected) = inputs.scores(cli, &m.p0)?.phi {
        let err = phi
            .values()
            .iter()
            .zip(expected.values())
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        checks.push(Check::abs_le("eif.max_abs_error_vs_phi", err, tol.identity));
    }
    Ok((
        "eif",
        vec![
            format!("beta0 = {:.12}", m.beta()?.evaluate(&m.p0)?),
            format!("eif: {}", fmt_values(phi.values())),
            format!("variance: {:.12}", phi.norm().powi(2)),
        ],
        checks,
    ))
}

fn centered_indicators(base: &Distribution) -> Result<Vec<ScoreFunction>> {
    (0..base.len())
        .map(|k| center(base, &RealFunction::indicator(base.space().clone(), k)))
        .collect()
}

fn scores_or_indicators(s: &ScoreInput, base: &Distribution) -> Result<Vec<ScoreFunction>> {
    if s.scores.is_empty() {
        centered_indicators(base)
    } else {
        Ok(s.scores.clone())
    }
}

fn influence_verify(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let phi = s
        .phi
        .clone()
        .ok_or_else(|| Error::Invalid("score file has no phi".into()))?;
    let scores = scores_or_indicators(&s, &m.p0)?;
    let r = verify_influence(m.beta()?, &phi.into(), &scores, tol)?;
    let info = r
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            format!(
                "score {i}: pathwise = {:+.9}  E0[phi s] = {:+.9}  {}",
                e.pathwise,
                e.predicted,
                if e.pass { "ok" } else { "mismatch" }
            )
        })
        .collect();
    Ok(("influence-verify", info, r.checks(tol)))
}

fn nuisance_basis(inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let beta = m.beta()?;
    let basis = nuisance_tangent_basis(beta, &m.p0)?;
    let phi = compute_eif(beta, &m.p0)?;
    let worst = basis.iter().try_fold(0.0_f64, |a, b| {
        Ok::<_, Error>(a.max(inner_product(&m.p0, b.function(), phi.function())?.abs()))
    })?;
    let expected =
        m.p0.len()
            .saturating_sub(if phi.norm() > 0.0 { 2 } else { 1 });
    let mut info = vec![format!("dimension: {}", basis.len())];
    info.extend(
        basis
            .iter()
            .enumerate()
            .map(|(i, b)| format!("basis {i}: {}", fmt_values(b.values()))),
    );
    Ok((
        "nuisance-basis",
        info,
        vec![
            Check::new(
                "nuisance_basis.dimension",
                basis.len() as f64,
                expected as f64,
                basis.len() == expected,
            ),
            Check::abs_le("nuisance_basis.max_abs_inner_with_eif", worst, tol.neyman),
        ],
    ))
}

fn pair_of(m: &ModelInput) -> Result<(&EstimatingFunction, &NuisanceFunctional, ParameterPair)> {
    let (est, eta) = m.estimating()?;
    let pair = ParameterPair::at(m.beta()?, eta, &m.p0)?;
    Ok((est, eta, pair))
}

fn directions_or_canonical(s: &ScoreInput, dim: usize) -> Vec<Vec<f64>> {
    if s.directions.is_empty() {
        canonical_directions(dim)
    } else {
        s.directions.clone()
    }
}

fn neyman(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta, pair) = pair_of(m)?;
    let s = inputs.scores(cli, &m.p0)?;
    let dirs = directions_or_canonical(&s, est.dim());
    let r = check_neyman(est, &m.p0, &pair, &dirs, eta.labels(), tol)?;
    let info = r.warning.iter().map(|w| format!("warning: {w}")).collect();
    Ok(("neyman", info, r.checks()))
}

fn jacobian(inputs: &Inputs) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, _, pair) = pair_of(m)?;
    let g = jacobian_g(est, &m.p0, &pair)?;
    Ok((
        "jacobian",
        vec![format!("G = {:.12}", g.value)],
        vec![Check::new(
            "jacobian.G",
            g.value,
            DEGENERATE_JACOBIAN,
            !g.degenerate,
        )],
    ))
}

fn equivalence_outcome(name: &'static str, r: EquivalenceReport) -> Outcome {
    let info = vec![
        format!("G = {:.12}", r.jacobian),
        format!("phi: {}", fmt_values(r.phi.values())),
    ];
    (name, info, r.checks)
}

fn forward(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta) = m.estimating()?;
    let s = inputs.scores(cli, &m.p0)?;
    let scores = scores_or_indicators(&s, &m.p0)?;
    let r = forward_verify(est, &m.p0, m.beta()?, eta, &scores, tol)?;
    Ok(equivalence_outcome("forward", r))
}

fn reverse(inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta) = m.estimating()?;
    let beta = m.beta()?;
    let phi = compute_eif(beta, &m.p0)?;
    let var = phi.norm().powi(2);
    if var <= crate::estimating::ZERO_VARIANCE {
        return Err(Error::ZeroVariance);
    }
    // Tilt along phi / ||phi||^2 moves beta at unit rate.
    let beta_coord = linear_tilt(&m.p0, &phi.scale(1.0 / var))?;
    // Eta-coordinate paths: tilts along the nuisance tangent basis, which
    // leave beta fixed to first order.
    let eta_coords = nuisance_tangent_basis(beta, &m.p0)?
        .iter()
        .map(|sc| {
            let sub = linear_tilt(&m.p0, sc)?;
            Ok(EtaCoordinate {
                direction: nuisance_path_derivative(eta, &sub)?,
                submodel: sub,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let r = reverse_verify(est, &m.p0, beta, eta, &beta_coord, &eta_coords, tol)?;
    Ok(equivalence_outcome("reverse", r))
}

fn chain_rule(cli: &Cli, inputs: &Inputs) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta) = m.estimating()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let sub = linear_tilt(&m.p0, s.tilt()?)?;
    let grid = cli
        .t_grid
        .clone()
        .unwrap_or_else(|| default_chain_grid(sub.t_limit()));
    let r = chain_rule_check(est, &sub, m.beta()?, eta, &grid)?;
    let info = r
        .t_grid
        .iter()
        .zip(&r.residuals)
        .map(|(t, res)| format!("t = {t:.3e}  residual = {res:.6e}"))
        .collect();
    Ok(("chain-rule", info, r.checks()))
}

fn derivative_check(name: &str, d: &DerivativeCheck, tol: &Tolerances) -> Check {
    Check::new(
        name,
        d.error(),
        tol.deriv_abs.max(tol.deriv_rel * d.predicted.abs()),
        d.pass,
    )
}

fn gradient_char(cli: &Cli, inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta) = m.estimating()?;
    let s = inputs.require_scores(cli, &m.p0)?;
    let sub = linear_tilt(&m.p0, s.tilt()?)?;
    let d = gradient_characterization_check(est, &sub, m.beta()?, eta, tol)?;
    Ok((
        "gradient-char",
        vec![
            format!("d/dt E0[m(beta_t, eta_t)] = {:+.12}", d.numeric),
            format!("-E0[m0 s]                = {:+.12}", d.predicted),
        ],
        vec![derivative_check("gradient_char.abs_error", &d, tol)],
    ))
}

fn negative_identity(inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let m = inputs.model()?;
    let (est, eta) = m.estimating()?;
    let g = negative_identity_check(est, &m.p0, m.beta()?, eta)?;
    Ok((
        "negative-identity",
        vec![format!("d/dbeta E0[m(beta, eta0)] = {g:.12}")],
        vec![Check::near(
            "negative_identity.G_plus_1",
            g,
            -1.0,
            tol.identity,
        )],
    ))
}

/// `beta = sum p^2` with `m = 2 eta(z) - 2 beta` on `p0 = (0.7, 0.3)`.
fn builtin_counterexample() -> Result<ModelInput> {
    let space = SampleSpace::counting(vec!["z0".into(), "z1".into()])?;
    let p0 = Distribution::new(space.clone(), vec![0.7, 0.3])?;
    Ok(ModelInput {
        p0,
        beta: Some(ScalarFunctional::sum_of_squares()),
        estimating: Some((
            EstimatingFunction::density_counterexample(2),
            NuisanceFunctional::density(vec!["p(z0)".into(), "p(z1)".into()]),
        )),
    })
}

fn counterexample(
    cli: &Cli,
    inputs: &Inputs,
    tol: &Tolerances,
    kind: CheckKind,
    expect: bool,
) -> Result<Outcome> {
    let builtin;
    let m = match &inputs.model {
        Some(m) => m,
        None => {
            builtin = builtin_counterexample()?;
            &builtin
        }
    };
    let (est, eta, pair) = pair_of(m)?;
    let s = inputs.scores(cli, &m.p0)?;
    let mut info = Vec::new();
    let mut checks = Vec::new();
    let mut neyman_pass = None;
    let mut influence_pass = None;
    if kind != CheckKind::Influence {
        let dirs = if s.directions.is_empty() {
            // Mass-preserving shift between the first two atoms.
            let mut h = vec![0.0; est.dim()];
            if h.len() >= 2 {
                h[0] = COUNTEREXAMPLE_STEP;
                h[1] = -COUNTEREXAMPLE_STEP;
            }
            vec![h]
        } else {
            s.directions.clone()
        };
        let r = check_neyman(est, &m.p0, &pair, &dirs, eta.labels(), tol)?;
        neyman_pass = Some(r.pass);
        checks.extend(r.checks());
    }
    if kind != CheckKind::Neyman {
        let phi = center(&m.p0, &est.values(&m.p0, pair.beta0, &pair.eta0)?)?;
        info.push(format!("phi = centered m0: {}", fmt_values(phi.values())));
        let r = verify_influence(m.beta()?, &phi.into(), &centered_indicators(&m.p0)?, tol)?;
        influence_pass = Some(r.pass);
        checks.extend(r.checks(tol));
    }
    if expect {
        let met = neyman_pass != Some(true) && influence_pass != Some(false);
        info.push(format!(
            "expected non-orthogonal but pathwise differentiable: {}",
            if met { "met" } else { "NOT met" }
        ));
    }
    Ok(("counterexample", info, checks))
}

fn ate_model(inputs: &Inputs) -> Result<ATEModel> {
    let spec = inputs.spec.clone().unwrap_or_else(ATEModelSpec::reference);
    Ok(ATEModel::build(&spec)?.0)
}

/// `n` centered random scores; score `i` uses ChaCha stream `i` of `seed`.
pub fn random_scores(base: &Distribution, n: usize, seed: u64) -> Result<Vec<ScoreFunction>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let raw: Vec<f64> = (0..base.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            center(base, &RealFunction::new(base.space().clone(), raw)?)
        })
        .collect()
}

fn ate(cli: &Cli, inputs: &Inputs, tol: &Tolerances, command: &AteCommand) -> Result<Outcome> {
    match command {
        AteCommand::Verify { direction } => {
            let model = ate_model(inputs)?;
            let m = model.estimating_function();
            let (beta, eta) = (model.beta_functional(), model.eta_functional());
            let r = match direction {
                VerifyDirection::Forward => {
                    let scores = random_scores(model.p0(), ATE_RANDOM_TILTS, cli.seed)?;
                    forward_verify(&m, model.p0(), &beta, &eta, &scores, tol)?
                }
                VerifyDirection::Reverse => reverse_verify(
                    &m,
                    model.p0(),
                    &beta,
                    &eta,
                    &model.beta_coordinate_submodel()?,
                    &model.canonical_eta_coordinates()?,
                    tol,
                )?,
            };
            let mut out = equivalence_outcome("ate verify", r);
            out.1
                .insert(0, format!("beta0 = {:.12}", model.nuisances().beta0));
            Ok(out)
        }
        AteCommand::Coords => ate_coords(inputs, tol),
        AteCommand::Regularity => {
            let spec = inputs.spec.clone().unwrap_or_else(ATEModelSpec::reference);
            let (model, _) = ATEModel::from_spec(&spec)?;
            let r = model.check_regularity();
            let mut info: Vec<String> = r
                .conditions
                .iter()
                .map(|c| format!("{}: {}", c.condition, c.detail))
                .collect();
            let mut checks = r.checks();
            if r.pass {
                let probe = model.lipschitz_probe(LIPSCHITZ_PAIRS, LIPSCHITZ_RADIUS, cli.seed)?;
                info.push(format!(
                    "lipschitz probe: {} pairs used, {} rejected, {} degenerate",
                    probe.pairs_used, probe.rejected, probe.skipped_degenerate
                ));
                checks.extend(probe.checks());
            }
            Ok(("ate regularity", info, checks))
        }
        AteCommand::BiasSweep => unreachable!("handled before dispatch"),
    }
}

fn ate_coords(inputs: &Inputs, tol: &Tolerances) -> Result<Outcome> {
    let model = ate_model(inputs)?;
    let (beta, eta) = (model.beta_functional(), model.eta_functional());
    let labels = model.eta_labels();
    let mut checks = Vec::new();

    let sub = model.beta_coordinate_submodel()?;
    let b0 = model.nuisances().beta0;
    let exact = beta.evaluate(&sub.density_at(BETA_COORD_T)?)? - b0 - BETA_COORD_T;
    checks.push(Check::abs_le(
        "beta_coord.beta_t_minus_beta0_minus_t",
        exact,
        BETA_COORD_EXACT,
    ));
    checks.push(Check::near(
        "beta_coord.beta_dot",
        pathwise_derivative(&beta, &sub)?,
        1.0,
        tol.coord,
    ));
    checks.push(Check::abs_le(
        "beta_coord.max_abs_eta_dot",
        sup_norm(&nuisance_path_derivative(&eta, &sub)?),
        tol.coord,
    ));

    for (h, label) in EtaDirection::canonical(model.nx()).iter().zip(&labels) {
        let sub = model.eta_coordinate_submodel(h)?;
        let e_dot = nuisance_path_derivative(&eta, &sub)?;
        let gap = e_dot
            .iter()
            .zip(h.flatten())
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        checks.push(Check::abs_le(
            format!("eta_coord[{label}].beta_dot"),
            pathwise_derivative(&beta, &sub)?,
            tol.coord,
        ));
        checks.push(Check::abs_le(
            format!("eta_coord[{label}].eta_dot_error"),
            gap,
            tol.coord,
        ));
    }
    let info = vec![
        format!("beta0 = {b0:.12}"),
        format!("g_beta: {}", fmt_values(&model.g_beta()?)),
    ];
    Ok(("ate coords", info, checks))
}

fn bias_sweep(cli: &Cli, inputs: &Inputs) -> Result<(String, bool)> {
    let spec = inputs
        .spec
        .clone()
        .unwrap_or_else(ATEModelSpec::sweep_reference);
    let (model, _) = ATEModel::build(&spec)?;
    let population = cli.population || (cli.n.is_none() && cli.reps.is_none());
    let config = SweepConfig {
        eps: cli.eps.clone().unwrap_or_else(|| DEFAULT_EPS.to_vec()),
        n: cli.n.unwrap_or(DEFAULT_N),
        reps: cli.reps.unwrap_or(DEFAULT_REPS),
        seed: cli.seed,
        population,
        direction: None,
    };
    let table = model.bias_sweep(&config)?;
    let checks = table.checks();
    let pass = all_pass(&checks);
    let text = match cli.format {
        Format::Csv => sweep_csv(&table)?,
        Format::Text => {
            let mut s = format!("ortho ate bias-sweep\n{}checks:\n", sweep_text(&table));
            for c in &checks {
                let _ = writeln!(s, "  {c}");
            }
            let _ = writeln!(s, "overall: {}", if pass { "PASS" } else { "FAIL" });
            s.push_str(&provenance(&inputs.digest, cli.seed));
            s
        }
    };
    Ok((text, pass))
}
