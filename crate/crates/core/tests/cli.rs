use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn ortho(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ortho"))
        .args(args)
        .output()
        .expect("failed to launch ortho")
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn qmd_on_tilt_passes() {
    let o = ortho(&[
        "qmd",
        "--model",
        &data("counterexample.toml"),
        "--score",
        &data("counterexample_scores.toml"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("overall: PASS"));
    assert!(out.contains("input_sha256: "));
    assert!(!out.contains("input_sha256: builtin"));
}

#[test]
fn ate_forward_reports_unit_negative_jacobian() {
    let o = ortho(&[
        "ate",
        "verify",
        "--spec",
        &data("ate_reference.toml"),
        "--direction",
        "forward",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("G = -1.000000000000"));
}

#[test]
fn ate_reverse_passes() {
    let o = ortho(&["ate", "verify", "--direction", "reverse"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn ate_coords_and_regularity_pass() {
    assert_eq!(ortho(&["ate", "coords"]).status.code(), Some(0));
    assert_eq!(
        ortho(&["ate", "regularity", "--seed", "3"]).status.code(),
        Some(0)
    );
}

#[test]
fn bias_sweep_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = ortho(&[
        "ate",
        "bias-sweep",
        "--spec",
        &data("ate_sweep.toml"),
        "--eps",
        "0.2,0.1,0.05,0.025",
        "--population",
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "estimator",
            "eps",
            "n",
            "reps",
            "mean_bias",
            "se",
            "abs_bias"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(&rows[0][0], "orthogonal");
    assert_eq!(&rows[0][2], "NA");
    let slope = |name: &str| -> f64 {
        rows.iter().find(|r| &r[0] == name).unwrap()[4]
            .parse()
            .unwrap()
    };
    assert!((1.7..=2.3).contains(&slope("slope:orthogonal")));
    assert!((0.8..=1.2).contains(&slope("slope:plugin")));
}

#[test]
fn sampled_sweep_is_byte_identical() {
    let args = [
        "ate",
        "bias-sweep",
        "--n",
        "300",
        "--reps",
        "10",
        "--seed",
        "42",
        "--format",
        "csv",
    ];
    let a = ortho(&args);
    let b = ortho(&args);
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    let c = ortho(&[
        "ate",
        "bias-sweep",
        "--n",
        "300",
        "--reps",
        "10",
        "--seed",
        "43",
        "--format",
        "csv",
    ]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn check_report_csv() {
    let o = ortho(&["ate", "verify", "--format", "csv"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("check,value,tolerance,pass"));
    assert!(text
        .lines()
        .any(|l| l.starts_with("jacobian.G,-0.99999") || l.starts_with("jacobian.G,-1")));
    assert_eq!(text.lines().last(), Some("overall,NA,NA,true"));
}

#[test]
fn counterexample_exit_codes() {
    let neyman = ortho(&[
        "counterexample",
        "--check",
        "neyman",
        "--expect-nonorthogonal",
    ]);
    assert_eq!(neyman.status.code(), Some(1));
    assert!(stdout(&neyman).contains("+8.000000e-2"));
    let influence = ortho(&[
        "counterexample",
        "--check",
        "influence",
        "--expect-nonorthogonal",
    ]);
    assert_eq!(influence.status.code(), Some(0));
    let all = ortho(&[
        "counterexample",
        "--expect-nonorthogonal",
        "--model",
        &data("counterexample.toml"),
    ]);
    assert_eq!(all.status.code(), Some(1));
    assert!(stdout(&all).contains("pathwise differentiable: met"));
}

#[test]
fn reverse_on_counterexample_reports_product_structure() {
    let o = ortho(&["reverse", "--model", &data("counterexample.toml")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("product structure"));
}

#[test]
fn negative_identity_distinguishes_models() {
    assert_eq!(
        ortho(&["negative-identity", "--model", &data("mean.toml")])
            .status
            .code(),
        Some(0)
    );
    let o = ortho(&["negative-identity", "--model", &data("counterexample.toml")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("-2.000000000000"));
}

#[test]
fn hellinger_gap_and_influence_commands() {
    let gap = ortho(&[
        "hellinger-gap",
        "--model",
        &data("gap.toml"),
        "--score",
        &data("gap_scores.toml"),
    ]);
    assert_eq!(gap.status.code(), Some(0));
    let m = data("counterexample.toml");
    let s = data("counterexample_scores.toml");
    for cmd in [
        "influence-verify",
        "eif",
        "score-recover",
        "chain-rule",
        "gradient-char",
        "jacobian",
        "nuisance-basis",
    ] {
        let o = ortho(&[cmd, "--model", &m, "--score", &s]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stdout(&o));
    }
    for cmd in ["forward", "reverse", "neyman"] {
        let o = ortho(&[
            cmd,
            "--model",
            &data("mean.toml"),
            "--score",
            &data("mean_scores.toml"),
        ]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stdout(&o));
    }
}

#[test]
fn input_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "space.atoms = [\"a\", \"b\"]\np0 = [0.5, -0.5]\n").unwrap();
    let o = ortho(&["eif", "--model", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");

    assert_eq!(
        ortho(&["eif", "--model", "/no/such/file.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ortho(&["qmd", "--model", &data("mean.toml")]).status.code(),
        Some(2)
    );
    assert_eq!(
        ortho(&["ate", "verify", "--tol", "neyman=0"]).status.code(),
        Some(2)
    );
    assert_eq!(ortho(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        ortho(&[
            "qmd",
            "--model",
            &data("mean.toml"),
            "--score",
            &data("mean_scores.toml"),
            "--t-grid",
            "1e-3,1e-2,1e-4"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn tolerance_override_can_fail_a_check() {
    let o = ortho(&["ate", "verify", "--tol", "neyman=1e-20"]);
    assert_eq!(o.status.code(), Some(1));
}
