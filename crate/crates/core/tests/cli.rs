//! Runs the `fmgp` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fmgp::io::{read_bundle, PredictionValues, Predictions};

fn fmgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn regression_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("reg.fmgpb");
    ok(&fmgp(&["synth", "--kind", "regression", "--n", "300", "--seed", "4", "--out", p(&bundle)]));
    let fit_args = |out: &Path| {
        vec![
            "fit".to_string(),
            "--bundle".into(),
            p(&bundle).into(),
            "--out".into(),
            p(out).into(),
            "--m-beta".into(),
            "15".into(),
            "--steps".into(),
            "60".into(),
            "--lr".into(),
            "0.01".into(),
            "--seed".into(),
            "9".into(),
        ]
    };
    let (s1, s2) = (dir.path().join("a.state"), dir.path().join("b.state"));
    let a1: Vec<String> = fit_args(&s1);
    let a2: Vec<String> = fit_args(&s2);
    let o1 = ok(&fmgp(&a1.iter().map(String::as_str).collect::<Vec<_>>()));
    let o2 = ok(&fmgp(&a2.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(o1, o2);
    assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    let trace = |s: &Path| fs::read_to_string(format!("{}.trace.tsv", s.display())).unwrap();
    assert_eq!(trace(&s1), trace(&s2));
    assert!(trace(&s1).starts_with("# seed=9 "));
    assert!(Path::new(&format!("{}.trace.tsv.wall", s1.display())).exists());

    let preds = dir.path().join("p.fmgpb");
    ok(&fmgp(&["predict", "--state", p(&s1), "--bundle", p(&bundle), "--out", p(&preds)]));
    let b = read_bundle(&bundle).unwrap();
    match Predictions::read(&preds).unwrap().values {
        PredictionValues::Regression { mean, variance, .. } => {
            assert!(mean.iter().zip(b.g.as_slice()).all(|(m, g)| m.to_bits() == g.to_bits()));
            assert!(variance.iter().all(|v| *v >= 0.0));
        }
        PredictionValues::Classification { .. } => panic!("regression bundle"),
    }

    let report = ok(&fmgp(&["eval", "--state", p(&s1), "--bundle", p(&bundle)]));
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["mode"], "regression");
    assert_eq!(v["n_eval"], 150);
    for k in ["nll", "crps", "cqm"] {
        assert!(v["metrics"][k].is_number(), "{k}");
        assert!(v["baseline"][k].is_number(), "{k}");
    }
}

#[test]
fn classification_eval_reports_auc_only_with_ood() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, ood) = (dir.path().join("b.fmgpb"), dir.path().join("o.fmgpb"));
    ok(&fmgp(&[
        "synth", "--kind", "blobs", "--n", "40", "--out", p(&bundle), "--ood-out", p(&ood),
    ]));
    let state = dir.path().join("s.state");
    ok(&fmgp(&[
        "fit", "--bundle", p(&bundle), "--out", p(&state), "--m-beta", "8", "--steps", "20", "--s-eval", "32",
    ]));
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--state", p(&state), "--bundle", p(&bundle)];
        args.extend_from_slice(extra);
        serde_json::from_str::<serde_json::Value>(&ok(&fmgp(&args))).unwrap()
    };
    let plain = eval(&[]);
    assert_eq!(plain["mode"], "classification");
    assert!(plain["metrics"]["ece"].is_number());
    assert!(plain["metrics"].get("ood_auc").is_none());
    let with_ood = eval(&["--ood", p(&ood)]);
    assert!(with_ood["metrics"]["ood_auc"].is_number());
    assert!(with_ood["baseline"]["ood_auc"].is_number());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("c.fmgpb");
    ok(&fmgp(&["synth", "--kind", "clusters", "--out", p(&bundle)]));
    let state = dir.path().join("s.state");
    let out = fmgp(&["fit", "--bundle", p(&bundle), "--out", p(&state), "--m-beta", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m_beta"));
    let out = fmgp(&[
        "fit", "--bundle", p(&bundle), "--out", p(&state), "--mode", "classification",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = fmgp(&["predict", "--state", p(&state), "--bundle", p(&bundle), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fmgp(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let out = ok(&fmgp(&["gradcheck", "--count", "2"]));
    assert!(out.trim_end().ends_with("PASS"));
    let bad = fmgp(&["gradcheck", "--count", "1", "--inject-kl-fault"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("kl_q"));
}

#[test]
fn figure1_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("f.csv");
    ok(&fmgp(&[
        "figure1", "--seed", "2", "--out", p(&csv), "--grid-points", "9", "--steps", "100",
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# seed=2"));
    assert_eq!(lines[1], fmgp::figure1::FIGURE1_HEADER);
    assert_eq!(lines.len(), 11);
}
