//! End-to-end checks of the `atmc` binary on synthetic data.


use std::process::{Command, Output};

fn atmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atmc"))
        .args(args)
        .output()
        .expect("spawn atmc")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_every_flag() {
    for sub in ["train", "eval", "sweep", "plot"] {
        let out = atmc(&[sub, "--help"]);
        assert_ok(&out);
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let expected: &[&str] = match sub {
            "train" => &[
                "--dataset", "--arch", "--pipeline", "--k", "--bits", "--rho", "--delta",
                "--attack", "--steps", "--epochs", "--seed", "--out", "--lr", "--batch",
                "--mirror-period", "--pruning-ratio", "--rank-fraction", "--precision",
                "--metrics", "--stable-output", "--data-dir", "--fine-tune-epochs",
            ],
            "eval" => &["--checkpoint", "--dataset", "--attack", "--delta", "--steps", "--out"],
            "sweep" => &["--k", "--bits-list", "--out", "--pipeline", "--epochs", "--seed"],
            "plot" => &["--csv", "--out"],
            _ => unreachable!(),
        };
        for flag in expected {
            assert!(text.contains(flag), "{} --help missing {}\n{}", sub, flag, text);
        }
    }
}

#[test]
fn train_eval_checkpoint_flow() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.atmc");
    let csv = dir.path().join("row.csv");
    let out = atmc(&[
        "train",
        "--dataset", "synth",
        "--arch", "mlp-small",
        "--pipeline", "atmc",
        "--k", "600",
        "--bits", "4",
        "--epochs", "3",
        "--batch", "32",
        "--lr", "0.1",
        "--attack", "pgd",
        "--delta", "20",
        "--steps", "3",
        "--seed", "7",
        "--out", ckpt.to_str().unwrap(),
        "--metrics", csv.to_str().unwrap(),
        "--stable-output",
    ]);
    assert_ok(&out);
    assert!(ckpt.exists() && csv.exists());

    // Evaluating with no attack must report ata == ta, twice identically.
    let run_eval = || {
        let out = atmc(&[
            "eval",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--dataset", "synth",
            "--attack", "none",
            "--delta", "0",
        ]);
        assert_ok(&out);
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    let first = run_eval();
    let second = run_eval();
    let grab = |s: &str, key: &str| -> f64 {
        s.split_whitespace()
            .find(|t| t.starts_with(key))
            .and_then(|t| t.split('=').nth(1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN)
    };
    assert_eq!(grab(&first, "ta="), grab(&first, "ata="));
    assert_eq!(grab(&first, "ta="), grab(&second, "ta="));
}

#[test]
fn sweep_row_count_and_stable_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let args = [
        "sweep",
        "--dataset", "synth",
        "--arch", "mlp-small",
        "--pipeline", "atmc",
        "--k", "300,800,1500",
        "--bits-list", "4,32",
        "--epochs", "2",
        "--batch", "32",
        "--lr", "0.1",
        "--attack", "pgd",
        "--delta", "20",
        "--steps", "2",
        "--out", csv.to_str().unwrap(),
        "--stable-output",
    ];
    assert_ok(&atmc(&args));
    let bytes1 = std::fs::read(&csv).unwrap();
    let text = String::from_utf8_lossy(&bytes1).to_string();
    let data_rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("pipeline,") && !l.is_empty())
        .count();
    assert_eq!(data_rows, 3 * 2, "rows = |k-list| x |bits-list|");

    assert_ok(&atmc(&args));
    let bytes2 = std::fs::read(&csv).unwrap();
    assert_eq!(bytes1, bytes2, "stable sweep reruns must be byte-identical");

    // Plot renders an SVG from the sweep.
    let svg = dir.path().join("curves.svg");
    assert_ok(&atmc(&["plot", "--csv", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()]));
    let head = std::fs::read_to_string(&svg).unwrap();
    assert!(head.starts_with("<svg"));
}

#[test]
fn invalid_flag_combinations_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("x.atmc");
    let base = |extra: &[&str]| {
        let mut v = vec![
            "train",
            "--dataset", "synth",
            "--arch", "mlp-small",
            "--epochs", "1",
            "--out", ckpt.to_str().unwrap(),
        ];
        v.extend_from_slice(extra);
        atmc(&v)
    };

    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["--pipeline", "bogus"], "unknown pipeline"),
        (vec!["--k", "100", "--pruning-ratio", "0.5"], "mutually exclusive"),
        (vec!["--attack", "bogus"], "unknown attack"),
        (vec!["--delta=-3"], "delta"),
        (vec!["--pipeline", "atmc-uniform-pq", "--bits", "32"], "below 32"),
        (vec!["--bits", "0"], "bits"),
        (vec!["--precision", "f16"], "precision"),
    ];
    for (extra, needle) in cases {
        let out = base(&extra);
        assert!(!out.status.success(), "expected failure for {:?}", extra);
        let err = String::from_utf8_lossy(&out.stderr).to_lowercase();
        assert!(
            err.contains(&needle.to_lowercase()),
            "{:?}: stderr {:?} missing {:?}",
            extra,
            err,
            needle
        );
        assert!(!ckpt.exists(), "no output should be written for {:?}", extra);
    }

    // MNIST without a directory fails up front.
    let out = atmc(&[
        "train",
        "--dataset", "mnist",
        "--arch", "lenet",
        "--epochs", "1",
        "--out", ckpt.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data-dir") || err.contains("ATMC_DATA_DIR"), "{}", err);
}

#[test]
fn plot_rejects_missing_csv() {
    let out = atmc(&["plot", "--csv", "/nonexistent/x.csv", "--out", "/tmp/x.svg"]);
    assert!(!out.status.success());
}

