use std::path::Path;
use std::process::Command;

use adats::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use serde_json::Value;

fn adats(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("adats").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, kind: &str, n: &str, c1: &str, seed: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    let (code, _, err) = adats(&[
        "synth",
        "--kind",
        kind,
        "--n",
        n,
        "--c1",
        c1,
        "--seed",
        seed,
        "--out",
        p(&path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    path
}

fn results(path: &Path) -> Vec<Value> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["results"].as_array().unwrap().clone()
}

#[test]
fn vanilla_fit_lowers_ece_on_inflated_logits() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.cald", "single", "6000", "2", "1");
    let test = synth(dir.path(), "test.cald", "single", "4000", "2", "2");
    let model = dir.path().join("vanilla.json");
    let (code, out, err) = adats(&["fit-vanilla", "--data", p(&train), "--out", p(&model)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("temperature"), "{out}");

    let report = dir.path().join("eval.json");
    let (code, out, _) = adats(&[
        "evaluate",
        "--data",
        p(&test),
        "--model",
        p(&model),
        "--out",
        p(&report),
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("raw") && out.contains("vanilla"), "{out}");
    let rows = results(&report);
    assert_eq!(rows.len(), 2);
    let raw = rows[0]["ece"].as_f64().unwrap();
    let vanilla = rows[1]["ece"].as_f64().unwrap();
    assert!(vanilla < raw / 2.0, "raw {raw} vanilla {vanilla}");
    assert_eq!(rows[0]["accuracy"], rows[1]["accuracy"]);
}

#[test]
fn adaptive_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.cald", "two-cluster", "2000", "1", "3");
    let val = synth(dir.path(), "val.cald", "two-cluster", "500", "1", "4");
    let model = dir.path().join("adats.json");
    let trace = dir.path().join("trace.json");
    let (code, _, err) = adats(&[
        "fit-adats",
        "--data",
        p(&train),
        "--validation",
        p(&val),
        "--trace",
        p(&trace),
        "--out",
        p(&model),
        "--epochs",
        "3",
        "--seed",
        "7",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(trace.exists());

    let out_dir = dir.path().join("report");
    let (code, _, err) = adats(&[
        "report",
        "--data",
        p(&val),
        "--model",
        p(&model),
        "--out",
        p(&out_dir),
        "--score",
        "ds",
        "--partition",
        "class",
        "--classes",
        "0,2",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in [
        "reliability_equal_width.csv",
        "reliability_equal_mass.csv",
        "contribution.csv",
        "rejection_ds.csv",
        "temperatures.csv",
        "interpolation.csv",
        "latents.csv",
        "report.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let latents = std::fs::read_to_string(out_dir.join("latents.csv")).unwrap();
    assert_eq!(latents.lines().count(), 501);
    assert!(latents
        .lines()
        .next()
        .unwrap()
        .starts_with("index,label,correct,contribution,z_0"));
}

#[test]
fn sweep_emits_one_row_per_entry_method_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let fit = synth(dir.path(), "fit.cald", "single", "1000", "2", "5");
    let model = dir.path().join("v.json");
    assert_eq!(
        adats(&["fit-vanilla", "--data", p(&fit), "--out", p(&model)]).0,
        EXIT_OK
    );
    for (i, name) in ["clean.cald", "noise1.cald", "noise3.cald", "blur2.cald"]
        .iter()
        .enumerate()
    {
        synth(
            dir.path(),
            name,
            "single",
            "300",
            &(2 + i).to_string(),
            &(10 + i).to_string(),
        );
    }
    let manifest = dir.path().join("manifest.json");
    std::fs::write(
        &manifest,
        r#"{"baseline": "clean.cald", "entries": [
            {"path": "noise1.cald", "corruption_name": "gaussian_noise", "severity": 1},
            {"path": "noise3.cald", "corruption_name": "gaussian_noise", "severity": 3},
            {"path": "blur2.cald", "corruption_name": "defocus_blur", "severity": 2}]}"#,
    )
    .unwrap();
    let csv_path = dir.path().join("sweep.csv");
    let (code, _, err) = adats(&[
        "sweep",
        "--manifest",
        p(&manifest),
        "--model",
        p(&model),
        "--out",
        p(&csv_path),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2 * 9);
    assert!(rows[0].starts_with("gaussian_noise,1,raw,"));
    assert!(rows.last().unwrap().starts_with("defocus_blur,2,vanilla,"));

    let (code, _, _) = adats(&[
        "sweep",
        "--manifest",
        p(&manifest),
        "--model",
        p(&model),
        "--out",
        p(&csv_path),
        "--include-baseline",
    ]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().count() - 1, 4 * 2 * 9);
}

#[test]
fn bad_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"{"baseline": "none.cald", "entries": [{"path": "x.cald", "corruption_name": "fog", "severity": 9}]}"#,
    )
    .unwrap();
    let (code, _, err) = adats(&[
        "sweep",
        "--manifest",
        p(&manifest),
        "--out",
        p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(err.contains("severity"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(adats(&["no-such-command"]).0, EXIT_USAGE);
    assert_eq!(adats(&["--help"]).0, EXIT_OK);
    let missing = dir.path().join("missing.cald");
    let (code, _, err) = adats(&["evaluate", "--data", p(&missing)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("missing.cald"), "{err}");
    let junk = dir.path().join("junk.cald");
    std::fs::write(&junk, b"CALD garbage").unwrap();
    assert_eq!(adats(&["evaluate", "--data", p(&junk)]).0, EXIT_DATA);
    let data = synth(dir.path(), "d.cald", "single", "50", "1", "0");
    let (code, _, _) = adats(&[
        "fit-vanilla",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("v.json")),
        "--grid",
        "3:1:0.1",
    ]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn selfcheck_binary_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("selfcheck.json");
    let out = Command::new(env!("CARGO_BIN_EXE_adats"))
        .args(["selfcheck", "--seed", "3", "--out", p(&report)])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 7);
    assert!(!stdout.contains("FAIL"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["seed"], 3);
}
