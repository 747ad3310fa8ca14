//! End-to-end runs of the command-line pipeline on the `micro-*` presets,
//! which are sized to finish in seconds. Each stage's artifacts feed the
//! next, exactly as a scripted run would.

use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use fena::cli::{run, Cli};

fn invoke(args: &[&str], common: &[&str]) -> fena::Result<()> {
    let mut full = vec!["fena"];
    full.extend_from_slice(args);
    full.extend_from_slice(common);
    run(Cli::try_parse_from(full).expect("valid command line"))
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every generated artifact starts with its resolved configuration.
fn assert_config_header(path: &Path) {
    let text = read(path);
    let first = text.lines().next().unwrap_or_default();
    assert!(
        first.starts_with("# config: preset=") && first.contains("seed="),
        "{}: bad header {first:?}",
        path.display()
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn rod_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let p = &["--preset", "micro-case2", "--seed", "3", "--out", root];
    let run_dir = tmp.path().join("micro-case2").join("s3");

    invoke(&["gen-data"], p).unwrap();
    // 40 sources split 85/15 at source granularity, then two windows each.
    let ds = run_dir.join("dataset");
    for (set, count) in [("member0", 68), ("member1", 68), ("test", 12)] {
        let loaded = fena::dataset::load(ds.join(set)).unwrap();
        assert_eq!(loaded.samples.len(), count, "{set}");
        assert_eq!(loaded.samples[0].steps(), 40, "{set}");
    }
    assert!(!run_dir.join(".dataset.tmp").exists());

    // Same seed, fresh root: byte-identical datasets.
    let tmp2 = tempfile::tempdir().unwrap();
    invoke(&["gen-data"], &["--preset", "micro-case2", "--seed", "3", "--out",
             tmp2.path().to_str().unwrap()])
    .unwrap();
    assert_eq!(
        dir_bytes(&ds),
        dir_bytes(&tmp2.path().join("micro-case2/s3/dataset")),
        "generation must be reproducible from (preset, seed)"
    );

    invoke(&["train"], p).unwrap();
    let model = run_dir.join("model");
    let ck0 = fs::read(model.join("member0.ckpt")).unwrap();
    let ck1 = fs::read(model.join("member1.ckpt")).unwrap();
    assert_ne!(ck0, ck1, "members must start from distinct seeds");
    for m in 0..2 {
        let curves = read(&model.join(format!("member{m}_curves.csv")));
        assert_config_header(&model.join(format!("member{m}_curves.csv")));
        assert_eq!(curves.lines().nth(1), Some("epoch,train_loss,test_loss,lr"));
        let lrs: Vec<f64> = curves
            .lines()
            .skip(2)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        assert_eq!(lrs.len(), 8, "one row per epoch");
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "lr must not increase: {lrs:?}");
    }

    // Re-running is a no-op that leaves the checkpoint bitwise intact...
    invoke(&["train"], p).unwrap();
    assert_eq!(ck0, fs::read(model.join("member0.ckpt")).unwrap());
    // ...and extending the epoch budget resumes where training stopped.
    invoke(&["train", "--epochs", "10"], p).unwrap();
    assert_ne!(ck0, fs::read(model.join("member0.ckpt")).unwrap());
    let curves = read(&model.join("member0_curves.csv"));
    assert_eq!(curves.lines().count(), 2 + 10, "8 original epochs plus 2 resumed");

    invoke(&["eval"], p).unwrap();
    let eval_dir = run_dir.join("eval");
    assert_config_header(&eval_dir.join("metrics.csv"));
    assert_config_header(&eval_dir.join("profile.csv"));
    let metrics = read(&eval_dir.join("metrics.csv"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("# reference: full-scale"));
    for needle in [
        "train_e_r_percent,member0,",
        "train_e_r_percent,member1,",
        "test_e_r_percent,member0,",
        "test_loss,member1,",
        "test_e_r_percent,ensemble,",
    ] {
        assert!(metrics.contains(needle), "missing {needle} in:\n{metrics}");
    }
    let profile = read(&eval_dir.join("profile.csv"));
    assert_eq!(profile.lines().count(), 2 + 40, "one profile row per window step");

    invoke(&["simulate", "--horizon", "100", "--cutoff", "20"], p).unwrap();
    let sim = run_dir.join("sim");
    let csv = read(&sim.join("long_run.csv"));
    assert!(csv.lines().next().unwrap().starts_with("# cutoff: 20, segments: 5"), "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("# config: preset=micro-case2"), "{csv}");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 100);
    let sidecar: serde_json::Value =
        serde_json::from_str(&read(&sim.join("long_run.json"))).unwrap();
    assert_eq!(sidecar["cutoff"], 20);
    assert_eq!(sidecar["segments"].as_array().unwrap().len(), 5);
    for seg in sidecar["segments"].as_array().unwrap() {
        assert!(seg["relative_error"].as_f64().unwrap().is_finite());
    }
    assert!(sidecar["config"].as_str().unwrap().contains("preset=micro-case2"));

    invoke(&["bench"], p).unwrap();
    let bench = read(&run_dir.join("bench.csv"));
    assert_config_header(&run_dir.join("bench.csv"));
    assert_eq!(bench.lines().nth(1), Some("case,oracle_ms,sfne_ms,speedup"));
    let row: Vec<&str> = bench.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "case2");
    assert!(row[3].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn beam_pipeline_trains_and_benches() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_str().unwrap();
    let p = &["--preset", "micro-case4", "--seed", "1", "--out", root];
    let run_dir = tmp.path().join("micro-case4").join("s1");

    invoke(&["gen-data"], p).unwrap();
    // No windowing for this family: a plain train/test split.
    let train = fena::dataset::load(run_dir.join("dataset/train")).unwrap();
    let test = fena::dataset::load(run_dir.join("dataset/test")).unwrap();
    assert_eq!(train.samples.len() + test.samples.len(), 16);
    assert_eq!(train.samples[0].in_static.len(), 202, "{{stiffness; radius}} profiles");

    invoke(&["train"], p).unwrap();
    invoke(&["eval"], p).unwrap();

    // From-rest training windows cannot restart mid-flight, so stitching
    // must refuse rather than silently extrapolate.
    let err = invoke(&["simulate"], p).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    invoke(&["bench"], p).unwrap();
    let bench = read(&run_dir.join("bench.csv"));
    let row: Vec<&str> = bench.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "case4");
    // The transient FE solve dwarfs one surrogate pass even at toy sizes.
    assert!(row[3].parse::<f64>().unwrap() > 1.0, "speedup row: {row:?}");
}

/// The installed binary maps error classes to the documented exit codes.
#[test]
fn binary_reports_documented_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_fena");
    let tmp = tempfile::tempdir().unwrap();

    let out = Command::new(exe)
        .args(["gen-data", "--preset", "no-such-preset"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown preset is a config error");
    assert!(String::from_utf8_lossy(&out.stderr).contains("micro-case2"));

    let absent = tmp.path().join("absent");
    let out = Command::new(exe)
        .args(["eval", "--preset", "micro-case2", "--out", absent.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "missing output root is an I/O error");
    assert!(!absent.exists(), "failures must not create partial output");

    let out = Command::new(exe).args(["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "clap rejects a missing --preset");

    let out = Command::new(exe).args(["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "eval", "simulate", "bench"] {
        assert!(help.contains(sub), "help must list {sub}");
    }
}
