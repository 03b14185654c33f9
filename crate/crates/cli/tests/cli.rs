use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ppml(args);
    assert!(
        out.status.success(),
        "ppml {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = ppml(args);
    assert!(!out.status.success(), "ppml {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path, rounds: u32) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("max_rounds = {rounds}\n")).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn keygen_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "keygen",
            "--out-dir",
            s(d),
            "--key-bits",
            "128",
            "--seed",
            "4",
        ]);
    }
    for f in ["public.key", "private.key"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    ok(&[
        "keygen",
        "--out-dir",
        s(&c),
        "--key-bits",
        "128",
        "--seed",
        "5",
    ]);
    assert_ne!(
        fs::read(a.join("public.key")).unwrap(),
        fs::read(c.join("public.key")).unwrap()
    );
}

#[test]
fn keygen_rejects_tiny_keys() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["keygen", "--out-dir", s(dir.path()), "--key-bits", "32"]);
    assert!(err.contains("minimum"), "{err}");
}

#[test]
fn run_writes_metrics_summary_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let out = dir.path().join("out");
    let stdout = ok(&["run", "--config", &cfg, "--out-dir", s(&out)]);
    assert!(stdout.contains("2 rounds"), "{stdout}");

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("# schema_version=1"));
    let data: Vec<&str> = lines.filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        data[0],
        "round,party_id,similarity,included,test_error,accuracy,threshold"
    );
    assert_eq!(data.len(), 1 + 2 * 5);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["mode"], "filtered");
    assert_eq!(summary["config"]["max_rounds"], 2);
    assert!(
        fs::read_to_string(out.join("timings.csv"))
            .unwrap()
            .lines()
            .count()
            == 3
    );
}

#[test]
fn runs_are_reproducible_and_seed_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let read = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["run", "--config", &cfg, "--out-dir", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = read("a", &[]);
    assert_eq!(a, read("b", &[]));
    assert_ne!(a, read("c", &["--seed-override", "11"]));
}

#[test]
fn mode_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let out = dir.path().join("sa");
    ok(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        s(&out),
        "--mode",
        "standalone",
    ]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("# mode=standalone"));
    assert_eq!(
        metrics.lines().filter(|l| l.contains(",global,")).count(),
        3
    );
    let err = fails(&["run", "--config", &cfg, "--mode", "federated"]);
    assert!(err.contains("unknown mode"), "{err}");
}

#[test]
fn bad_config_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[train]\nbatch_size = 0\n").unwrap();
    let err = fails(&["run", "--config", s(&path)]);
    assert!(err.contains("train.batch_size"), "{err}");
}

#[test]
fn report_aligns_runs_and_rejects_mixed_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let short = dir.path().join("short");
    let long = dir.path().join("long");
    let cfg2 = write_config(dir.path(), 2);
    ok(&[
        "run",
        "--config",
        &cfg2,
        "--out-dir",
        s(&short),
        "--mode",
        "centralized",
    ]);
    let cfg3 = write_config(dir.path(), 3);
    ok(&["run", "--config", &cfg3, "--out-dir", s(&long)]);

    let rep = dir.path().join("rep");
    ok(&["report", s(&long), s(&short), "--out-dir", s(&rep)]);
    let series = fs::read_to_string(rep.join("series.csv")).unwrap();
    let long_metrics = fs::read_to_string(long.join("metrics.csv")).unwrap();
    for row in long_metrics.lines().filter(|l| !l.starts_with('#')).skip(1) {
        assert!(series.contains(&format!("long,{row}\n")), "missing {row}");
    }
    assert!(series.contains("short,3,global,NA,NA,NA,NA,NA"));
    let comparison = fs::read_to_string(rep.join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 4);
    assert!(comparison.lines().last().unwrap().ends_with(",NA,NA"));

    let metrics = long.join("metrics.csv");
    let bumped = fs::read_to_string(&metrics)
        .unwrap()
        .replace("# schema_version=1", "# schema_version=2");
    fs::write(&metrics, bumped).unwrap();
    let err = fails(&["report", s(&long), s(&short), "--out-dir", s(&rep)]);
    assert!(err.contains("schema version mismatch"), "{err}");
}

#[test]
fn timing_prints_one_row_per_entity() {
    let stdout = ok(&["timing", "--repetitions", "1"]);
    for entity in ["Model Initiator", "Participant", "Server"] {
        assert!(stdout.contains(entity), "{stdout}");
    }
    assert!(stdout.contains("mean of 1"));
}
