use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mame(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mame"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mame(args, cwd);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(0), "{args:?}: {stderr}");
    stderr
}

#[test]
fn identity_pipeline_is_byte_equal() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen", "--B", "2", "--L", "50", "--d", "8", "--l-spec", "1", "--seed", "9", "--out",
            "x.mamt",
        ],
        d,
    );
    let summary = ok(
        &[
            "merge", "--input", "x.mamt", "--tau", "1.0", "--out", "m.mamt", "--state", "s.json",
        ],
        d,
    );
    assert!(summary.contains("L 50 -> 50"), "{summary}");
    ok(
        &[
            "restore", "--input", "m.mamt", "--state", "s.json", "--out", "r.mamt",
        ],
        d,
    );
    assert_eq!(
        fs::read(d.join("x.mamt")).unwrap(),
        fs::read(d.join("r.mamt")).unwrap()
    );
}

#[test]
fn merge_reduces_clustered_input_and_restores_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen",
            "--B",
            "1",
            "--L",
            "65",
            "--d",
            "16",
            "--l-spec",
            "1",
            "--pattern",
            "clustered:5:0.05",
            "--out",
            "x.mamt",
        ],
        d,
    );
    let summary = ok(
        &[
            "merge", "--input", "x.mamt", "--out", "m.mamt", "--state", "s.json",
        ],
        d,
    );
    assert!(summary.contains("L 65 -> 33 (preserved 0)"), "{summary}");
    ok(
        &[
            "restore", "--input", "m.mamt", "--state", "s.json", "--out", "r.mamt",
        ],
        d,
    );
    let restored = mame::read_tokens(&d.join("r.mamt")).unwrap();
    assert_eq!((restored.length(), restored.dim()), (65, 16));
}

#[test]
fn deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(
            &[
                "gen",
                "--B",
                "1",
                "--L",
                "33",
                "--d",
                "8",
                "--seed",
                "4",
                "--out",
                &format!("{name}.mamt"),
            ],
            d,
        );
        ok(
            &[
                "merge",
                "--input",
                &format!("{name}.mamt"),
                "--tau",
                "0.2",
                "--partition",
                "random",
                "--seed",
                "4",
                "--out",
                &format!("{name}m.mamt"),
                "--state",
                &format!("{name}.json"),
            ],
            d,
        );
        ok(
            &[
                "block",
                "--input",
                &format!("{name}.mamt"),
                "--depth",
                "4",
                "--layers",
                "2",
                "--heads",
                "2",
                "--out",
                &format!("{name}b.mamt"),
            ],
            d,
        );
        ok(
            &[
                "analyze",
                "--samples",
                "1000",
                "--steps",
                "5",
                "--out",
                &format!("{name}.csv"),
            ],
            d,
        );
    }
    for (a, b) in [
        ("a.mamt", "b.mamt"),
        ("am.mamt", "bm.mamt"),
        ("a.json", "b.json"),
        ("ab.mamt", "bb.mamt"),
        ("a.csv", "b.csv"),
    ] {
        assert_eq!(
            fs::read(d.join(a)).unwrap(),
            fs::read(d.join(b)).unwrap(),
            "{a} vs {b}"
        );
    }
}

#[test]
fn dtype_follows_input_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen", "--B", "1", "--L", "10", "--d", "4", "--dtype", "f32", "--out", "x.mamt",
        ],
        d,
    );
    ok(
        &[
            "merge", "--input", "x.mamt", "--out", "m.mamt", "--state", "s.json",
        ],
        d,
    );
    assert_eq!(fs::read(d.join("m.mamt")).unwrap()[6], 0);
    ok(
        &[
            "merge", "--input", "x.mamt", "--dtype", "f64", "--out", "m.mamt", "--state", "s.json",
        ],
        d,
    );
    assert_eq!(fs::read(d.join("m.mamt")).unwrap()[6], 1);
}

#[test]
fn block_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen",
            "--B",
            "1",
            "--L",
            "33",
            "--d",
            "8",
            "--l-spec",
            "1",
            "--pattern",
            "clustered:3:0.1",
            "--out",
            "x.mamt",
        ],
        d,
    );
    let s = ok(
        &[
            "block", "--input", "x.mamt", "--heads", "2", "--out", "p.mamt",
        ],
        d,
    );
    assert!(s.contains("L 33 -> 5"), "{s}");
    ok(
        &[
            "block",
            "--input",
            "x.mamt",
            "--heads",
            "2",
            "--mode",
            "synthesis",
            "--metric",
            "hidden",
            "--out",
            "s.mamt",
        ],
        d,
    );
    assert_eq!(mame::read_tokens(&d.join("s.mamt")).unwrap().length(), 33);
}

#[test]
fn csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "analyze",
            "--samples",
            "1000",
            "--grid",
            "10",
            "--steps",
            "3",
            "--out",
            "a.csv",
        ],
        d,
    );
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(a.starts_with("alpha,beta,bound,efficient,overhead_flops,attention_saved\n"));
    assert_eq!(a.lines().count(), 1 + 6);
    ok(
        &[
            "bench",
            "--L-list",
            "32,64",
            "--d",
            "8",
            "--tau-list",
            "0.5",
            "--repeat",
            "2",
            "--out",
            "b.csv",
        ],
        d,
    );
    let b = fs::read_to_string(d.join("b.csv")).unwrap();
    assert!(b.starts_with(
        "L,d,tau,L_prime,beta,merge_ms,attention_ms_baseline,attention_ms_merged,total_speedup\n"
    ));
    assert_eq!(b.lines().count(), 1 + 4);
}

#[test]
fn usage_errors_exit_2_before_io() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &[
            "merge",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--state",
            "s",
            "--bogus",
        ][..],
        &[
            "merge",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--state",
            "s",
            "--causal",
        ],
        &[
            "merge",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--state",
            "s",
            "--sim",
            "manhattan",
        ],
        &[
            "merge",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--state",
            "s",
            "--tau",
            "nan",
        ],
        &[
            "gen",
            "--B",
            "1",
            "--L",
            "4",
            "--d",
            "2",
            "--pattern",
            "clustered:9:0",
            "--out",
            "g",
        ],
        &["gen", "--B", "0", "--L", "4", "--d", "2", "--out", "g"],
        &[
            "block",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--layers",
            "13",
        ],
        &["analyze", "--grid", "1"],
        &["frobnicate"],
    ] {
        let out = mame(args, d);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert!(!d.join("g").exists());
    let out = mame(
        &[
            "merge", "--input", "x", "--out", "o", "--state", "s", "--causal",
        ],
        d,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("--causal"));
}

#[test]
fn data_and_state_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mame(
        &[
            "merge",
            "--input",
            "missing.mamt",
            "--out",
            "o",
            "--state",
            "s",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mamt"));

    fs::write(d.join("junk.mamt"), b"XXXXjunkjunkjunkjunkjunk").unwrap();
    let out = mame(
        &[
            "merge",
            "--input",
            "junk.mamt",
            "--out",
            "o",
            "--state",
            "s",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));

    ok(
        &[
            "gen", "--B", "1", "--L", "20", "--d", "4", "--out", "x.mamt",
        ],
        d,
    );
    ok(
        &[
            "merge", "--input", "x.mamt", "--out", "m.mamt", "--state", "s.json",
        ],
        d,
    );
    ok(
        &[
            "gen",
            "--B",
            "1",
            "--L",
            "7",
            "--d",
            "4",
            "--out",
            "other.mamt",
        ],
        d,
    );
    let out = mame(
        &[
            "restore",
            "--input",
            "other.mamt",
            "--state",
            "s.json",
            "--out",
            "r",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));

    let state = fs::read_to_string(d.join("s.json"))
        .unwrap()
        .replace("\"version\":1", "\"version\":7");
    fs::write(d.join("s.json"), state).unwrap();
    let out = mame(
        &[
            "restore", "--input", "m.mamt", "--state", "s.json", "--out", "r",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));

    let out = mame(
        &["block", "--input", "x.mamt", "--heads", "3", "--out", "b"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--heads"));
}
