use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wavecone(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavecone"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("WAVECONE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn lemma1_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = wavecone(
        dir.path(),
        &[
            "lemma1", "--eps", "1e-3", "--trials", "10000", "--seed", "7",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("violations: 0"));
    let csv = fs::read_to_string(dir.path().join("lemma1.csv")).unwrap();
    assert!(csv.starts_with("eps,trial,excess,bound,max_orth,holds\n"));
    assert_eq!(csv.lines().count(), 10_001);
    let m = manifest(dir.path());
    assert_eq!(m["config"]["experiment"], "lemma1");
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["files"][0], "lemma1.csv");
}

#[test]
fn gamma_of_a_tilted_direction() {
    let dir = tempfile::tempdir().unwrap();
    let space = dir.path().join("w.json");
    // span of (1, 0) ⊗ (1, -1, 0), rows stored one after the other
    fs::write(
        &space,
        r#"{"q": 3, "l": 2, "basis": [[1, -1, 0, 0, 0, 0]]}"#,
    )
    .unwrap();
    let (c, s) = (
        std::f64::consts::FRAC_PI_6.cos(),
        std::f64::consts::FRAC_PI_6.sin(),
    );
    let v = format!("{c},{s}");
    let o = wavecone(
        dir.path(),
        &[
            "gamma",
            "--q",
            "3",
            "--l",
            "2",
            "--subspace",
            space.to_str().unwrap(),
            "--v",
            &v,
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("angle: "));
    let angle = manifest(dir.path())["summary"]["angle"].as_f64().unwrap();
    assert!((angle - std::f64::consts::FRAC_PI_6).abs() < 1e-12);

    let o = wavecone(
        dir.path(),
        &[
            "gamma",
            "--q",
            "4",
            "--l",
            "2",
            "--subspace",
            space.to_str().unwrap(),
            "--v",
            &v,
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bv_demo_for_the_square_torus() {
    let dir = tempfile::tempdir().unwrap();
    let o = wavecone(
        dir.path(),
        &[
            "bv-demo",
            "--m",
            "2",
            "--certified",
            "50",
            "--symbol-samples",
            "50",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("dim: 12"));
    assert!(text.contains("membership_agree: 1000"));
    for f in [
        "bv_certified.csv",
        "bv_symbols.csv",
        "bv_frequencies.csv",
        "bv_membership.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn rerun_reproduces_the_csv() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let o = wavecone(
        first.path(),
        &[
            "theorem-demo",
            "--cascades",
            "2",
            "--depth",
            "5",
            "--seed",
            "3",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let m = first.path().join("manifest.json");
    let o = wavecone(second.path(), &["rerun", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["theorem_runs.csv", "theorem_levels.csv"] {
        assert_eq!(
            fs::read(first.path().join(f)).unwrap(),
            fs::read(second.path().join(f)).unwrap()
        );
    }
}

#[test]
fn violations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // non-self-conjugate frequencies of the 3-torus leave the wave cone
    let o = wavecone(
        dir.path(),
        &[
            "bv-demo",
            "--m",
            "3",
            "--certified",
            "2",
            "--symbol-samples",
            "40",
            "--membership-trials",
            "4",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
    assert!(!stdout(&o).contains("violations: 0"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        wavecone(dir.path(), &["lemma1", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(
        wavecone(dir.path(), &["lemma1", "--q", "two"])
            .status
            .code(),
        Some(1)
    );
    let o = wavecone(dir.path(), &["gamma", "--v", "1,0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs a subspace"));
}

#[test]
fn large_runs_need_the_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = wavecone(dir.path(), &["--dry-run", "submartingale", "--depth", "13"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--allow-large"));
    let o = wavecone(
        dir.path(),
        &[
            "--dry-run",
            "--allow-large",
            "submartingale",
            "--depth",
            "13",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("\"depth\": 13"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_wavecone"))
        .args(["cascade", "--depth", "4"])
        .env("WAVECONE_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(target.join("cascade.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
