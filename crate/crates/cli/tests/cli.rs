use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use tempfile::TempDir;
use tghard::sample_io::read_samples;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tghard"));
    c.env("THREADS", "4");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tghard")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// One built instance shared by the read-only tests.
fn shared() -> &'static (TempDir, PathBuf) {
    static S: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    S.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("instance.json");
        let o = run(&[
            "build",
            "--epsilon",
            "0.05",
            "--k",
            "3",
            "--seed",
            "1",
            "--out",
            p(&path),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (dir, path)
    })
}

#[test]
fn build_is_byte_identical_and_versioned() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let o = run(&[
        "build",
        "--epsilon",
        "0.05",
        "--k",
        "3",
        "--seed",
        "1",
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&o), 0);
    let (_, shared_path) = shared();
    assert_eq!(fs::read(&a).unwrap(), fs::read(shared_path).unwrap());
    let v: Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!((v["Z"].as_f64().unwrap() - 0.908_972).abs() < 1e-6);
    assert_eq!(v["certificates"]["pass"], true);
}

#[test]
fn out_of_regime_build_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "build",
        "--epsilon",
        "0.5",
        "--k",
        "3",
        "--out",
        p(&dir.path().join("x.json")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("regime"));
}

#[test]
fn verify_exit_codes() {
    let (_, inst) = shared();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("verify.json");
    let o = run(&["verify", "--in", p(inst), "--report", p(&report)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Γ(T×U)"));
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert!(dir.path().join("verify.csv").is_file());

    // Nudge one endpoint of T: the moments stop matching.
    let mut file: Value = serde_json::from_slice(&fs::read(inst).unwrap()).unwrap();
    let lo = file["T"][0][0].as_f64().unwrap();
    file["T"][0][0] = Value::from(lo + 0.05);
    let bad = dir.path().join("corrupt.json");
    fs::write(&bad, serde_json::to_vec(&file).unwrap()).unwrap();
    let o = run(&[
        "verify",
        "--in",
        p(&bad),
        "--report",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL moment residuals"));

    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{\"schema_version\": 1").unwrap();
    let o = run(&[
        "verify",
        "--in",
        p(&junk),
        "--report",
        p(&dir.path().join("r2.json")),
    ]);
    assert_eq!(code(&o), 3);
    let o = run(&[
        "verify",
        "--in",
        p(&dir.path().join("missing.json")),
        "--report",
        p(&dir.path().join("r3.json")),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn sample_formats_agree_and_repeat() {
    let (_, inst) = shared();
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("s.csv");
    let b1 = dir.path().join("s1.bin");
    let b2 = dir.path().join("s2.bin");
    let args = |fmt: &'static str, out: &Path| {
        let o = run(&[
            "sample",
            "--in",
            p(inst),
            "--d",
            "6",
            "--n",
            "100000",
            "--seed",
            "4",
            "--format",
            fmt,
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0);
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    let msg = args("csv", &csv);
    args("bin", &b1);
    args("bin", &b2);
    assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
    let a = read_samples(fs::File::open(&csv).unwrap()).unwrap();
    let b = read_samples(fs::File::open(&b1).unwrap()).unwrap();
    assert_eq!((b.n, b.d), (100_000, 6));
    assert_eq!(a, b);

    // "acceptance rate <r> (Z = <z>)"
    let nums: Vec<f64> = msg
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == '-'))
        .filter_map(|s| s.parse().ok())
        .collect();
    let (rate, z) = (nums[0], nums[1]);
    assert!((rate - z).abs() <= 4.0 * (z * (1.0 - z) / 1.1e5).sqrt());
}

#[test]
fn full_pipeline_and_report() {
    let (_, inst) = shared();
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let o = run(&["report", "--dir", p(d)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("verify.json") && err.contains("gap.json") && err.contains("estimate.json")
    );

    assert_eq!(
        code(&run(&[
            "verify",
            "--in",
            p(inst),
            "--report",
            p(&d.join("verify.json"))
        ])),
        0
    );
    let gap_args = [
        "gap",
        "--in",
        p(inst),
        "--d",
        "6",
        "--n",
        "200000",
        "--degree-max",
        "5",
        "--tau",
        "1e-3",
    ];
    let o = bin()
        .args(gap_args)
        .args(["--out", p(&d.join("gap.json"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .args(gap_args)
        .args(["--out", p(&d.join("gap2.json"))])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(d.join("gap.json")).unwrap(),
        fs::read(d.join("gap2.json")).unwrap()
    );
    assert!(d.join("gap.csv").is_file());

    let o = run(&[
        "estimate",
        "--in",
        p(inst),
        "--d",
        "6",
        "--n",
        "1000000",
        "--out",
        p(&d.join("estimate.json")),
    ]);
    assert_eq!(code(&o), 0);

    let o = run(&["report", "--dir", p(d)]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{text}");
    assert!(text.contains("overall: PASS"));
    let gap_csv = fs::read_to_string(d.join("gap_vs_degree.csv")).unwrap();
    assert_eq!(gap_csv.lines().count(), 1 + 5);
    assert!(
        fs::read_to_string(d.join("error_vs_n.csv"))
            .unwrap()
            .lines()
            .count()
            > 2
    );

    // Certificates are echoed without recomputation.
    let summary: Value =
        serde_json::from_slice(&fs::read(d.join("summary.json")).unwrap()).unwrap();
    let verify: Value = serde_json::from_slice(&fs::read(d.join("verify.json")).unwrap()).unwrap();
    assert_eq!(summary["certificates"], verify);
    assert_eq!(summary["schema_version"], 1);
}

#[test]
fn gap_rejects_bad_config() {
    let (_, inst) = shared();
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "gap",
        "--in",
        p(inst),
        "--d",
        "6",
        "--n",
        "1000",
        "--degree-max",
        "9",
        "--out",
        p(&dir.path().join("g.json")),
    ]);
    assert_eq!(code(&o), 2);
}
