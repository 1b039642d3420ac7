use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn cohpio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cohpio"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(fs::read(&p).unwrap())))
        })
        .collect();
    v.sort();
    v
}

#[test]
fn calibrate_succeeds() {
    let out = cohpio(&["calibrate"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("link.one_way_ns"));
    assert!(text.contains("invoke 128 B"));
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let out = cohpio(&["--set", "foo=1", "calibrate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("foo"));
}

#[test]
fn unparsable_value_exits_2() {
    let out = cohpio(&["--set", "link.one_way_ns=fast", "calibrate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("link.one_way_ns"));
}

#[test]
fn bad_config_file_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "[link]\nbogus = 3\n").unwrap();
    let out = cohpio(&["--config", path.to_str().unwrap(), "calibrate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("link.bogus"));
}

#[test]
fn bad_pin_exits_2() {
    let out = cohpio(&["bench", "ffwd", "--pin", "zero", "--sim-only"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unwritable_csv_dir_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain_file");
    fs::write(&file, b"x").unwrap();
    let target = file.join("sub");
    let out = cohpio(&[
        "bench",
        "invoke",
        "--sizes",
        "64",
        "--iters",
        "2",
        "--csv",
        target.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn verify_passes() {
    let out = cohpio(&["verify", "--random-runs", "50"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"));
    assert!(text.contains("hazard"));
}

#[test]
fn invoke_csv_schema_and_one_way_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = cohpio(&[
        "--set",
        "link.one_way_ns=300",
        "bench",
        "invoke",
        "--sizes",
        "128",
        "--iters",
        "4",
        "--csv",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("invoke_summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "experiment,transport,size,n,p50_ns,p95_ns,p99_ns,p100_ns,throughput_bytes_per_s"
    );
    let eci: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&eci[..5], ["invoke", "eci_pio", "128", "4", "1500"]);
    let raw = fs::read_to_string(dir.path().join("invoke_raw.csv")).unwrap();
    assert!(raw.starts_with("experiment,transport,size,iter,latency_ns\n"));
    assert_eq!(raw.lines().count(), 1 + 3 * 4);
}

#[test]
fn reruns_are_byte_identical() {
    let runs: Vec<Vec<(String, String)>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let d = dir.path().to_str().unwrap();
            for args in [
                vec!["bench", "invoke", "--sizes", "64,4096", "--iters", "20"],
                vec!["--jitter", "on", "bench", "nic", "--iters", "50"],
                vec!["bench", "ffwd", "--sim-only", "--sim-messages", "20"],
            ] {
                let mut full = vec!["--seed", "42", "--csv", d];
                full.extend(args);
                let out = cohpio(&full);
                assert_eq!(code(&out), 0, "{}", stderr(&out));
            }
            digest_dir(dir.path())
        })
        .collect();
    assert_eq!(runs[0].len(), 6);
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn seed_changes_jittered_output() {
    let hash = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = cohpio(&[
            "--seed",
            seed,
            "--jitter",
            "on",
            "--csv",
            dir.path().to_str().unwrap(),
            "bench",
            "nic",
            "--sizes",
            "64",
            "--iters",
            "50",
        ]);
        assert_eq!(code(&out), 0);
        digest_dir(dir.path())
    };
    assert_ne!(hash("1"), hash("2"));
}
