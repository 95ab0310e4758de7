use std::process::Command;

fn tryon() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tryon"))
}

#[test]
fn selftest_passes() {
    let out = tryon().args(["selftest", "--seed", "3"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 9);
}

#[test]
fn generate_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let st = tryon()
            .args(["generate-data", "--count", "3", "--val", "1", "--test", "1", "--seed", "12", "--out"])
            .arg(d.path())
            .status()
            .unwrap();
        assert!(st.success());
    }
    let read = |p: &std::path::Path, rel: &str| std::fs::read(p.join(rel)).unwrap();
    assert_eq!(read(a.path(), "manifest.txt"), read(b.path(), "manifest.txt"));
    let mut files = 0;
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        if rel == std::path::Path::new("run_manifest.txt") {
            continue;
        }
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        files += 1;
    }
    assert!(files > 10);
    let run = String::from_utf8(read(a.path(), "run_manifest.txt")).unwrap();
    assert!(run.contains("seed = 12"));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = tryon()
        .args(["tryon", "--stage1-ckpt", "x.ckpt", "--garment", "g.pfm", "--person-dir", "p", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(tryon().args(["selftest", "--bogus"]).status().unwrap().code(), Some(1));
    assert_eq!(tryon().arg("no-such-command").status().unwrap().code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(tryon().arg("--help").status().unwrap().code(), Some(0));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert!(tryon()
        .args(["generate-data", "--count", "2", "--val", "1", "--test", "1", "--out"])
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let out = tryon()
        .args(["train-diffusion", "--stage1-ckpt"])
        .arg(d.path().join("absent.ckpt"))
        .arg("--data-dir")
        .arg(&data)
        .arg("--out")
        .arg(d.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let out = tryon()
        .args(["train-warp", "--data-dir", "nowhere", "--set", "no_such_key=1", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}
