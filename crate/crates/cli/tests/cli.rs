use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_statrefine"));
    c.env("RUST_LOG", "warn");
    c
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/worlds")
}

const TINY: &[&str] = &[
    "data.train=6",
    "data.test=2",
    "data.size=32",
    "estimator.depth=2",
    "estimator.width=8",
    "estimator.steps=20",
    "estimator.pilot_steps=5",
    "estimator.batch=2",
    "refiner.depth=2",
    "refiner.width=8",
    "refiner.heads=2",
    "refiner.g_width=4",
    "refiner.steps=6",
    "refiner.batch=2",
    "audit.g_width=4",
    "audit.steps=5",
    "audit.batch=2",
    "audit.draws=1",
];

fn run(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = bin();
    c.arg(sub).arg("--seed").arg("7").arg("--out").arg(out);
    for s in TINY {
        c.arg("--set").arg(s);
    }
    c.args(extra);
    c.output().expect("spawn")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn oracles_pass_on_fixtures() {
    let mut c = bin();
    c.args(["verify-oracles", "--seed", "3", "--worlds", "10"]);
    for e in std::fs::read_dir(fixtures()).unwrap() {
        c.arg("--fixture").arg(e.unwrap().path());
    }
    let out = ok(&c.output().unwrap());
    assert!(out.contains("all oracles pass"), "{out}");
    assert_eq!(out.matches(" ok\n").count(), 4, "{out}");
}

#[test]
fn mislabeled_fixture_fails_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixtures().join("aux-depends-on-neighbour.toml")).unwrap();
    let flipped = text.replace("expect = \"violated\"", "expect = \"consistent\"");
    assert_ne!(text, flipped);
    let p = dir.path().join("w.toml");
    std::fs::write(&p, flipped).unwrap();
    let o = bin()
        .args(["verify-oracles", "--seed", "3", "--worlds", "2", "--fixture"])
        .arg(&p)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("denoise", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("refiner.srck"), "{err}");
}

#[test]
fn bad_override_and_unknown_key_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("show-config", dir.path(), &["--set", "refiner.nope=1"]).status.code(), Some(2));
    assert_eq!(run("show-config", dir.path(), &["--set", "novalue"]).status.code(), Some(2));
    assert_eq!(run("show-config", dir.path(), &["--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn config_hash_ignores_output_dir() {
    let a = ok(&run("show-config", Path::new("/tmp/a"), &[]));
    let b = ok(&run("show-config", Path::new("/tmp/b"), &[]));
    let hash = |s: &str| s.lines().last().unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
    let c = ok(&run("show-config", Path::new("/tmp/a"), &["--set", "refiner.steps=7"]));
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn eval_of_identical_sets_is_capped() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run("gen-data", dir.path(), &[]));
    let m = dir.path().join("clean_test.txt");
    let o = bin()
        .args(["eval", "--seed", "0", "--clean"])
        .arg(&m)
        .arg("--denoised")
        .arg(&m)
        .output()
        .unwrap();
    let out = ok(&o);
    assert!(out.contains("capped"), "{out}");
}

fn read_tree(root: &Path, rel: &str) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(root.join(rel))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn staged_run_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for sub in ["gen-data", "add-noise", "train-estimator", "train-refiner", "denoise"] {
            ok(&run(sub, dir, &[]));
        }
        ok(&run("denoise", dir, &["--base"]));
        let audit = ok(&run("audit", dir, &[]));
        assert!(audit.contains("refined lower on"), "{audit}");
        let eval = ok(&run("eval", dir, &[]));
        for label in ["noisy", "base", "refined", "refined_aux"] {
            assert!(eval.contains(label), "{eval}");
        }
    }
    for rel in ["noisy/test", "base/test", "refined/test", "refiner", "estimator"] {
        assert_eq!(read_tree(a.path(), rel), read_tree(b.path(), rel), "{rel}");
    }
    let ja = std::fs::read_to_string(a.path().join("audit/refined.json")).unwrap();
    let jb = std::fs::read_to_string(b.path().join("audit/refined.json")).unwrap();
    assert_eq!(ja, jb);
}
