use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"
seed = 7
output_dir = "out"

[corpus]
path = "questions.jsonl"
split_fraction = 0.5

[testing]
k = 6
tau = 0.2

[mutation]
paraphrases = 1

[backend.simulator]
latent = { distribution = "uniform", low = 0.0, high = 1.0 }
failure_rate = 0.05

[simulate]
repeats = 20
"#;

fn lepe(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_lepe"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn full_run(concurrency: &str) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/questions.jsonl");
    std::fs::copy(demo, dir.path().join("questions.jsonl")).unwrap();
    std::fs::write(dir.path().join("lepe.toml"), CONFIG).unwrap();
    assert!(lepe(dir.path(), &["test", "--concurrency", concurrency]).starts_with("test:"));
    assert!(lepe(dir.path(), &["build"]).starts_with("build:"));
    lepe(dir.path(), &["build", "--baseline", "random"]);
    assert!(lepe(dir.path(), &["simulate"]).starts_with("simulate: 120 responses"));
    assert!(lepe(dir.path(), &["eval", "--bins", "5"]).starts_with("eval: S=120"));
    snapshot(&dir.path().join("out"))
}

#[test]
fn every_stage_is_reproducible_across_runs_and_concurrency() {
    let a = full_run("8");
    for name in [
        "records.jsonl",
        "instruction.jsonl",
        "instruction_random.jsonl",
        "responses.jsonl",
        "report.json",
    ] {
        assert!(a.contains_key(name), "{name} missing");
    }
    for (label, b) in [("rerun", full_run("8")), ("serial", full_run("1"))] {
        assert_eq!(
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>(),
            "{label}"
        );
        for (name, bytes) in &a {
            assert!(b[name] == *bytes, "{label}: {name} differs");
        }
    }
}

#[test]
fn missing_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lepe"))
        .current_dir(dir.path())
        .arg("test")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
