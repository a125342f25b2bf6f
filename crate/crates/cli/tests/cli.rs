use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn omnicond(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnicond"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn parse_writes_descriptor_span() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("out.json");
    let o = omnicond(&[
        "parse",
        "--caption",
        path(&fixture("one_subject.txt")),
        "--json",
        path(&json),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(dump["subjects"][0]["id"], 1);
    assert_eq!(
        (dump["subjects"][0]["s"].as_u64(), dump["subjects"][0]["e"].as_u64()),
        (Some(0), Some(7))
    );
    assert_eq!(dump["utterances"][0]["speaker"], 1);
    assert_eq!(dump["tokens"].as_array().unwrap().len(), 14);
}

#[test]
fn schedule_starts_alternating() {
    let o = omnicond(&["schedule", "--stages", "default", "--scale", "1000"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let kinds: Vec<&str> = text
        .lines()
        .skip(1)
        .take(6)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(kinds, ["JAVG", "TTS_ONLY", "JAVG", "TTS_ONLY", "JAVG", "TTS_ONLY"]);
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn schedule_reads_toml_config() {
    let o = omnicond(&["schedule", "--stages", path(&fixture("short_plan.toml"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let kinds: String = text
        .lines()
        .skip(1)
        .map(|l| if l.contains("TTS_ONLY") { 'T' } else { 'J' })
        .collect();
    assert_eq!(kinds, "JTTTJTTTJJJJ");
}

#[test]
fn outputs_are_byte_reproducible() {
    let caption = fixture("dialogue.txt");
    for args in [
        vec!["ocf-demo", "--caption", path(&caption), "--seed", "5"],
        vec![
            "positions",
            "--caption",
            path(&caption),
            "--grid",
            "2x3",
            "--audio",
            "3",
        ],
        vec!["mask", "--caption", path(&caption)],
        vec!["schedule", "--scale", "100"],
    ] {
        let (a, b) = (omnicond(&args), omnicond(&args));
        assert!(a.status.success(), "{args:?}: {}", String::from_utf8_lossy(&a.stderr));
        assert!(!a.stdout.is_empty());
        assert_eq!(a.stdout, b.stdout, "{args:?} is not deterministic");
    }
    let a = omnicond(&["ocf-demo", "--caption", path(&caption), "--seed", "5"]);
    let b = omnicond(&["ocf-demo", "--caption", path(&caption), "--seed", "6"]);
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn train_toy_artifacts_are_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let o = omnicond(&["train-toy", "--scale", "10", "--seed", "3", "--out", path(dir.path())]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["toy_log.csv", "toy_summary.json"] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(name)).unwrap();
        assert_eq!(read(&dirs[0]), read(&dirs[1]), "{name} differs between runs");
    }
    let log = std::fs::read_to_string(dirs[0].path().join("toy_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 51);
    assert!(log.contains("TTS_ONLY"));
}

#[test]
fn corrupted_fixture_fails_every_caption_command() {
    let bad = fixture("corrupted.txt");
    for cmd in ["parse", "positions", "mask", "ocf-demo"] {
        let o = omnicond(&[cmd, "--caption", path(&bad)]);
        assert_eq!(o.status.code(), Some(1), "{cmd}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("corrupted.txt:1:"), "{cmd}: {err}");
    }
    let o = omnicond(&["check", "--identity", "--caption", path(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn module_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stages = []\n[optim]\nlr_init = 1e-4\n").unwrap();
    assert_eq!(omnicond(&["schedule", "--stages", path(&cfg)]).status.code(), Some(1));
    let grid = omnicond(&[
        "positions",
        "--caption",
        path(&fixture("one_subject.txt")),
        "--grid",
        "two",
    ]);
    assert_eq!(grid.status.code(), Some(1));
    let toy = omnicond(&["train-toy", "--scale", "50", "--min-reduction", "0.99"]);
    assert_eq!(toy.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(omnicond(&[]).status.code(), Some(2));
    assert_eq!(omnicond(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(omnicond(&["parse"]).status.code(), Some(2));
    assert_eq!(omnicond(&["schedule", "--scale", "0"]).status.code(), Some(2));
    assert_eq!(omnicond(&["--help"]).status.code(), Some(0));
}

#[test]
fn check_passes_on_dialogue() {
    let o = omnicond(&[
        "check",
        "--grads",
        "--severance",
        "--caption",
        path(&fixture("dialogue.txt")),
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("ok   grads") && text.contains("ok   severance"), "{text}");
}
