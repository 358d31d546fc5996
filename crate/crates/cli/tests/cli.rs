use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use koji::fixtures::{ML_INSIGHT_MOCK_YAML, ML_INSIGHT_YAML};

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work {
            dir: tempfile::tempdir().unwrap(),
        };
        w.write("ml.yaml", ML_INSIGHT_YAML);
        w.write("ml.mock.yaml", ML_INSIGHT_MOCK_YAML);
        w.write("train.csv", "t1,t2");
        w.write("b1.csv", "b1");
        w.write("b2.csv", "b2");
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, contents).unwrap();
        p
    }

    fn koji(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_koji"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("KOJI_CACHE")
            .output()
            .unwrap()
    }

    fn run_mock(&self, business: &str, extra: &[&str]) -> Output {
        let b = format!("BUSINESS={business}");
        let mut args = vec![
            "run",
            "ml.yaml",
            "--arg",
            "TRAIN=train.csv",
            "--arg",
            &b,
            "--out",
            "out",
            "--backend",
            "mock",
            "--retry-backoff-ms",
            "1",
        ];
        if !extra.contains(&"--mock-script") {
            args.extend(["--mock-script", "ml.mock.yaml"]);
        }
        args.extend(extra);
        self.koji(&args)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// `(edge, hash)` pairs printed by `koji hash`.
fn edge_hashes(o: &Output) -> Vec<(String, String)> {
    stdout(o)
        .lines()
        .map(|l| {
            let (e, h) = l.rsplit_once("  ").expect("edge and hash");
            (e.to_string(), h.to_string())
        })
        .collect()
}

#[test]
fn validate_accepts_the_fixture() {
    let w = Work::new();
    let o = w.koji(&["validate", "ml.yaml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn hashes_are_deterministic_and_local_to_the_changed_argument() {
    let w = Work::new();
    let hash = |b: &str| {
        let o = w.koji(&["hash", "ml.yaml", "--arg", "TRAIN=train.csv", "--arg", b]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        edge_hashes(&o)
    };
    let first = hash("BUSINESS=b1.csv");
    assert_eq!(first.len(), 5);
    assert_eq!(first, hash("BUSINESS=b1.csv"));
    let second = hash("BUSINESS=b2.csv");
    for ((edge, a), (_, b)) in first.iter().zip(&second) {
        let downstream = edge.starts_with("BUSINESS.") || edge.starts_with("annotate.");
        assert_eq!(a != b, downstream, "{edge}");
    }
}

#[test]
fn explicit_hash_replaces_the_content_hash() {
    let w = Work::new();
    let explicit = "ab".repeat(32);
    let t = format!("TRAIN=train.csv:{explicit}");
    let o = w.koji(&["hash", "ml.yaml", "--arg", &t, "--arg", "BUSINESS=b1.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let train = edge_hashes(&o)
        .into_iter()
        .find(|(e, _)| e.starts_with("TRAIN."))
        .unwrap();
    assert_eq!(train.1, explicit);
    assert!(!stderr(&o).contains("INFO: TRAIN="));
    assert!(stderr(&o).contains("INFO: BUSINESS=b1.csv:"));
}

#[test]
fn run_then_rerun_uses_the_cache() {
    let w = Work::new();
    let o = w.run_mock("b1.csv", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for step in ["train", "serve", "annotate"] {
        assert!(out.contains(&format!("step {step}: executions=1")), "{out}");
    }
    assert!(out.contains("status: delivered"));
    assert_eq!(fs::read_to_string(w.path("out/INSIGHT")).unwrap(), "insight(b1)");
    assert!(w.path("out/.koji/cache/objects").is_dir());

    let again = w.run_mock("b1.csv", &[]);
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("step annotate: executions=0 cache_hits=1"));

    let nocache = w.run_mock("b1.csv", &["--no-cache"]);
    assert!(stdout(&nocache).contains("step train: executions=1"));
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let w = Work::new();
    assert_eq!(code(&w.koji(&["validate", "missing.yaml"])), 64);
    assert_eq!(code(&w.koji(&["frobnicate"])), 64);
    assert_eq!(code(&w.koji(&["--help"])), 0);

    let missing = w.koji(&["run", "ml.yaml", "--arg", "TRAIN=train.csv", "--out", "o"]);
    assert_eq!(code(&missing), 3);
    let unknown = w.koji(&[
        "hash", "ml.yaml", "--arg", "TRAIN=train.csv", "--arg", "BUSINESS=b1.csv", "--arg",
        "OTHER=b1.csv",
    ]);
    assert_eq!(code(&unknown), 3);
    let absent = w.koji(&["hash", "ml.yaml", "--arg", "TRAIN=nope.csv", "--arg", "BUSINESS=b1.csv"]);
    assert_eq!(code(&absent), 3);

    let mistyped = ML_INSIGHT_YAML.replacen("format: model }", "format: onnx }", 1);
    w.write("typed.yaml", &mistyped);
    let o = w.koji(&["validate", "typed.yaml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("FormatMismatch"), "{}", stderr(&o));

    w.write("dup.yaml", &ML_INSIGHT_YAML.replacen("label: serve", "label: train", 1));
    assert_eq!(code(&w.koji(&["validate", "dup.yaml"])), 1);

    w.write("typo.yaml", &ML_INSIGHT_YAML.replacen("label: train", "lable: train", 1));
    assert_eq!(code(&w.koji(&["validate", "typo.yaml"])), 1);

    w.write(
        "fail.mock.yaml",
        &ML_INSIGHT_MOCK_YAML.replace("  - succeed: { outputs: { insight: \"insight(${business})\" } }", "  - fail: {}"),
    );
    let o = w.run_mock("b1.csv", &["--mock-script", "fail.mock.yaml"]);
    assert_eq!(code(&o), 4, "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("attempts=[failed,failed,failed]"));

    let o = w.koji(&[
        "run", "ml.yaml", "--arg", "TRAIN=train.csv", "--arg", "BUSINESS=b1.csv", "--out", "o",
        "--mock-script", "ml.mock.yaml",
    ]);
    assert_eq!(code(&o), 64);
}

#[test]
fn graph_marks_service_edges() {
    let w = Work::new();
    let o = w.koji(&["graph", "ml.yaml"]);
    assert_eq!(code(&o), 0);
    let dot = stdout(&o);
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("style=dashed").count(), 1);
    assert!(dot.contains("\"serve\" -> \"annotate\""), "{dot}");
}

#[test]
fn cache_stats_and_verify() {
    let w = Work::new();
    let fresh = w.koji(&["cache", "--cache", "fresh", "stats"]);
    assert_eq!(code(&fresh), 0);
    assert!(stdout(&fresh).starts_with("entries 0\n"));

    assert_eq!(code(&w.run_mock("b1.csv", &["--cache", "store"])), 0);
    let stats = stdout(&w.koji(&["cache", "--cache", "store", "stats"]));
    assert!(stats.starts_with("entries 2\n"), "{stats}");
    assert_eq!(code(&w.koji(&["cache", "--cache", "store", "verify"])), 0);

    let hashes = edge_hashes(&w.koji(&[
        "hash", "ml.yaml", "--arg", "TRAIN=train.csv", "--arg", "BUSINESS=b1.csv",
    ]));
    let key = &hashes.iter().find(|(e, _)| e.starts_with("annotate.")).unwrap().1;
    let payload = w.path("store/objects").join(&key[..2]).join(&key[2..]).join("payload");
    fs::set_permissions(&payload, fs::Permissions::from_mode(0o644)).unwrap();
    let mut bytes = fs::read(&payload).unwrap();
    bytes[0] ^= 1;
    fs::write(&payload, bytes).unwrap();

    let o = w.koji(&["cache", "--cache", "store", "verify"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains(key.as_str()), "{}", stderr(&o));
    let one = w.koji(&["cache", "--cache", "store", "verify", key]);
    assert_ne!(code(&one), 0);

    assert_eq!(code(&w.koji(&["cache", "--cache", "store", "evict", key])), 0);
    assert_eq!(code(&w.koji(&["cache", "--cache", "store", "verify"])), 0);
    assert_eq!(code(&w.koji(&["cache", "--cache", "store", "evict", key])), 1);
}

const SLEEPER_YAML: &str = r#"
steps:
  - label: SCRIPT
    transform:
      outputs: [{ name: out, resource: { file: {} } }]
      logic: { arg: { name: SCRIPT, resource: { file: {} } } }
  - label: work
    inputs: [{ name: script, provider_step_label: SCRIPT, provider_output_name: out }]
    transform:
      inputs: [{ name: script, resource: { file: {} } }]
      outputs: [{ name: out, resource: { file: {} } }]
      logic:
        container:
          image: /bin/sh
          inputs: [{ name: script, flag: "" }]
          outputs: [{ name: out, flag: "" }]
          env: [{ name: PIDFILE, value: PIDFILE_PATH }]
  - label: R
    inputs: [{ name: in, provider_step_label: work, provider_output_name: out }]
    transform:
      inputs: [{ name: in, resource: { file: {} } }]
      logic: { return: { name: R, resource: { file: {} } } }
"#;

/// Live (non-zombie) processes in group `pgid`. Orphaned members that
/// already exited may linger as zombies until init reaps them.
fn live_in_group(pgid: i32) -> Vec<i32> {
    let mut live = vec![];
    for entry in fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<i32>() else {
            continue;
        };
        let Ok(stat) = fs::read_to_string(entry.path().join("stat")) else {
            continue;
        };
        // fields after the parenthesised command: state ppid pgrp ...
        let Some((_, rest)) = stat.rsplit_once(") ") else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() > 2 && fields[2] == pgid.to_string() && fields[0] != "Z" {
            live.push(pid);
        }
    }
    live
}

#[test]
fn interrupt_aborts_and_leaves_no_processes() {
    if !Path::new("/bin/sh").exists() || !Path::new("/bin/sleep").exists() {
        return;
    }
    let w = Work::new();
    let pidfile = w.path("pid");
    w.write(
        "sleeper.yaml",
        &SLEEPER_YAML.replace("PIDFILE_PATH", pidfile.to_str().unwrap()),
    );
    w.write("script.sh", "echo $$ > \"$PIDFILE\"\n/bin/sleep 60\necho done > \"$1\"\n");
    let mut child = Command::new(env!("CARGO_BIN_EXE_koji"))
        .args(["run", "sleeper.yaml", "--arg", "SCRIPT=script.sh", "--out", "out"])
        .current_dir(w.dir.path())
        .env_remove("KOJI_CACHE")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();

    let deadline = Instant::now() + Duration::from_secs(10);
    let pgid = loop {
        if let Some(pid) = fs::read_to_string(&pidfile)
            .ok()
            .and_then(|s| s.trim().parse::<i32>().ok())
        {
            break pid;
        }
        assert!(Instant::now() < deadline, "step never started");
        std::thread::sleep(Duration::from_millis(10));
    };
    assert!(!live_in_group(pgid).is_empty());
    // SAFETY: signalling our own child.
    unsafe {
        libc::kill(child.id() as i32, libc::SIGINT);
    }
    let deadline = Instant::now() + Duration::from_secs(15);
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "run did not stop after interrupt");
        std::thread::sleep(Duration::from_millis(10));
    };
    assert_eq!(status.code(), Some(5));
    let survivors = live_in_group(pgid);
    assert!(survivors.is_empty(), "step processes survived the abort: {survivors:?}");
    assert!(!w.path("out/R").exists());
}

#[test]
fn local_run_with_relative_paths_delivers() {
    if !Path::new("/bin/sh").exists() {
        return;
    }
    let w = Work::new();
    let pidfile = w.path("pid");
    w.write(
        "sleeper.yaml",
        &SLEEPER_YAML.replace("PIDFILE_PATH", pidfile.to_str().unwrap()),
    );
    w.write("script.sh", "echo done > \"$1\"\n");
    let o = w.koji(&["run", "sleeper.yaml", "--arg", "SCRIPT=script.sh", "--out", "rel/out"]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), stderr(&o));
    assert_eq!(fs::read_to_string(w.path("rel/out/R")).unwrap(), "done\n");
}
