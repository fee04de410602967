use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emotok_core::bridge::{MockBehaviour, MockServer, API_KEY_ENV};

fn emotok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emotok"))
        .args(args)
        .env_remove(API_KEY_ENV)
        .output()
        .expect("spawn emotok")
}

fn ok(args: &[&str]) -> String {
    let out = emotok(args);
    assert!(
        out.status.success(),
        "emotok {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = emotok(args);
    assert!(
        !out.status.success(),
        "emotok {args:?} unexpectedly succeeded"
    );
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, profile: &str, spl: &str, labels: Option<&str>) -> PathBuf {
    let out = dir.join(profile);
    let mut args = vec![
        "synth",
        "--profile",
        profile,
        "--samples-per-label",
        spl,
        "--seed",
        "11",
        "--out-dir",
        p(&out),
    ];
    if let Some(k) = labels {
        args.extend(["--labels", k]);
    }
    PathBuf::from(ok(&args).trim())
}

fn small_config(dir: &Path, manifests: &[PathBuf], extra: &str) -> PathBuf {
    let list: Vec<String> = manifests.iter().map(|m| format!("{:?}", p(m))).collect();
    let text = format!(
        "seed = 3\n[data]\nmanifests = [{}]\n\n[model.encoder]\nbase_channels = 8\nlayer_count = 1\n\n[model.tokenizer]\ntoken_dim = 16\n\n[pretrain.schedule]\nepochs = 2\nwarmup_epochs = 1\ndecay_epochs = []\nbatch_size = 4\n{extra}",
        list.join(", ")
    );
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_then_ingest_reports_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "kdae-like", "2", None);
    let report = ok(&["ingest", "--manifest", p(&manifest)]);
    assert!(report.starts_with("dataset kdae-like: ok"), "{report}");
    assert!(
        report.contains("samples: 14 (14 with descriptions)"),
        "{report}"
    );
    assert!(report.contains("  Happiness: 2"), "{report}");

    let err = fails(&["ingest", "--manifest", p(&dir.path().join("missing.toml"))]);
    assert!(
        err.starts_with("error:") && err.contains("missing.toml"),
        "{err}"
    );
    let err = fails(&[
        "synth",
        "--profile",
        "nope",
        "--seed",
        "1",
        "--out-dir",
        p(&dir.path().join("x")),
    ]);
    assert!(err.contains("nope"), "{err}");
}

#[test]
fn separate_pretraining_is_deterministic_and_sealed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifests: Vec<PathBuf> = ["emilya-like", "kdae-like", "egbm-like"]
        .iter()
        .map(|prof| synth(d, prof, "3", Some("2")))
        .collect();
    let cfg = small_config(d, &manifests, "");
    let run = |name: &str| {
        let root = d.join(name);
        ok(&[
            "pretrain",
            "--config",
            p(&cfg),
            "--strategy",
            "separate",
            "--out-dir",
            p(&root),
            "-q",
        ]);
        root
    };
    let a = run("a");
    let b = run("b");
    for name in ["emilya-like", "kdae-like", "egbm-like"] {
        assert!(a
            .join("pretrain")
            .join(format!("alignment-{name}.json"))
            .is_file());
    }
    let report = |root: &Path| fs::read_to_string(root.join("pretrain/report.json")).unwrap();
    assert_eq!(report(&a), report(&b));
    assert_eq!(
        fs::read_to_string(a.join("pretrain/metrics.jsonl")).unwrap(),
        fs::read_to_string(b.join("pretrain/metrics.jsonl")).unwrap()
    );

    let err = fails(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--strategy",
        "separate",
        "--out-dir",
        p(&a),
    ]);
    assert!(err.contains("finalized"), "{err}");

    let c = d.join("c");
    ok(&[
        "pretrain",
        "--from-run",
        p(&a.join("pretrain")),
        "--out-dir",
        p(&c),
        "-q",
    ]);
    assert_eq!(report(&a), report(&c));
}

#[test]
fn remote_finetune_and_empty_split_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "emilya-like", "1", Some("5"));
    let cfg = small_config(d, &[manifest], "");
    let root = d.join("run");
    let err = fails(&[
        "finetune",
        "--config",
        p(&cfg),
        "--backend",
        "remote",
        "--endpoint",
        "http://127.0.0.1:9",
        "--out-dir",
        p(&root),
    ]);
    assert!(err.contains("inference-only"), "{err}");

    ok(&["pretrain", "--config", p(&cfg), "--out-dir", p(&root), "-q"]);
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[data]\n", "[data]\ntrain_fraction = 0.95\n");
    let tight = d.join("tight.toml");
    fs::write(&tight, text).unwrap();
    let tight_root = d.join("tight");
    ok(&[
        "pretrain",
        "--config",
        p(&tight),
        "--out-dir",
        p(&tight_root),
        "-q",
    ]);
    let server = MockServer::start(MockBehaviour::Reply("This is a sad person.".into())).unwrap();
    let err = fails(&[
        "eval",
        "--config",
        p(&tight),
        "--backend",
        "remote",
        "--endpoint",
        server.url(),
        "--out-dir",
        p(&tight_root),
    ]);
    assert!(err.contains("test split has no samples"), "{err}");
    assert!(server.requests().is_empty());
}

#[test]
fn describe_recognises_a_trained_sample_and_uses_the_remote_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "emilya-like", "6", Some("2"));
    let extra = "\n[bridge]\ntasks = [\"recognition\"]\n\n[bridge.decoder]\nd_model = 64\n\n[bridge.recognition]\nsteps = 300\n\n[eval]\nsplit = \"train\"\ntasks = [\"recognition\"]\n";
    let cfg = small_config(d, std::slice::from_ref(&manifest), extra);
    let root = d.join("run");
    ok(&["pretrain", "--config", p(&cfg), "--out-dir", p(&root), "-q"]);
    ok(&["finetune", "--config", p(&cfg), "--out-dir", p(&root), "-q"]);
    let summary = ok(&["eval", "--from-run", p(&root), "-q"]);
    assert!(summary.contains("accuracy: 1.0000"), "{summary}");

    let joy = manifest
        .parent()
        .unwrap()
        .join("samples/emilya-like-0006.txt");
    assert!(fs::read_to_string(&joy)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .ends_with("Joy"));
    let out = ok(&[
        "describe",
        "--from-run",
        p(&root),
        "--sample",
        p(&joy),
        "-q",
    ]);
    assert!(out.starts_with("label: Joy\ndescription: "), "{out}");

    let reply = "The shoulders drop and the gait slows; this is a sad person.";
    let server = MockServer::start(MockBehaviour::Reply(reply.into())).unwrap();
    let secret = "sk-test-never-printed";
    let out = Command::new(env!("CARGO_BIN_EXE_emotok"))
        .args([
            "describe",
            "--from-run",
            p(&root),
            "--sample",
            p(&joy),
            "--backend",
            "remote",
            "--endpoint",
            server.url(),
        ])
        .env(API_KEY_ENV, secret)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout, format!("label: Sadness\ndescription: {reply}\n"));
    assert!(!stdout.contains(secret) && !String::from_utf8_lossy(&out.stderr).contains(secret));
    let requests = server.requests();
    assert_eq!(requests.len(), 2);
    assert_eq!(
        requests[0].authorization.as_deref(),
        Some(format!("Bearer {secret}").as_str())
    );
}
