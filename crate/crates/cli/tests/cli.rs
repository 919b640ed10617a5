use std::path::Path;
use std::process::{Command, Output};

fn circgen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circgen")).current_dir(dir).args(args).output().expect("spawn circgen")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(circgen(dir.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(circgen(dir.path(), &["search", "--method", "nope", "--topology", "buck"]).status.code(), Some(2));
    let help = circgen(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("Usage") && text.contains("train-rl"));
}

#[test]
fn runtime_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let o = circgen(dir.path(), &["--backend", "hspice", "vocab"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "BadConfig");
    let o = circgen(dir.path(), &["generate", "--checkpoint", "missing.json", "--topology", "buck"]);
    assert_eq!(stderr_json(&o)["error"], "Io");
    let o = circgen(dir.path(), &["search", "--topology", "flyback"]);
    assert_eq!(stderr_json(&o)["error"], "UnknownTopology");
    std::fs::write(dir.path().join("junk.json"), r#"{"format":"other","version":1}"#).unwrap();
    let o = circgen(dir.path(), &["evaluate", "--checkpoint", "junk.json"]);
    assert_eq!(stderr_json(&o)["error"], "CheckpointMismatch");
}

#[test]
fn reports_reproduce_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        let o = circgen(
            d,
            &[
                "--seed",
                "5",
                "--report",
                &format!("{name}.json"),
                "datagen",
                "--count",
                "8",
                "--templates",
                "buck,wien_bridge",
                "--out",
                &format!("{name}.jsonl"),
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |f: &str| std::fs::read_to_string(d.join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.jsonl").lines().count(), 16);

    for name in ["s1", "s2"] {
        let o = circgen(
            d,
            &[
                "--seed",
                "3",
                "--report",
                &format!("{name}.json"),
                "search",
                "--topology",
                "boost",
                "--method",
                "ga",
                "--budget",
                "60",
            ],
        );
        assert!(o.status.success());
    }
    assert_eq!(read("s1.json"), read("s2.json"));
    let r: serde_json::Value = serde_json::from_str(&read("s1.json")).unwrap();
    assert_eq!(r["settings"]["seed"], 3);
    assert_eq!(r["result"]["evaluations"], 16 + 2 * 15);
}

#[test]
fn config_file_and_overrides_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), "temperature = 0.5\ntop_k = 7\nga_population = 8\n").unwrap();
    let o = circgen(
        d,
        &[
            "--config",
            "run.conf",
            "--set",
            "top_k=9",
            "--report",
            "r.json",
            "search",
            "--topology",
            "buck",
            "--method",
            "rs",
            "--budget",
            "5",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["settings"]["temperature"], 0.5);
    assert_eq!(r["settings"]["top_k"], 9);
    assert_eq!(r["settings"]["ga_population"], 8);
    assert_eq!(r["result"]["evaluations"], 5);
    let o = circgen(d, &["--set", "warp=9", "vocab"]);
    assert_eq!(stderr_json(&o)["error"], "BadConfig");
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = circgen(d, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["datagen", "--count", "10", "--templates", "inverting_amp,current_mirror", "--out", "d.jsonl"]);
    ok(&["--set", "augment=2", "train-sl", "--data", "d.jsonl", "--out", "m.json", "--epochs", "1"]);
    let gen = ok(&["generate", "--checkpoint", "m.json", "--topology", "current_mirror", "--n", "2", "--level", "full"]);
    let first = gen.lines().next().unwrap();
    assert!(first.starts_with("START TOPO_CURRENT_MIRROR"));
    let v = ok(&["--report", "v.json", "validate", "--tokens", first, "--level", "full"]);
    assert!(!v.is_empty());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("v.json")).unwrap()).unwrap();
    assert_eq!(r["result"]["results"][0]["valid"], true);

    let rank = ok(&[
        "rank",
        "--checkpoint",
        "m.json",
        "--checkpoint",
        "m.json",
        "--topology",
        "inverting_amp",
        "--n",
        "2",
        "--ranker",
        "spice",
    ]);
    assert!(rank.contains("winner"));
    ok(&["--set", "rm_epochs=1", "train-rm", "--data", "d.jsonl", "--out", "rm.json", "--warm-start", "m.json"]);
    ok(&["rank", "--checkpoint", "m.json", "--topology", "inverting_amp", "--n", "2", "--ranker", "rm", "--rm", "rm.json"]);
    let w = ok(&["search", "--topology", "inverting_amp", "--method", "warm", "--checkpoint", "m.json", "--budget", "40"]);
    let rec: serde_json::Value = serde_json::from_str(w.trim()).unwrap();
    assert!(rec["details"]["generator_evaluations"].as_u64().unwrap() + rec["evaluations"].as_u64().unwrap() <= 40);
    ok(&[
        "--set",
        "rl_batch=2",
        "--set",
        "eval_every=0",
        "train-rl",
        "--init",
        "m.json",
        "--out",
        "rl.json",
        "--algorithm",
        "reinforce",
        "--steps",
        "1",
        "--templates",
        "inverting_amp",
        "--log",
        "rl.jsonl",
    ]);
    let log = std::fs::read_to_string(d.join("rl.jsonl")).unwrap();
    let step: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["step", "mean_reward", "kl", "beta", "sim_valid"] {
        assert!(step.get(k).is_some(), "{k}");
    }
    let table = ok(&["evaluate", "--checkpoint", "rl.json", "--templates", "inverting_amp", "--specs", "1", "--samples", "2"]);
    assert!(table.contains("inverting_amp"));
    let o = circgen(d, &["evaluate", "--checkpoint", "rl.json", "--samples", "0"]);
    assert_eq!(stderr_json(&o)["error"], "EmptyEvaluation");
}
