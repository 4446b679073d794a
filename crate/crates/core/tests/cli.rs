mod common;

use std::fs;

use serde_json::Value;

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = common::run_in(dir.path(), &["drift", "--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("--window"));
    assert_eq!(code(&common::run_in(dir.path(), &["--version"])), 0);
    assert_eq!(code(&common::run_in(dir.path(), &["drift", "--bogus"])), 64);
    assert_eq!(code(&common::run_in(dir.path(), &["frobnicate"])), 64);
}

#[test]
fn missing_taxonomy_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scenario(dir.path());
    let out = common::run_in(
        dir.path(),
        &[
            "--taxonomy",
            "/missing/taxonomy.json",
            "ingest",
            "--in",
            "docs",
            "--out",
            "s.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("/missing/taxonomy.json"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn report_on_empty_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = common::run_in(dir.path(), &["--store", "nowhere", "report"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn deterministic_without_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "deterministic = true\n").unwrap();
    let out = common::run_in(dir.path(), &["--config", "c.toml", "report"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn drift_and_phases_on_scenario_posts() {
    let dir = tempfile::tempdir().unwrap();
    common::write_scenario(dir.path());
    let c = ["--config", "chronoplay.toml"];
    let mut all_posts = fs::read_to_string(dir.path().join("posts.jsonl")).unwrap();
    for step in 1..=3 {
        for line in fs::read_to_string(dir.path().join(format!("events/step{step}.jsonl")))
            .unwrap()
            .lines()
        {
            let v: Value = serde_json::from_str(line).unwrap();
            if v["kind"] == "post" {
                all_posts.push_str(line);
                all_posts.push('\n');
            }
        }
    }
    fs::write(dir.path().join("all.jsonl"), all_posts).unwrap();
    let from = common::day(0);
    let to = common::day(50);
    let args = [
        "--posts",
        "all.jsonl",
        "--from",
        from.as_str(),
        "--to",
        to.as_str(),
    ];
    let mut drift = c.to_vec();
    drift.extend(["drift", "--out", "drift.json"]);
    drift.extend(args);
    common::ok(dir.path(), &drift);
    let d = json(&dir.path().join("drift.json"));
    assert!(!d["reports"].as_array().unwrap().is_empty());
    let mut phases = c.to_vec();
    phases.extend(["phases", "--out", "phases.json"]);
    phases.extend(args);
    common::ok(dir.path(), &phases);
    let p = json(&dir.path().join("phases.json"));
    assert_eq!(p["boundaries"], d["boundaries"]);
    assert_eq!(
        p["phases"].as_array().unwrap().len(),
        p["boundaries"].as_array().unwrap().len() + 1
    );
}

#[test]
fn store_commands_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::build_store(root, "dual", 20);
    let c = ["--config", "chronoplay.toml"];
    let with =
        |args: &[&str]| -> Vec<String> { c.iter().chain(args).map(|s| s.to_string()).collect() };
    let call = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        common::run_in(root, &refs)
    };

    let before = common::tree(&root.join("store"));
    let again = call(with(&[
        "update",
        "--mode",
        "dual",
        "--events",
        "events/step3.jsonl",
        "--now",
        &common::day(50),
    ]));
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(
        common::tree(&root.join("store")),
        before,
        "repeated update changed the store"
    );
    let forced = call(with(&[
        "--force",
        "update",
        "--mode",
        "dual",
        "--events",
        "events/step3.jsonl",
        "--now",
        &common::day(50),
    ]));
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
    assert_eq!(
        common::tree(&root.join("store")),
        before,
        "forced recompute is not reproducible"
    );

    let bad_mode = call(with(&[
        "update",
        "--mode",
        "sideways",
        "--events",
        "events/step1.jsonl",
    ]));
    assert_eq!(code(&bad_mode), 1);

    assert_eq!(
        code(&call(with(&["eval", "--retriever", "bm25", "--k", "1,3"]))),
        0
    );
    let eval = json(&root.join("store/evals/003-bm25.json"));
    assert_eq!(eval["slice_index"], 3);
    let rows = eval["overall"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        for m in ["recall", "precision", "f1", "ndcg"] {
            let v = row["metrics"][m].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{m} = {v}");
        }
    }
    assert_eq!(code(&call(with(&["eval", "--retriever", "nonsense"]))), 1);

    let judged = call(with(&[
        "judge",
        "--retriever",
        "bm25",
        "--criteria",
        "correctness,faithfulness",
    ]));
    assert_eq!(code(&judged), 0, "{}", stderr(&judged));
    let j = json(&root.join("store/judge/003-bm25.json"));
    for m in j["means"].as_array().unwrap() {
        assert_eq!(m["mean"].as_f64(), Some(1.0), "{m}");
        assert_eq!(m["errors"], 0);
    }

    let report = call(with(&["report", "--csv", "report.csv"]));
    assert_eq!(code(&report), 0, "{}", stderr(&report));
    let r = json(&root.join("store/report.json"));
    assert_eq!(r["slices"].as_array().unwrap().len(), 4);
    let csv = fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(csv.starts_with("slice,mode,tuples"));
    assert!(csv.lines().count() >= 5);
}

#[test]
fn agreement_from_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("llm.jsonl"),
        "{\"id\":\"a\",\"score\":2}\n{\"id\":\"b\",\"score\":1}\n{\"id\":\"c\",\"score\":0}\n{\"id\":\"d\",\"score\":2}\n",
    )
    .unwrap();
    fs::write(
        root.join("human.jsonl"),
        "{\"id\":\"a\",\"votes\":[true,true,true]}\n{\"id\":\"b\",\"votes\":[false,false,true]}\n\
         {\"id\":\"c\",\"votes\":[false,false,false]}\n{\"id\":\"d\",\"votes\":[true,true,false]}\n",
    )
    .unwrap();
    common::ok(
        root,
        &[
            "agreement",
            "--llm",
            "llm.jsonl",
            "--human",
            "human.jsonl",
            "--out",
            "agree.json",
        ],
    );
    let v = json(&root.join("agree.json"));
    assert_eq!(v["items"], 4);
    assert_eq!(v["agreement"]["accuracy"].as_f64(), Some(0.75));
    assert_eq!(v["agreement"]["confusion"]["fp"], 1);
    assert_eq!(v["agreement"]["confusion"]["fn"], 0);
    assert!(v["human_alpha"].as_f64().is_some());

    fs::write(
        root.join("short.jsonl"),
        "{\"id\":\"a\",\"votes\":[true]}\n",
    )
    .unwrap();
    let out = common::run_in(
        root,
        &[
            "agreement",
            "--llm",
            "llm.jsonl",
            "--human",
            "short.jsonl",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains("no human labels for b"),
        "{}",
        stderr(&out)
    );
}
