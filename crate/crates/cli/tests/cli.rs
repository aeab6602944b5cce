use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "epochs=2",
    "backbone.dim=16",
    "backbone.levels=3",
    "decoder.layers=2",
    "decoder.heads=2",
    "decoder.num_queries=16",
    "lfe.hidden_dim=16",
    "optim.batch_size=2",
    "data.synthetic_count=3",
];

fn symspot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symspot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = symspot(args);
    assert!(
        out.status.success(),
        "symspot {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_sets<'a>(verb: &'a str, extra: &[&'a str], sets: &[String]) -> Vec<String> {
    let mut v: Vec<String> = vec![verb.to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    for s in sets {
        v.push("--set".into());
        v.push(s.clone());
    }
    v
}

fn tiny_sets(dir: &Path) -> Vec<String> {
    let mut s: Vec<String> = TINY.iter().map(|x| x.to_string()).collect();
    s.push(format!("output_dir=\"{}\"", dir.display()));
    s
}

fn run_owned(args: &[String]) -> String {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let data = tmp.path().join("data.json");
    let gen_sets: Vec<String> = vec!["seed=11".into()];
    run_owned(&with_sets("gen-data", &["--count", "2", "--out", data.to_str().unwrap()], &gen_sets));

    let mut sets = tiny_sets(&run);
    sets.push(format!("data.eval=\"{}\"", data.display()));
    sets.push("eval_every=1".into());
    let table = run_owned(&with_sets("train", &[], &sets));
    assert!(table.contains("PQ") && table.contains("RQ") && table.contains("SQ"));

    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i + 1);
        assert!(r["loss"]["total"].as_f64().unwrap().is_finite());
        assert!(r["query_recall"].is_number());
        assert!(r["mask_bce"].is_number());
        assert!(r["eval"]["pq"].is_number());
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["total"]["pq"].as_f64().unwrap().is_finite());
    assert!(run.join("config.toml").exists());

    let ck = run.join("checkpoint.json");
    let out_dir = tmp.path().join("eval");
    let printed = ok(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(printed, std::fs::read_to_string(out_dir.join("report.txt")).unwrap());

    let pred_path = tmp.path().join("pred.json");
    let args = [
        "predict",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        pred_path.to_str().unwrap(),
    ];
    ok(&args);
    let first = std::fs::read_to_string(&pred_path).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read_to_string(&pred_path).unwrap(), "predict is deterministic");
    let pred: Value = serde_json::from_str(&first).unwrap();
    let input: Value = serde_json::from_str(&std::fs::read_to_string(&data).unwrap()).unwrap();
    let drawings = pred["drawings"].as_array().unwrap();
    assert_eq!(drawings.len(), 2);
    for (p, d) in drawings.iter().zip(input["drawings"].as_array().unwrap()) {
        assert_eq!(p["id"], d["id"]);
        let prims = p["primitives"].as_array().unwrap();
        assert_eq!(prims.len(), d["primitives"].as_array().unwrap().len());
        for (i, prim) in prims.iter().enumerate() {
            assert_eq!(prim["index"], i);
            assert!(prim["label"].is_null() || prim["label"].is_u64());
        }
    }
}

#[test]
fn resume_continues_the_epoch_count() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut sets = tiny_sets(&run);
    sets.push("epochs=1".into());
    run_owned(&with_sets("train", &[], &sets));
    let mut more = tiny_sets(&run);
    more.push("epochs=2".into());
    run_owned(&with_sets("train", &["--resume"], &more));
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
}

#[test]
fn config_file_and_flags_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n[data]\nsynthetic_count = 4\n").unwrap();
    let a = tmp.path().join("a.json");
    ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(v["drawings"].as_array().unwrap().len(), 4);
    let b = tmp.path().join("b.json");
    ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "data.synthetic_count=2",
        "--out",
        b.to_str().unwrap(),
    ]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&b).unwrap()).unwrap();
    assert_eq!(v["drawings"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = symspot(&["train", "--set", "decoder.no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = symspot(&["ablate", "--axis", "depth"]);
    assert!(!out.status.success());
    let out = symspot(&["eval", "--checkpoint", "/nonexistent/checkpoint.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn ablate_writes_axis_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let mut sets: Vec<String> = TINY.iter().map(|x| x.to_string()).collect();
    sets.push("epochs=1".into());
    let table = run_owned(&with_sets(
        "ablate",
        &["--axis", "pool_type", "--eval-count", "2", "--out", out.to_str().unwrap()],
        &sets,
    ));
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("Pool Type"));
    let settings: Vec<&str> = lines[2..].iter().map(|l| l.split('|').next().unwrap().trim()).collect();
    assert_eq!(settings, ["baseline", "mean", "max", "attn", "concat"]);
    let json: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation_pool_type.json")).unwrap()).unwrap();
    assert_eq!(json["axis"], "pool_type");
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
}
