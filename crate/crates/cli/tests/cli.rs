mod common;

use actionguide_cli::app::MotionDocument;
use common::{fixture, path, run, run_ok, TEXT};
use serde_json::Value;

fn models() -> String {
    path(&fixture("cli-fixture").models).to_string()
}

fn stderr_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let m = models();
    let dir = &fixture("cli-fixture").dir;
    let a = dir.join("det-a.json");
    let b = dir.join("det-b.json");
    for out in [&a, &b] {
        run_ok(&["generate", "--text", TEXT, "--models", &m, "--seed", "11", "--steps", "6,5,4", "--out", path(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let s1 = run_ok(&["generate", "--text", TEXT, "--models", &m, "--seed", "11", "--steps", "6,5,4", "--json"]).stdout;
    let s2 = run_ok(&["generate", "--text", TEXT, "--models", &m, "--seed", "11", "--steps", "6,5,4", "--json"]).stdout;
    assert_eq!(s1, s2);
    let s3 = run_ok(&["generate", "--text", TEXT, "--models", &m, "--seed", "12", "--steps", "6,5,4", "--json"]).stdout;
    assert_ne!(s1, s3, "a different seed must change the motion");

    let doc: MotionDocument = serde_json::from_slice(&s1).unwrap();
    assert_eq!(doc.frames.len(), 120);
    assert_eq!(doc.export.positions.len(), 120);
    let d = doc.diagnostics.unwrap();
    assert_eq!(d.lambda.len(), 2);
}

#[test]
fn parse_prints_graph_json_without_models() {
    let out = run_ok(&["parse", "--text", "a person jumps", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let kinds: Vec<&str> = v["graph"]["nodes"].as_array().unwrap().iter().map(|n| n["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "action").count(), 1);
    assert_eq!(kinds.iter().filter(|k| **k == "motion").count(), 1);
    assert_eq!(v["local_actions"], serde_json::json!(["a person jumps"]));
    assert!(v["attention"].is_null());
}

#[test]
fn parse_with_models_previews_guiding_weights() {
    let out = run_ok(&["parse", "--text", TEXT, "--models", &models(), "--rho", "0.5", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let lambda: Vec<f64> = serde_json::from_value(v["attention"]["lambda"].clone()).unwrap();
    let coeffs: Vec<f64> = serde_json::from_value(v["attention"]["action_coefficients"].clone()).unwrap();
    assert_eq!(lambda.len(), 2);
    for (l, e) in lambda.iter().zip(&coeffs) {
        assert_eq!(*l, 0.5 * e);
    }
    assert!(coeffs.iter().all(|e| (0.0..=1.0).contains(e)));
    assert!(coeffs.iter().sum::<f64>() <= 1.0 + 1e-9);
}

#[test]
fn weights_accept_index_or_verb() {
    let m = models();
    let base = ["generate", "--text", TEXT, "--models", &m, "--seed", "2", "--steps", "4", "--json"];
    let by_index = run_ok(&[&base[..], &["--weights", "0=3,1=0.5"]].concat()).stdout;
    let by_verb = run_ok(&[&base[..], &["--weights", "walks=3,waves=0.5"]].concat()).stdout;
    let plain = run_ok(&base).stdout;
    assert_eq!(by_index, by_verb);
    assert_ne!(by_index, plain);

    let bad = run(&[&base[..], &["--weights", "dances=2"]].concat());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn rho_zero_is_deterministic_and_differs_from_guided() {
    let m = models();
    let base = ["generate", "--text", TEXT, "--models", &m, "--seed", "5", "--steps", "5", "--json"];
    let off = run_ok(&[&base[..], &["--rho", "0"]].concat()).stdout;
    let on = run_ok(&[&base[..], &["--rho", "10"]].concat()).stdout;
    assert_eq!(off, run_ok(&[&base[..], &["--rho", "0"]].concat()).stdout);
    assert_ne!(off, on);
}

#[test]
fn precision_32_rounds_every_frame_value() {
    let out = run_ok(&["--precision", "32", "generate", "--text", TEXT, "--models", &models(), "--steps", "4", "--json"]);
    let doc: MotionDocument = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(serde_json::to_value(doc.precision).unwrap(), "32");
    for v in doc.frames.iter().flatten() {
        assert_eq!(*v, (*v as f32) as f64);
    }
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [
        vec!["frobnicate"],
        vec!["generate", "--models", "m"],
        vec!["generate", "--text", "x", "--models", "m", "--steps", "1,2"],
        vec!["generate", "--text", "x", "--models", "m", "--weights", "walks"],
        vec!["generate", "--text", "x", "--models", "m", "--weights", "0=-1"],
        vec!["--precision", "16", "parse", "--text", "x"],
        vec!["train", "nothing", "--corpus", "c", "--out", "o"],
        vec!["evaluate", "--corpus", "c", "--models", "m", "--repeats", "many"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1_and_a_structured_message() {
    let out = run(&["generate", "--text", "  ", "--models", "missing", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["code"], "empty_text");

    let out = run(&["generate", "--text", TEXT, "--models", "/nonexistent/models", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["error"]["code"], "io");
    assert!(e["error"]["message"].as_str().unwrap().contains("/nonexistent/models"));

    let out = run(&["parse", "--text", "a quiet afternoon", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["code"], "no_action_found");

    let out = run(&["parse", "--text", ""]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[empty_text]"));
}

#[test]
fn gen_corpus_is_reproducible() {
    let dir = &fixture("cli-fixture").dir;
    let a = dir.join("gc-a.jsonl");
    let b = dir.join("gc-b.jsonl");
    run_ok(&["gen-corpus", "--seed", "9", "--size", "25", "--out", path(&a)]);
    run_ok(&["gen-corpus", "--seed", "9", "--size", "25", "--out", path(&b)]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    // Header line plus one record per entry.
    assert_eq!(bytes.iter().filter(|c| **c == b'\n').count(), 26);
}

#[test]
fn train_writes_each_stage_checkpoint() {
    let f = fixture("cli-fixture");
    for file in ["embedder.ckpt", "vae.ckpt", "diffusion.ckpt"] {
        assert!(f.models.join(file).is_file(), "{file}");
    }
    let out = run(&["train", "diffusion", "--corpus", path(&f.corpus), "--out", path(&f.dir.join("empty-dir"))]);
    assert_eq!(out.status.code(), Some(1), "diffusion needs a trained embedder and VAE");
}

#[test]
fn sampled_references_round_trip_into_generate() {
    let f = fixture("cli-fixture");
    let m = models();
    let refs = f.dir.join("refs.json");
    let out = run_ok(&["sample-action", "--text", TEXT, "--models", &m, "--seeds", "2", "--steps", "3", "--refs-out", path(&refs), "--select", "1,0", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let actions = v["actions"].as_array().unwrap();
    assert_eq!(actions.len(), 2);
    assert!(actions.iter().all(|a| a["candidates"].as_array().unwrap().len() == 2));

    let written: Vec<Value> = serde_json::from_slice(&std::fs::read(&refs).unwrap()).unwrap();
    assert_eq!(written[0], actions[0]["candidates"][1]["latent"]);
    assert_eq!(written[1], actions[1]["candidates"][0]["latent"]);

    let gen = ["generate", "--text", TEXT, "--models", &m, "--steps", "4", "--json"];
    let with_refs = run_ok(&[&gen[..], &["--refs", path(&refs)]].concat()).stdout;
    assert_eq!(with_refs, run_ok(&[&gen[..], &["--refs", path(&refs)]].concat()).stdout);
    assert_ne!(with_refs, run_ok(&gen).stdout);

    let bad = run(&["sample-action", "--text", TEXT, "--models", &m, "--seeds", "2", "--steps", "3", "--refs-out", path(&refs), "--select", "0"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn evaluate_reports_means_with_confidence_intervals() {
    let f = fixture("cli-fixture");
    let out = run_ok(&["evaluate", "--corpus", path(&f.corpus), "--models", &models(), "--repeats", "3", "--steps", "3", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["repeats"], 3);
    for key in ["r_precision_top1", "r_precision_top2", "r_precision_top3", "fid", "mm_dist", "diversity", "multimodality"] {
        let s = &v["generated"][key];
        assert!(s["mean"].is_f64() && s["ci95"].is_f64(), "{key}");
        assert_eq!(s["values"].as_array().unwrap().len(), 3, "{key}");
    }
    assert!(v["ground_truth"]["fid"]["mean"].as_f64().unwrap().abs() < 1e-6);

    let table = run_ok(&["evaluate", "--corpus", path(&f.corpus), "--models", &models(), "--repeats", "2", "--steps", "3"]).stdout;
    let table = String::from_utf8(table).unwrap();
    assert!(table.contains("FID") && table.contains("ground truth"));
}
