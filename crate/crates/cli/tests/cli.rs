use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn corpus() -> String {
    fixtures().join("corpus").display().to_string()
}

fn groundst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundst"))
        .args(args)
        .env_remove("GROUNDST_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&groundst(&[])), 1);
    assert_eq!(code(&groundst(&["mine"])), 1);
    assert_eq!(code(&groundst(&["eval", "--corpus", "x", "--backend", "oracle", "--variants", "0..9"])), 1);
    assert_eq!(code(&groundst(&["--help"])), 0);
}

#[test]
fn mine_writes_one_file_per_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mined");
    let o = groundst(&["mine", "--corpus", &corpus(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 22);
    let events: Value = report(&out.join("Events_1.event_name.json"));
    assert_eq!(events.as_array().unwrap().len(), 6);
    let seating: Value = report(&out.join("Buses_1.seating_class.json"));
    assert!(seating.as_array().unwrap().is_empty());
}

#[test]
fn oracle_scores_perfectly_on_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let o = groundst(&[
        "eval", "--corpus", &corpus(), "--variants", "0..5", "--backend", "oracle",
        "--report", path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&path);
    assert_eq!(r["jga_overall"], 100.0);
    assert_eq!(r["ss"], 0.0);
    assert_eq!(r["per_variant_jga"].as_object().unwrap().len(), 6);
    assert!(String::from_utf8_lossy(&o.stdout).contains("JGA overall      100.00"));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let library = fixtures().join("library.json");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = groundst(&[
            "build", "--seed", seed, "--corpus", &corpus(), "--format", "turnslot",
            "--library", library.to_str().unwrap(), "--variants", "0,3", "--prompt-variants", "3",
            "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.jsonl", "11");
    assert_eq!(a, run("b.jsonl", "11"));
    assert_ne!(a, run("c.jsonl", "12"));

    let noisy = |name: &str| {
        let out = dir.path().join(name);
        let o = groundst(&[
            "eval", "--seed", "5", "--corpus", &corpus(), "--variants", "0..5",
            "--backend", "noisy:drop=0.2,corrupt=0.1,flip=0.1", "--report", out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        fs::read(out).unwrap()
    };
    assert_eq!(noisy("n1.json"), noisy("n2.json"));
}

#[test]
fn data_errors_exit_2_and_backend_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&groundst(&["eval", "--corpus", "/no/such/corpus", "--backend", "oracle"])), 2);
    assert_eq!(code(&groundst(&["eval", "--corpus", &corpus(), "--backend", "bogus"])), 2);
    let o = groundst(&["build", "--corpus", &corpus(), "--format", "turn", "--out", "x.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("library"));
    assert_eq!(code(&groundst(&["gpe", "--corpus", &corpus(), "--backend", "oracle"])), 2);

    let report_path = dir.path().join("dead.json");
    let o = groundst(&[
        "eval", "--corpus", &corpus(), "--backend", "cmd:/bin/false",
        "--report", report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    assert_eq!(report(&report_path)["failed"], 129);
    assert_eq!(code(&groundst(&["eval", "--corpus", &corpus(), "--backend", "http://127.0.0.1:9"])), 3);
}

#[test]
fn augmentation_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let lines = |p: &Path| fs::read_to_string(p).unwrap().lines().count();
    let out = dir.path().join("eda.jsonl");
    let schemas = dir.path().join("schemas");
    let o = groundst(&[
        "augment", "--corpus", &corpus(), "--method", "eda", "--k", "3",
        "--out", out.to_str().unwrap(), "--schema-out", schemas.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out), 129 * 4);
    for r in 1..=3 {
        assert!(schemas.join(format!("v{r}/train/schema.json")).exists());
    }

    let cache = fixtures().join("corpus/translation_cache.jsonl");
    let out = dir.path().join("bt.jsonl");
    let o = groundst(&[
        "augment", "--corpus", &corpus(), "--method", "backtranslate",
        "--translation-cache", cache.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out), 129 * 4);

    let out = dir.path().join("merge.jsonl");
    let o = groundst(&["augment", "--corpus", &corpus(), "--method", "sgdx-merge", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(lines(&out), 129 * 6);
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("groundst.toml");
    fs::write(&config, "seed = 3\n[noise]\nslot_drop_p = 1.0\n").unwrap();
    let out = dir.path().join("r.json");
    let o = Command::new(env!("CARGO_BIN_EXE_groundst"))
        .args(["eval", "--corpus", &corpus(), "--backend", "noisy", "--report", out.to_str().unwrap()])
        .env("GROUNDST_CONFIG", &config)
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolved config"));
    let r = report(&out);
    assert!(r["backend"].as_str().unwrap().contains("drop=1"));
    assert!(r["jga_overall"].as_f64().unwrap() < 100.0);

    fs::write(&config, "sede = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_groundst"))
        .args(["eval", "--corpus", &corpus(), "--backend", "oracle"])
        .env("GROUNDST_CONFIG", &config)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn suggest_writes_a_complete_library() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("synonyms.txt");
    fs::write(&syn, "seating_class, price_range\n").unwrap();
    let out = dir.path().join("library.json");
    let o = groundst(&[
        "suggest", "--corpus", &corpus(), "--synonyms", syn.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let library = report(&out);
    assert_eq!(library.as_object().unwrap().len(), 3);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Events_1.event_name"));
}

#[test]
fn prebuilt_datasets_feed_eval_and_gpe() {
    let dir = tempfile::tempdir().unwrap();
    let library = fixtures().join("library.json");
    let data = dir.path().join("ds.jsonl");
    let o = groundst(&[
        "build", "--corpus", &corpus(), "--format", "turn", "--library", library.to_str().unwrap(),
        "--variant", "2", "--prompt-variants", "3", "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let eval_report = dir.path().join("eval.json");
    let o = groundst(&[
        "eval", "--dataset", data.to_str().unwrap(), "--backend", "oracle",
        "--report", eval_report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&eval_report);
    assert_eq!(r["turns_evaluated"], 129 * 3);
    assert_eq!(r["per_variant_jga"]["2"], 100.0);

    let gpe_report = dir.path().join("gpe.json");
    let o = groundst(&[
        "gpe", "--dataset", data.to_str().unwrap(), "--backend", "noisy:drop=0.3",
        "--report", gpe_report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&gpe_report);
    assert_eq!(r["single_pass"]["turns_evaluated"], 129);
    assert_eq!(r["ensembled"]["turns_evaluated"], 129);

    let o = groundst(&["gpe", "--dataset", "x.jsonl", "--corpus", &corpus(), "--backend", "oracle"]);
    assert_eq!(code(&o), 1);
    let d3st = dir.path().join("d3st.jsonl");
    groundst(&["build", "--corpus", &corpus(), "--out", d3st.to_str().unwrap()]);
    assert_eq!(code(&groundst(&["gpe", "--dataset", d3st.to_str().unwrap(), "--backend", "oracle"])), 2);
}
