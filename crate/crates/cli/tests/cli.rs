use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llpfc_cli::{load_instance, train_config, train_instance, Settings};
use tempfile::TempDir;

fn llpfc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llpfc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Three roughly separable classes in two dimensions.
fn write_dataset(dir: &Path, name: &str, n: usize) -> PathBuf {
    let mut text = String::new();
    for i in 0..n {
        let c = i % 3;
        let jitter = ((i * 7919) % 97) as f64 / 97.0 - 0.5;
        let jitter2 = ((i * 104729) % 89) as f64 / 89.0 - 0.5;
        writeln!(text, "{},{},{c}", 2.0 * c as f64 + jitter, -(c as f64) + jitter2).unwrap();
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn make_bags(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["make-bags", "--dataset", "d.csv", "--out", "bags.jsonl", "--bag-size", "20", "--n-bags", "30", "--seed", "4"];
    args.extend_from_slice(extra);
    llpfc(dir, &args)
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    write_dataset(dir.path(), "d.csv", 900);
    let out = make_bags(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

#[test]
fn malformed_csv_names_the_row() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("d.csv"), "0.1,0.2,0\n0.3,oops,1\n").unwrap();
    let out = make_bags(dir.path(), &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains('2'), "{}", stderr(&out));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = setup();
    let run = |out: &str| {
        let o = llpfc(
            dir.path(),
            &["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", out, "--epochs", "4", "--mode", "approx", "--hidden", "4"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("a");
    run("b");
    for file in ["model.txt", "metrics.jsonl"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let first = fs::read(dir.path().join("bags.jsonl")).unwrap();
    make_bags(dir.path(), &[]);
    assert_eq!(first, fs::read(dir.path().join("bags.jsonl")).unwrap());
}

#[test]
fn outputs_embed_seed_and_config_hash() {
    let dir = setup();
    let bags = fs::read_to_string(dir.path().join("bags.jsonl")).unwrap();
    assert!(bags.lines().next().unwrap().contains("config_hash"));
    let o = llpfc(dir.path(), &["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", "run", "--epochs", "10", "--lr", "0.1", "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let model = fs::read_to_string(dir.path().join("run/model.txt")).unwrap();
    assert!(model.starts_with("# seed 11\n# config-hash "));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["seed"], 11);
    assert!(header["config"]["config_hash"].is_string());
    let e = llpfc(dir.path(), &["eval", "--model", "run/model.txt", "--dataset", "d.csv", "--out", "eval.json"]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.5);
    assert!(report["config_hash"].is_string());
}

#[test]
fn ideal_mode_needs_governing_proportions() {
    let dir = setup();
    let bags = fs::read_to_string(dir.path().join("bags.jsonl")).unwrap();
    let stripped: String = bags
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("gamma_true");
            }
            format!("{v}\n")
        })
        .collect();
    fs::write(dir.path().join("bare.jsonl"), stripped).unwrap();
    let o = llpfc(
        dir.path(),
        &["train", "--dataset", "d.csv", "--bags", "bare.jsonl", "--out", "run", "--mode", "ideal", "--sigma", "0.34,0.33,0.33"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("gamma_true"));
    let o = llpfc(dir.path(), &["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", "run", "--mode", "ideal"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn ideal_mode_without_a_valid_grouping_exits_with_assumption_code() {
    let dir = TempDir::new().unwrap();
    // every bag has the same proportion, so every group matrix is singular
    let mut data = String::new();
    let mut bags = String::from("{\"n_bags\":4,\"C\":2,\"seed\":0}\n");
    for k in 0..4 {
        writeln!(data, "{k}.0,0\n{k}.5,1").unwrap();
        writeln!(
            bags,
            "{{\"bag_id\":{k},\"indices\":[{},{}],\"gamma_hat\":[0.5,0.5],\"gamma_true\":[0.5,0.5]}}",
            2 * k,
            2 * k + 1
        )
        .unwrap();
    }
    fs::write(dir.path().join("d.csv"), data).unwrap();
    fs::write(dir.path().join("bags.jsonl"), bags).unwrap();
    let o = llpfc(
        dir.path(),
        &["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", "run", "--mode", "ideal", "--sigma", "0.5,0.5", "--ideal-retries", "2"],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let dir = TempDir::new().unwrap();
    let o = llpfc(dir.path(), &["verify", "--trials", "100", "--out", "v.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(report["failing"].as_array().unwrap().len(), 0);
    let o = llpfc(dir.path(), &["verify", "--trials", "100", "--out", "bad.json", "--perturb-closed-form", "1e-3"]);
    assert_eq!(code(&o), 5);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bad.json")).unwrap()).unwrap();
    assert_eq!(report["failing"], serde_json::json!(["closed-form-norm"]));
}

#[test]
fn verify_rejects_zero_trials() {
    let dir = TempDir::new().unwrap();
    let o = llpfc(dir.path(), &["verify", "--trials", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "[train]\nseed = 3\n").unwrap();
    fs::write(dir.path().join("typo.cfg"), "[train]\nepochz = 3\n").unwrap();
    for args in [
        vec!["train", "--config", "bad.cfg"],
        vec!["train", "--config", "typo.cfg"],
        vec!["train", "--config", "missing.cfg"],
        vec!["train", "--mode", "psychic"],
        vec!["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", "run", "--epochs", "zero"],
        vec!["train", "--dataset", "d.csv", "--bags", "bags.jsonl", "--out", "run", "--batch-size", "0"],
        vec!["make-bags", "--dataset", "d.csv", "--out", "b.jsonl", "--n-bags", "0"],
    ] {
        let o = llpfc(dir.path(), &args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn flags_override_config_file() {
    let dir = setup();
    fs::write(
        dir.path().join("run.cfg"),
        "[run]\nseed = 5\nout = from-file\n[data]\ndataset = d.csv\nbags = bags.jsonl\n[train]\nepochs = 2\nmode = uniform\n",
    )
    .unwrap();
    let o = llpfc(dir.path(), &["train", "--config", "run.cfg", "--seed", "6", "--out", "from-flag"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!dir.path().join("from-file").exists());
    let model = fs::read_to_string(dir.path().join("from-flag/model.txt")).unwrap();
    assert!(model.starts_with("# seed 6\n"));
}

#[test]
fn missing_bag_file_is_a_data_error() {
    let dir = setup();
    let o = llpfc(dir.path(), &["train", "--dataset", "d.csv", "--bags", "nope.jsonl", "--out", "run"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn training_from_files_reads_no_training_labels() {
    let dir = setup();
    let path = |f: &str| dir.path().join(f).display().to_string();
    for mode in ["uniform", "approx", "ideal"] {
        let mut s = Settings::defaults();
        s.set("dataset", path("d.csv")).unwrap();
        s.set("bags", path("bags.jsonl")).unwrap();
        s.set("mode", mode.into()).unwrap();
        s.set("sigma", "0.3334,0.3333,0.3333".into()).unwrap();
        s.set("epochs", "2".into()).unwrap();
        s.set("ideal-retries", "200".into()).unwrap();
        let cfg = train_config(&s).unwrap();
        let inst = load_instance(&s).unwrap();
        let before = inst.dataset.label_reads();
        match train_instance(&inst, &cfg, None) {
            Ok(_) | Err(llpfc_cli::CliError::Core(llpfc::Error::AssumptionViolation { .. })) => {}
            Err(e) => panic!("{mode}: {e}"),
        }
        assert_eq!(inst.dataset.label_reads(), before, "{mode}");
    }
}
