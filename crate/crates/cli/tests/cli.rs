use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tscan(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tscan"));
    cmd.args(args)
        .env_remove("TSCAN_DATA_DIR")
        .env_remove("RUST_LOG");
    if let Some(r) = root {
        cmd.env("TSCAN_DATA_DIR", r);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str], root: Option<&Path>) -> Output {
    let out = tscan(args, root);
    assert!(
        out.status.success(),
        "tscan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(
        &["synth", "--seed", "7", "--patients", "50", "--out", p(&a)],
        None,
    );
    ok(
        &["synth", "--seed", "7", "--patients", "50", "--out", p(&b)],
        None,
    );
    let (ta, tb) = (tree(&a), tree(&b));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "dictionary.json",
            "events.csv",
            "phenotypes.csv",
            "run.json",
            "stays.csv"
        ]
    );
    assert_eq!(ta, tb);
    let run: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 7);
    assert_eq!(run["config"]["patients"], 50);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_patients_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tscan(
        &[
            "synth",
            "--patients",
            "0",
            "--out",
            p(&tmp.path().join("x")),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("raw");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let r = tscan(&["synth", "--patients", "3", "--out", p(&out)], None);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--force"));
    assert!(out.join("keep.txt").exists());
    ok(
        &["synth", "--patients", "3", "--out", p(&out), "--force"],
        None,
    );
    assert!(!out.join("keep.txt").exists() && out.join("stays.csv").exists());
    // No staging directories are left behind.
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn missing_paths_without_data_root_are_reported() {
    let r = tscan(&["synth", "--patients", "3"], None);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("TSCAN_DATA_DIR"));
}

const STAYS_HEADER: &str =
    "subject_id,hadm_id,icustay_id,age,intime,outtime,transfers,mortality,deathtime\n";
const EVENTS_HEADER: &str = "subject_id,hadm_id,icustay_id,charttime,variable,value\n";

/// Two stays: 40 h (id 301) and 60 h (id 302), each with a few readings.
fn write_fixture(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("stays.csv"),
        format!(
            "{STAYS_HEADER}\
             1,101,301,60,2020-01-01T00:00:00Z,2020-01-02T16:00:00Z,0,0,\n\
             2,102,302,70,2020-01-01T00:00:00Z,2020-01-03T12:00:00Z,0,1,2020-01-03T12:00:00Z\n"
        ),
    )
    .unwrap();
    fs::write(
        dir.join("events.csv"),
        format!(
            "{EVENTS_HEADER}\
             1,101,301,2020-01-01T01:00:00Z,Heart Rate,80\n\
             1,101,301,2020-01-01T05:30:00Z,Glascow coma scale eye opening,4\n\
             2,102,302,2020-01-01T02:00:00Z,Heart Rate,110\n\
             2,102,302,2020-01-02T02:00:00Z,Temperature,38.5\n"
        ),
    )
    .unwrap();
}

#[test]
fn prepare_ihm_excludes_stays_under_48_hours() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(&tmp.path().join("raw"));
    ok(&["prepare", "--task", "ihm"], Some(tmp.path()));
    let prepared = tmp.path().join("prepared");
    let rows = read_csv(&prepared.join("samples.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "302");
    assert_eq!(rows[0][3], "48");
    assert_eq!(rows[0][4], "1");

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(prepared.join("prepared.json")).unwrap()).unwrap();
    let stages = manifest["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    for s in stages {
        let dropped: u64 = s["dropped"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(
            s["kept"].as_u64().unwrap() + dropped,
            s["input"].as_u64().unwrap(),
            "{s}"
        );
    }
    assert_eq!(stages[3]["dropped"]["no_samples"], 1);
    assert_eq!(manifest["samples"]["total"], 1);
}

#[test]
fn prepare_los_clock_runs_every_12_hours_from_hour_4() {
    let tmp = tempfile::tempdir().unwrap();
    write_fixture(&tmp.path().join("raw"));
    ok(&["prepare", "--task", "los"], Some(tmp.path()));
    let rows = read_csv(&tmp.path().join("prepared/samples.csv"));
    let hours_302: Vec<&str> = rows
        .iter()
        .filter(|r| r[0] == "302")
        .map(|r| r[3].as_str())
        .collect();
    assert_eq!(hours_302, ["4", "16", "28", "40", "52"]);
    let hours_301: Vec<&str> = rows
        .iter()
        .filter(|r| r[0] == "301")
        .map(|r| r[3].as_str())
        .collect();
    assert_eq!(hours_301, ["4", "16", "28"]);
    // 60 h stay at hour 4: 56 h remain, bucket 2.
    let first = rows.iter().find(|r| r[0] == "302").unwrap();
    assert_eq!((first[4].as_str(), first[5].as_str()), ("2", "56"));
}

#[test]
fn prepare_reports_the_offending_row() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_fixture(&raw);
    let mut events = fs::read_to_string(raw.join("events.csv")).unwrap();
    events.push_str("2,102,302,not-a-time,Heart Rate,90\n");
    fs::write(raw.join("events.csv"), events).unwrap();
    let r = tscan(&["prepare", "--task", "ihm"], Some(tmp.path()));
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("row 5"), "{err}");
    assert!(!tmp.path().join("prepared").exists());

    write_fixture(&raw);
    let mut events = fs::read_to_string(raw.join("events.csv")).unwrap();
    events.push_str("2,102,302,2020-01-01T03:00:00Z,Heart Rhythm,90\n");
    fs::write(raw.join("events.csv"), events).unwrap();
    let r = tscan(&["prepare", "--task", "ihm"], Some(tmp.path()));
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("Heart Rhythm"));
}

const TOY: &[&str] = &[
    "--d-model",
    "8",
    "--heads",
    "2",
    "--d-ff",
    "16",
    "--dropout",
    "0",
    "--batch-size",
    "8",
];

#[test]
fn train_eval_explain_on_a_toy_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = Some(tmp.path());
    ok(&["synth", "--seed", "3", "--patients", "40"], root);
    ok(&["prepare", "--task", "ihm"], root);
    let mut args = vec![
        "train",
        "--epochs",
        "40",
        "--patience",
        "40",
        "--lr",
        "0.01",
        "--seed",
        "2",
    ];
    args.extend_from_slice(TOY);
    ok(&args, root);
    let run = tmp.path().join("runs/train");
    for f in [
        "model.ckpt",
        "model.ckpt.json",
        "train_log.csv",
        "experiment.json",
        "run.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    // The overfit model separates its own training set.
    let out = ok(&["eval", "--split", "train"], root);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let auc = result["metrics"]["auc_roc"].as_f64().unwrap();
    assert!(auc >= 0.99, "train AUC {auc}");
    assert!(run.join("eval-train/eval.json").is_file());

    ok(&["explain", "--split", "train"], root);
    let explain = tmp.path().join("runs/explain");
    for j in 0..4 {
        let rows = read_csv(&explain.join(format!("temporal_chunk_{j}.csv")));
        assert_eq!(rows.len(), 12);
        let total: f64 = rows.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    assert!(!explain.join("temporal_chunk_4.csv").exists());
    let ind = read_csv(&explain.join("indicators.csv"));
    assert_eq!(ind.len(), 49);
    let total: f64 = ind.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    // A dataset with a different window does not fit the checkpoint.
    ok(
        &[
            "prepare",
            "--task",
            "ihm",
            "--t",
            "24",
            "--out",
            p(&tmp.path().join("short")),
        ],
        root,
    );
    let r = tscan(
        &[
            "eval",
            "--data",
            p(&tmp.path().join("short")),
            "--out",
            p(&tmp.path().join("e")),
        ],
        root,
    );
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("mismatch"));

    // Same configuration, same bytes.
    let again = tmp.path().join("again");
    let mut args2 = args.clone();
    args2.extend_from_slice(&["--out", p(&again)]);
    ok(&args2, root);
    for f in [
        "model.ckpt",
        "model.ckpt.json",
        "train_log.csv",
        "eval_val.json",
    ] {
        assert!(
            fs::read(run.join(f)).unwrap() == fs::read(again.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let hash = |dir: &Path| {
        let v: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("run.json")).unwrap()).unwrap();
        v["config_hash"].clone()
    };
    assert_eq!(hash(&run), hash(&again));
}

#[test]
fn ablate_emits_six_rows_and_compare_tabulates() {
    let tmp = tempfile::tempdir().unwrap();
    let root = Some(tmp.path());
    ok(&["synth", "--seed", "4", "--patients", "30"], root);
    ok(&["prepare", "--task", "ihm"], root);
    let mut args = vec!["ablate", "--epochs", "1"];
    args.extend_from_slice(TOY);
    ok(&args, root);
    let dir = tmp.path().join("runs/ablate");
    let rows = read_csv(&dir.join("ablation.csv"));
    let fusions: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        fusions,
        [
            "temporal-only",
            "spatial-only",
            "concatenate",
            "adding",
            "bilinear",
            "max-pool"
        ]
    );
    assert_eq!(fs::read_dir(dir.join("logs")).unwrap().count(), 6);

    ok(&["baseline", "--split", "train"], root);
    let base = tmp.path().join("runs/baseline/eval.json");
    let mut args = vec!["train", "--epochs", "1"];
    args.extend_from_slice(TOY);
    ok(&args, root);
    ok(&["eval", "--split", "train"], root);
    let cmp = tmp.path().join("cmp");
    let tscan_eval = tmp.path().join("runs/train/eval-train/eval.json");
    ok(
        &[
            "compare",
            &format!("baseline={}", p(&base)),
            &format!("tscan={}", p(&tscan_eval)),
            "--out",
            p(&cmp),
        ],
        None,
    );
    let text = fs::read_to_string(cmp.join("compare.csv")).unwrap();
    assert!(text.starts_with("metric,baseline,tscan\n"), "{text}");
    assert!(text.contains("\nauc_roc,"));
}

#[test]
fn experiment_file_drives_training() {
    let tmp = tempfile::tempdir().unwrap();
    let root = Some(tmp.path());
    ok(&["synth", "--seed", "5", "--patients", "20"], root);
    ok(&["prepare", "--task", "ihm", "--split-seed", "3"], root);
    let data = tmp.path().join("prepared");
    let out = tmp.path().join("exp-run");
    let spec = serde_json::json!({
        "data_dir": data,
        "out_dir": out,
        "task": "ihm",
        "split_seed": 3,
        "model": {
            "t": 48, "d": 49, "n": 2, "fusion": "adding", "task": "ihm", "n_classes": 2,
            "layer": {"d_model": 8, "n_heads": 2, "d_ff": 16, "dropout_rate": 0.0}
        },
        "train": {"epochs": 1, "batch_size": 4}
    });
    let spec_path = tmp.path().join("exp.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    ok(&["train", "--experiment", p(&spec_path)], None);
    let written: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(written["model"]["fusion"], "adding");
    assert_eq!(written["model"]["n"], 2);

    // A split seed that disagrees with the dataset is rejected.
    let mut bad = spec.clone();
    bad["split_seed"] = 4.into();
    bad["out_dir"] = serde_json::json!(tmp.path().join("bad"));
    fs::write(&spec_path, bad.to_string()).unwrap();
    let r = tscan(&["train", "--experiment", p(&spec_path)], None);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("split seed"));
    assert!(!tmp.path().join("bad").exists());
}
