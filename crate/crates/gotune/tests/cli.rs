use std::fs;
use std::path::Path;
use std::process::Command;

use gotune::checkpoint::Checkpoint;
use gotune::formats::{load_datastore, read_jsonl};
use gotune_core::{MinedExample, NeighborSet, Prediction, Report};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("gotune").chain(args.iter().copied());
    let code = gotune::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const TSV: &str = "positive\t3\t0\t0\nnegative\t-3\t0\t0\ngood\t2\t0.1\t0\nbad\t-2\t0.1\t0\nfine\t0.5\t0\t1\n\
the\t0\t1\t0\nfood\t0\t0.5\t0.5\nwas\t0\t0\t0.3\ntasty\t0.1\t0.2\t0\ncold\t-0.1\t0.2\t0\nreview\t0\t0.1\t0.1\nis\t0\t0.3\t0\n\
sentiment\t0\t0\t0.2\nof\t0.05\t0\t0\n.\t0\t0.01\t0\n";

const TASK: &str = r#"{"name":"sentiment","template":"Sentiment of the review [input] is [label]","seed_labels":["positive","negative"]}"#;

fn toy(dir: &Path) {
    fs::write(dir.join("emb.tsv"), TSV).unwrap();
    fs::write(dir.join("task.json"), TASK).unwrap();
    fs::create_dir_all(dir.join("corpus")).unwrap();
    fs::write(dir.join("corpus/a.txt"), "the food was tasty and good. the food was cold and bad.\nthe food was fine .\n").unwrap();
    fs::write(dir.join("corpus/b.txt"), "good food was tasty. bad food was cold!\nthe positive food was tasty.\n").unwrap();
    fs::write(
        dir.join("eval.jsonl"),
        "{\"inputs\":{\"input\":\"the food was tasty\"},\"gold\":\"positive\"}\n{\"inputs\":{\"input\":\"the food was cold\"},\"gold\":\"negative\"}\n",
    )
    .unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["build-datastore", "neighbors", "mine", "train", "train-mgo", "eval", "report", "pipeline"] {
        assert!(out.contains(sub), "{sub} missing from help");
    }
    assert_eq!(run(&["--version"]).0, 0);
    let (code, out, _) = run(&["mine", "--help"]);
    assert_eq!(code, 0);
    for flag in ["--corpus", "--neighbors", "--cap", "--out", "--policy", "--workers"] {
        assert!(out.contains(flag), "{flag} missing from mine help");
    }
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, err) = run(&["neighbors", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["build-datastore", "--tsv", "a", "--goemb", "b", "--out", "c"]).0, 1);
    assert_eq!(run(&["train", "--mode", "fast", "--data", "x", "--out", "y"]).0, 1);
}

#[test]
fn data_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let missing = p(dir.path(), "missing.tsv");
    let (code, _, err) = run(&["build-datastore", "--tsv", &missing, "--out", &p(dir.path(), "x.goemb")]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.tsv"), "{err}");

    fs::write(dir.path().join("bad.tsv"), "a\t1\t2\nb\t1\n").unwrap();
    let (code, _, err) = run(&["build-datastore", "--tsv", &p(dir.path(), "bad.tsv"), "--out", &p(dir.path(), "x.goemb")]);
    assert_eq!(code, 2);
    assert!(err.contains("bad.tsv") && err.contains("line 2"), "{err}");

    run(&["build-datastore", "--tsv", &p(dir.path(), "emb.tsv"), "--out", &p(dir.path(), "ds.goemb")]);
    fs::write(dir.path().join("bad_task.json"), r#"{"name":"x","template":"no slot","seed_labels":["a","b"]}"#).unwrap();
    let (code, _, err) = run(&[
        "neighbors", "--datastore", &p(dir.path(), "ds.goemb"), "--task", &p(dir.path(), "bad_task.json"),
        "--k", "2", "--out", &p(dir.path(), "n.json"),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("bad_task.json"), "{err}");

    let (code, _, err) = run(&[
        "mine", "--corpus", &p(dir.path(), "nowhere/*.txt"), "--neighbors", &p(dir.path(), "n.json"), "--out",
        &p(dir.path(), "m.jsonl"),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("n.json"), "{err}");
}

#[test]
fn write_failures_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    // The output's parent is a regular file.
    let (code, _, err) = run(&["build-datastore", "--tsv", &p(dir.path(), "emb.tsv"), "--out", &p(dir.path(), "task.json/x")]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn neighbors_table_matches_query() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let ds_path = p(dir.path(), "ds.goemb");
    assert_eq!(run(&["build-datastore", "--tsv", &p(dir.path(), "emb.tsv"), "--out", &ds_path]).0, 0);
    let (code, out, _) = run(&[
        "neighbors", "--datastore", &ds_path, "--task", &p(dir.path(), "task.json"), "--k", "4", "--out",
        &p(dir.path(), "n.json"),
    ]);
    assert_eq!(code, 0);
    let ds = load_datastore(Path::new(&ds_path)).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    let expected = ds.query_neighbors("positive", 4).unwrap();
    assert_eq!(lines[0], "positive");
    for (i, (tok, score)) in expected.iter().enumerate() {
        let fields: Vec<&str> = lines[1 + i].split_whitespace().collect();
        assert_eq!(fields, vec![(i + 1).to_string().as_str(), tok.as_str(), format!("{score:.6}").as_str()]);
    }
    assert_eq!(expected[0].0, "positive");
    assert_eq!(expected[1].0, "good");
    let set = NeighborSet::from_json(&fs::read_to_string(dir.path().join("n.json")).unwrap()).unwrap();
    assert!(set.contains("good") && set.contains("bad"));
}

#[test]
fn closed_loop_artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let ds = p(d, "ds.goemb");
    assert_eq!(run(&["build-datastore", "--tsv", &p(d, "emb.tsv"), "--out", &ds]).0, 0);
    let copy = p(d, "copy.goemb");
    assert_eq!(run(&["build-datastore", "--goemb", &ds, "--out", &copy]).0, 0);
    assert_eq!(fs::read(&ds).unwrap(), fs::read(&copy).unwrap());
    let nb = p(d, "n.json");
    assert_eq!(run(&["neighbors", "--datastore", &ds, "--task", &p(d, "task.json"), "--k", "3", "--out", &nb]).0, 0);
    let mined = p(d, "mined.jsonl");
    let (code, _, err) = run(&[
        "mine", "--corpus", &p(d, "corpus/*.txt"), "--neighbors", &nb, "--cap", "50", "--min-tokens", "3", "--out",
        &mined, "--stats", &p(d, "stats.json"), "--workers", "2",
    ]);
    assert_eq!(code, 0, "{err}");
    let examples: Vec<MinedExample> = read_jsonl(Path::new(&mined)).unwrap();
    assert!(!examples.is_empty());
    fs::write(d.join("train.toml"), "epochs = 3\nbatch_size = 2\n").unwrap();
    let ck = p(d, "ck");
    let (code, _, err) = run(&[
        "train", "--mode", "go", "--data", &mined, "--neighbors", &nb, "--config", &p(d, "train.toml"), "--seed", "3",
        "--datastore", &ds, "--out", &ck,
    ]);
    assert_eq!(code, 0, "{err}");
    let ckpt = Checkpoint::load(Path::new(&ck)).unwrap();
    assert_eq!(ckpt.history.len(), 3);
    assert!(!ckpt.weights.is_empty());
    let report = p(d, "r1.tsv");
    let preds = p(d, "preds.jsonl");
    let (code, out, err) = run(&[
        "eval", "--checkpoint", &ck, "--task", &p(d, "task.json"), "--data", &p(d, "eval.jsonl"), "--report", &report,
        "--predictions", &preds,
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("sentiment\t"));
    let r = Report::parse_tsv(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!((r.rows[0].n, r.seed), (2, 3));
    let p2: Vec<Prediction> = read_jsonl(Path::new(&preds)).unwrap();
    assert_eq!(p2.len(), 2);

    // A second eval of the same checkpoint is byte-identical.
    let again = p(d, "r2.tsv");
    run(&["eval", "--checkpoint", &ck, "--task", &p(d, "task.json"), "--data", &p(d, "eval.jsonl"), "--report", &again]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());
    let (code, out, _) = run(&["report", "--reports", &p(d, "r*.tsv")]);
    assert_eq!(code, 0);
    let merged = Report::parse_tsv(&out).unwrap();
    assert_eq!(merged.rows.len(), 2);

    // Retraining from the checkpoint is accepted as an init.
    let (code, _, err) = run(&["train", "--mode", "sda", "--data", &mined, "--init", &ck, "--out", &p(d, "ck2")]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn sda_and_go_agree_on_seed_only_sets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy(d);
    let ds = p(d, "ds.goemb");
    run(&["build-datastore", "--tsv", &p(d, "emb.tsv"), "--out", &ds]);
    let nb = p(d, "n.json");
    // k = 1 keeps only the seeds themselves.
    assert_eq!(run(&["neighbors", "--datastore", &ds, "--task", &p(d, "task.json"), "--k", "1", "--out", &nb]).0, 0);
    let mined = p(d, "mined.jsonl");
    assert_eq!(run(&["mine", "--corpus", &p(d, "corpus/*.txt"), "--neighbors", &nb, "--min-tokens", "1", "--out", &mined]).0, 0);
    let base = ["--data", &mined, "--seed", "5", "--datastore", &ds];
    let sda = p(d, "sda");
    let go = p(d, "go");
    let mut a = vec!["train", "--mode", "sda", "--out", &sda];
    a.extend(base);
    let mut b = vec!["train", "--mode", "go", "--neighbors", &nb, "--out", &go];
    b.extend(base);
    assert_eq!(run(&a).0, 0);
    assert_eq!(run(&b).0, 0);
    for f in ["model.gomlm", "train_log.tsv"] {
        assert_eq!(fs::read(Path::new(&sda).join(f)).unwrap(), fs::read(Path::new(&go).join(f)).unwrap(), "{f}");
    }
    let (a, b) = (Checkpoint::load(Path::new(&sda)).unwrap(), Checkpoint::load(Path::new(&go)).unwrap());
    assert_eq!((a.weights.len(), b.weights.len()), (0, 0));
    assert_eq!(a.seed, b.seed);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_gotune");
    let status = Command::new(bin).arg("--nope").output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));
    let status = Command::new(bin).args(["pipeline", "--config", "/nonexistent/pipeline.toml"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("/nonexistent/pipeline.toml"));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
}
