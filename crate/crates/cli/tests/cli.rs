use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bella");

const TINY: &[&str] = &[
    "--set",
    "data.train_episodes=12",
    "--set",
    "data.test_episodes=4",
    "--set",
    "train.epochs_pretrain=1",
    "--set",
    "train.epochs_finetune=1",
    "--set",
    "model.lm_pretrain_epochs=1",
];

fn bella(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("BELLA_SEED")
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// Exit code and the error line, which must be the only line without the
/// `bella:` log prefix.
fn failure(o: &Output) -> (i32, String) {
    let errs: Vec<String> = stderr(o)
        .lines()
        .filter(|l| !l.starts_with("bella: "))
        .map(String::from)
        .collect();
    assert_eq!(errs.len(), 1, "{errs:?}");
    assert!(errs[0].starts_with("error["), "{}", errs[0]);
    (o.status.code().expect("exit code"), errs[0].clone())
}

#[test]
fn gen_is_byte_identical_and_has_five_descriptions_per_episode() {
    let (t1, t2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for t in [&t1, &t2] {
        ok(&bella(t.path(), &["gen", "--seed", "7", "--episodes", "50"]));
    }
    for f in [
        "scenes.jsonl",
        "pretrain.jsonl",
        "qa.jsonl",
        "vocab.json",
        "config.json",
    ] {
        let a = fs::read(t1.path().join("data").join(f)).unwrap();
        let b = fs::read(t2.path().join("data").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let pre = fs::read_to_string(t1.path().join("data/pretrain.jsonl")).unwrap();
    assert_eq!(pre.lines().count(), 250);
}

#[test]
fn gen_seed_changes_output() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(
        t.path(),
        &["gen", "--seed", "1", "--episodes", "3", "--out", "a"],
    ));
    ok(&bella(
        t.path(),
        &["gen", "--seed", "2", "--episodes", "3", "--out", "b"],
    ));
    assert_ne!(
        fs::read(t.path().join("a/scenes.jsonl")).unwrap(),
        fs::read(t.path().join("b/scenes.jsonl")).unwrap()
    );
}

#[test]
fn zero_episodes_gives_empty_well_formed_files() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(t.path(), &["gen", "--episodes", "0", "--out", "d"]));
    let d = t.path().join("d");
    for f in ["scenes.jsonl", "pretrain.jsonl", "qa.jsonl"] {
        assert_eq!(fs::read_to_string(d.join(f)).unwrap(), "", "{f}");
    }
    let data = bella_core::dataset::Dataset::read(&d).unwrap();
    assert!(data.episodes.is_empty());
    assert_eq!(data.vocab, bella_core::langdata::Vocab::canonical());
}

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(t.path(), &["gen", "--episodes", "2", "--out", "d"]));
    let before = fs::read(t.path().join("d/scenes.jsonl")).unwrap();
    let (code, line) = failure(&bella(t.path(), &["gen", "--episodes", "3", "--out", "d"]));
    assert_eq!(code, 1);
    assert!(line.contains("--force"), "{line}");
    assert_eq!(fs::read(t.path().join("d/scenes.jsonl")).unwrap(), before);
    ok(&bella(t.path(), &["gen", "--episodes", "3", "--out", "d", "--force"]));
    assert_eq!(
        fs::read_to_string(t.path().join("d/scenes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn schema_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let (code, line) = failure(&bella(t.path(), &["--set", "train.sede=1", "gen"]));
    assert_eq!(code, 2);
    assert!(line.contains("train.sede"), "{line}");

    fs::write(t.path().join("bad.json"), r#"{"train": {"epochs": 3}}"#).unwrap();
    let (code, _) = failure(&bella(t.path(), &["--config", "bad.json", "gen"]));
    assert_eq!(code, 2);

    let (code, _) = failure(&bella(t.path(), &["--set", "train.batch_size=0", "gen"]));
    assert_eq!(code, 2);

    let o = Command::new(BIN)
        .args(["gen", "--out", "x"])
        .current_dir(t.path())
        .env("BELLA_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(failure(&o).0, 2);
}

#[test]
fn missing_checkpoints_exit_3() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(t.path(), &with_tiny(&["gen"])));
    let (code, _) = failure(&bella(t.path(), &with_tiny(&["finetune", "--from", "none.bin"])));
    assert_eq!(code, 3);
    let (code, _) = failure(&bella(t.path(), &with_tiny(&["finetune"])));
    assert_eq!(code, 3);
    let (code, _) = failure(&bella(t.path(), &with_tiny(&["eval", "--checkpoint", "none.bin"])));
    assert_eq!(code, 3);
    fs::write(
        t.path().join("scene.json"),
        r#"{"frame_index":0,"ego_speed":0.0,"actors":[]}"#,
    )
    .unwrap();
    let (code, _) = failure(&bella(
        t.path(),
        &[
            "ask",
            "--checkpoint",
            "none.bin",
            "--scene",
            "scene.json",
            "--question",
            "is there a car",
        ],
    ));
    assert_eq!(code, 3);
}

#[test]
fn runtime_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let (code, line) = failure(&bella(t.path(), &with_tiny(&["pretrain"])));
    assert_eq!(code, 1);
    assert!(line.contains("bella gen"), "{line}");

    // corpus generated under other data settings
    ok(&bella(t.path(), &["gen", "--episodes", "3"]));
    let (code, line) = failure(&bella(t.path(), &with_tiny(&["pretrain"])));
    assert_eq!(code, 1);
    assert!(line.contains("data settings"), "{line}");
}

#[test]
fn oracle_predictions_score_100() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(t.path(), &["gen", "--episodes", "50"]));
    let args = ["--set", "data.train_episodes=50", "--set", "data.test_episodes=0"];
    let mut a = args.to_vec();
    a.extend(["eval", "--oracle", "--split", "all", "--out", "oracle"]);
    ok(&bella(t.path(), &a));
    let mut a = args.to_vec();
    a.extend(["eval", "--predictions", "oracle/predictions.jsonl", "--out", "scored"]);
    let o = bella(t.path(), &a);
    ok(&o);
    assert!(stdout(&o).contains("overall accuracy 100.0"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("scored/report.json")).unwrap()).unwrap();
    let cats = report["accuracy"]["per_category"].as_object().unwrap();
    assert_eq!(cats.len(), 6);
    for (c, v) in cats {
        assert_eq!(v["accuracy"].as_f64(), Some(100.0), "{c}");
    }
    for f in ["config.json", "predictions.jsonl", "report.json", "tables.txt"] {
        assert!(t.path().join("scored").join(f).exists(), "{f}");
    }
}

#[test]
fn help_lists_every_config_key_with_default() {
    let t = tempfile::tempdir().unwrap();
    let o = bella(t.path(), &["--help"]);
    ok(&o);
    let help = stdout(&o);
    let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt")).unwrap();
    assert_eq!(
        help, golden,
        "help text changed; update tests/golden/help.txt if intended"
    );
    for (key, default) in bella_core::config::RunConfig::default_keys() {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key.as_str()))
            .unwrap_or_else(|| panic!("{key} missing from help"));
        assert!(line.trim_end().ends_with(&default), "{line} vs {default}");
    }
}

#[test]
fn seed_env_and_flags_are_logged() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["gen", "--episodes", "2", "--out", "d"])
        .current_dir(t.path())
        .env("BELLA_SEED", "11")
        .output()
        .unwrap();
    ok(&o);
    let err = stderr(&o);
    assert!(err.contains("data.seed: 7 -> 11 (BELLA_SEED)"), "{err}");
    assert!(err.contains("data.train_episodes: 200 -> 2 (flag)"), "{err}");
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("d/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["data"]["seed"], 11);
}

#[test]
fn training_pipeline_is_reproducible_and_stamped() {
    let t = tempfile::tempdir().unwrap();
    ok(&bella(t.path(), &with_tiny(&["gen"])));
    for run in ["1", "2"] {
        ok(&bella(t.path(), &with_tiny(&["pretrain", "--out", &format!("p{run}")])));
        ok(&bella(
            t.path(),
            &with_tiny(&[
                "finetune",
                "--from",
                &format!("p{run}/checkpoint.bin"),
                "--out",
                &format!("f{run}"),
            ]),
        ));
    }
    for stage in ["p", "f"] {
        let a = fs::read(t.path().join(format!("{stage}1/checkpoint.bin"))).unwrap();
        let b = fs::read(t.path().join(format!("{stage}2/checkpoint.bin"))).unwrap();
        assert!(a == b, "{stage} checkpoints differ");
    }
    let (code, _) = failure(&bella(t.path(), &with_tiny(&["pretrain", "--out", "p1"])));
    assert_eq!(code, 1);

    // default output goes to a fresh stamped directory each time
    ok(&bella(t.path(), &with_tiny(&["pretrain"])));
    ok(&bella(t.path(), &with_tiny(&["pretrain"])));
    let runs: Vec<_> = fs::read_dir(t.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 2);
    for r in runs {
        let r = r.unwrap().path();
        assert!(r.file_name().unwrap().to_str().unwrap().starts_with("pretrain-"));
        assert!(r.join("config.json").exists() && r.join("checkpoint.bin").exists());
    }

    let o = bella(
        t.path(),
        &with_tiny(&["eval", "--checkpoint", "f1/checkpoint.bin", "--out", "e"]),
    );
    ok(&o);
    assert!(stdout(&o).contains("Overall"));

    let data = bella_core::dataset::Dataset::read(&t.path().join("data")).unwrap();
    fs::write(
        t.path().join("scene.json"),
        serde_json::to_string(&data.episodes[0].scenes[0]).unwrap(),
    )
    .unwrap();
    let o = bella(
        t.path(),
        &with_tiny(&[
            "ask",
            "--checkpoint",
            "f1/checkpoint.bin",
            "--scene",
            "scene.json",
            "--question",
            "how many cars are there",
        ]),
    );
    ok(&o);
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn gradcheck_reports_every_operator() {
    let t = tempfile::tempdir().unwrap();
    let o = bella(t.path(), &["gradcheck", "--seeds", "10"]);
    ok(&o);
    let out = stdout(&o);
    for op in [
        "linear",
        "conv2d_s2",
        "attention",
        "cross_entropy",
        "composite/linear",
        "composite/deep_conv",
    ] {
        assert!(out.lines().any(|l| l.starts_with(op)), "{op} missing:\n{out}");
    }
}
