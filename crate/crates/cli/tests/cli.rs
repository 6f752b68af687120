use std::path::Path;
use std::process::{Command, Output};

fn lossforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lossforge"))
        .args(args)
        .current_dir(dir)
        .env_remove("LOSSFORGE_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
}

const SMALL: &str = "synth:30,20,2,0.05";

#[test]
fn check_reports_pass_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("zoo.txt"), "# baselines\nmse\n(neg (sq (add yhat (neg y))))\n").unwrap();
    let o = lossforge(dir.path(), &["check", "zoo.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert!(lines[0].ends_with("pass=true"), "{lines:?}");
    assert!(lines[1].ends_with("pass=false"), "{lines:?}");
    assert_eq!(lines[2], "checked=2 passed=1");
}

#[test]
fn check_maxr_at_finest_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("l.txt"), "maxr\n").unwrap();
    let o = lossforge(dir.path(), &["check", "l.txt", "--epsilon", "1e-6"]);
    let out = stdout(&o);
    let rate: f64 = out.split("rate=").nth(1).unwrap()[..6].parse().unwrap();
    assert!(rate >= 0.99, "{out}");
}

#[test]
fn check_empty_file_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.txt"), "").unwrap();
    let o = lossforge(dir.path(), &["check", "empty.txt"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "checked=0 passed=0\n");
}

#[test]
fn missing_dataset_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = lossforge(dir.path(), &["train", "--loss", "mse", "--dataset", "nowhere.data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));
    let o = lossforge(dir.path(), &["search"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--dataset"));
}

#[test]
fn unknown_zoo_name_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = lossforge(dir.path(), &["train", "--loss", "cosine", "--dataset", SMALL]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["mse", "bce", "hinge", "focal", "maxr", "sumr", "logmin"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_file_rejects_unknown_keys_and_bad_values() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.cfg"), "learning_rate=0.1\n").unwrap();
    let o = lossforge(dir.path(), &["--config", "a.cfg", "search", "--dataset", SMALL]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
    let o = lossforge(dir.path(), &["search", "--dataset", SMALL, "--eta", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));
}

#[test]
fn expression_and_zoo_name_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("short.cfg"), "max_epochs=15\n").unwrap();
    let run = |loss: &str, out: &str| {
        let o = lossforge(
            dir.path(),
            &["--config", "short.cfg", "train", "--loss", loss, "--dataset", SMALL, "--seed", "3", "--out", out],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run("mse", "a");
    let b = run("(sq (add yhat (neg y)))", "b");
    for key in ["val_auc", "val_rmse", "test_auc", "test_f1", "test_accuracy", "best_epoch"] {
        assert_eq!(value(&a, key), value(&b, key), "{key}");
        assert!(value(&a, key).is_some(), "{key} missing in {a}");
    }
    assert!(dir.path().join("a/model.ckpt").exists());
    assert!(dir.path().join("a/config.txt").exists());
}

#[test]
fn search_is_reproducible_from_its_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("budget.cfg"),
        "max_samples=150\nmax_epochs=10\nreward_metric=rmse\nnegative_reward=-0.2\nsearch_epsilon=0.1\n",
    )
    .unwrap();
    let first = lossforge(
        dir.path(),
        &["--config", "budget.cfg", "search", "--dataset", SMALL, "--seed", "2", "--out", "one"],
    );
    let code = first.status.code();
    assert!(code == Some(0) || code == Some(3), "{}", stderr(&first));
    for file in ["config.txt", "ledger.jsonl", "run_log.jsonl", "controller.ckpt", "search_model.ckpt"] {
        assert!(dir.path().join("one").join(file).exists(), "{file}");
    }
    let again = lossforge(dir.path(), &["--config", "one/config.txt", "search", "--out", "two"]);
    assert_eq!(again.status.code(), code);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("one/ledger.jsonl"), read("two/ledger.jsonl"));
    assert_eq!(read("one/run_log.jsonl"), read("two/run_log.jsonl"));
    assert_eq!(read("one/controller.ckpt"), read("two/controller.ckpt"));
}

#[test]
fn exhausted_search_exits_with_no_candidate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), "max_samples=1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lossforge"))
        .args(["--config", "tiny.cfg", "search", "--dataset", SMALL])
        .current_dir(dir.path())
        .env("LOSSFORGE_OUT", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "status"), Some("no_candidate"));
    assert!(stderr(&o).contains("no candidate"));
    assert!(dir.path().join("env-out/ledger.jsonl").exists());
}
