mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::workspace::tiny;

fn avlex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avlex"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = avlex(&["train", "--config", "nope.conf"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.conf"));
}

#[test]
fn unknown_key_and_bad_values_are_config_errors() {
    let ws = tiny();
    let typo = ws.variant("typo", "learning_rate = 0.1");
    let o = avlex(&["train", "--config", typo.to_str().unwrap()], ws.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
    let bad = ws.variant("bad", "epochs = many");
    assert_eq!(code(&avlex(&["train", "--config", bad.to_str().unwrap()], ws.path())), 2);
    let o = avlex(&["report", "--config", "run.conf", "--format", "xml"], ws.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn grounding_before_training_names_the_checkpoint() {
    let ws = tiny();
    let o = avlex(&["ground", "--config", "run.conf"], ws.path());
    assert_eq!(code(&o), 3);
    let expected = Path::new("run").join(avlex::pipeline::CHECKPOINT);
    assert!(stderr(&o).contains(&expected.display().to_string()), "{}", stderr(&o));
}

#[test]
fn corrupted_features_are_data_errors() {
    let ws = tiny();
    let path = ws.path().join("corpus/features.avtc");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let o = avlex(&["train", "--config", "run.conf"], ws.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("images"), "{}", stderr(&o));
}

#[test]
fn infeasible_synth_spec_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.conf"), "template_max = 120\n").unwrap();
    assert_eq!(code(&avlex(&["synth", "--spec", "s.conf"], dir.path())), 2);
}

#[test]
fn synth_then_every_stage_then_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.conf"),
        "vocab = 3\nwords_max = 2\ntrain_pairs = 30\ntest_pairs = 10\nfeature_dim = 64\nimage_width = 120\nimage_height = 100\nseed = 4\nout_dir = corpus\n",
    )
    .unwrap();
    let o = avlex(&["synth", "--spec", "s.conf"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(
        dir.path().join("run.conf"),
        format!("{}work_dir = run\n", common::workspace::RUN_CONFIG.replace("k = 6", "k = 4")),
    )
    .unwrap();
    for stage in ["train", "embed", "propose", "ground", "cluster", "evaluate"] {
        let o = avlex(&[stage, "--config", "run.conf", "--workers", "2"], dir.path());
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    let o = avlex(&["report", "--config", "run.conf", "--format", "csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("recall,search,5,")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("sweep,4,")));
    assert!(out.lines().any(|l| l.starts_with("clusters,")));
    assert_eq!(std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap(), out);
}

#[test]
fn seed_flag_overrides_the_config() {
    let ws = tiny();
    for (name, seed) in [("a", "1"), ("b", "2")] {
        let cfg = ws.variant(name, &format!("work_dir = {name}"));
        let o = avlex(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed], ws.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &str| std::fs::read(ws.path().join(d).join(avlex::pipeline::CHECKPOINT)).unwrap();
    assert_ne!(read("a"), read("b"));
}
