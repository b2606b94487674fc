use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wsireport(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsireport")).current_dir(dir).args(args).output().unwrap()
}

fn small_config(dir: &Path) {
    let cfg = "\
seed = 4
features.dim = 16
decoder.layers = 1
decoder.heads = 2
decoder.d_model = 16
decoder.d_ff = 32
decoder.max_len = 16
train.epochs = 5
train.warmup_epochs = 2
train.batch_size = 4
patching.levels = 2,3
paths.checkpoint = model.wsdm
paths.corpus = data/corpus.tsv
paths.reference = data/reference.txt
";
    fs::write(dir.join("cfg.txt"), cfg).unwrap();
}

#[test]
fn missing_manifest_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let out = wsireport(d.path(), &["segment", "nowhere", "--out", "seg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("seg").exists());
}

#[test]
fn bad_config_and_arguments_exit_1() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.txt"), "decoder.heads = three\n").unwrap();
    let out = wsireport(d.path(), &["--config", "bad.txt", "score", "pairs.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(d.path().join("bad.txt"), "no.such.key = 1\n").unwrap();
    assert_eq!(wsireport(d.path(), &["--config", "bad.txt", "score", "pairs.tsv"]).status.code(), Some(1));
    assert_eq!(wsireport(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(wsireport(d.path(), &["--config", "absent.txt", "score", "p"]).status.code(), Some(2));
    assert_eq!(wsireport(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn dry_run_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    small_config(d.path());
    let out = wsireport(d.path(), &["--config", "cfg.txt", "--dry-run", "pipeline", "slide", "--out", "run"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.contains("generate with"));
    let entries: Vec<_> = fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["cfg.txt"]);
}

#[test]
fn stages_chain_through_files() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    small_config(p);
    let ok = |args: &[&str]| {
        let out = wsireport(p, &[&["--config", "cfg.txt"], args].concat());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["make-synthetic", "slide", "--out", "slide", "--size", "2048", "--levels", "2,3"]);
    ok(&["make-synthetic", "dataset", "--out", "data", "--count", "4"]);
    let log = ok(&["train", "data"]);
    assert!(log.starts_with("epoch\tlr\tloss\n"));
    assert!(p.join("model.wsdm").exists() && p.join("model.vocab").exists());

    ok(&["segment", "slide", "--out", "seg"]);
    assert!(p.join("seg/mask_level_2.pgm").exists());
    ok(&["--seed", "11", "patch", "slide", "--out", "patches"]);
    ok(&["extract", "slide", "--selection", "patches/selection.csv", "--out", "slide.wsif"]);
    let generated = ok(&["generate", "slide.wsif", "data/stores/case000.wsif"]);
    assert_eq!(generated.lines().count(), 2);
    assert!(generated.starts_with("slide\t"));
    fs::write(p.join("generated.tsv"), &generated).unwrap();
    let verified = ok(&["verify", "generated.tsv"]);
    assert_eq!(verified.lines().count(), 3);

    fs::write(p.join("empty.tsv"), "").unwrap();
    assert_eq!(ok(&["score", "empty.tsv"]), "");
    fs::write(p.join("pairs.tsv"), "x\tclear margins\tmargins clear\n").unwrap();
    let scores = ok(&["score", "pairs.tsv"]);
    assert_eq!(scores.lines().nth(1).unwrap(), "id\trouge\tbleu\tkeyword\tembedding\tcomposite");

    ok(&["pipeline", "slide", "--out", "run"]);
    assert!(p.join("run/report.txt").exists() && p.join("run/scores.tsv").exists());
}

#[test]
fn generate_without_checkpoint_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let out = wsireport(d.path(), &["generate", "x.wsif"]);
    assert_eq!(out.status.code(), Some(2));
}
