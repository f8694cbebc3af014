//! End-to-end tests driving the `nam` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn nam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nam"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn nam")
}

fn grammar_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../grammars").join(name)
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Exit code plus the single-line machine-parseable stderr contract.
fn assert_fails(out: &Output, code: i32) -> String {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line, got: {stderr}");
    assert!(lines[0].starts_with("error: "), "stderr: {stderr}");
    stderr
}

fn write_corpus_spec(dir: &Path, programs: usize, seed: u64) -> PathBuf {
    let path = dir.join("corpus.spec");
    fs::write(
        &path,
        format!(
            "grammar = {}\nprograms = {programs}\nmean_vars = 1.5\nmean_types = 1.5\n\
             mean_procs = 1.1\nmean_stmts = 2.0\nholdout = 0.25\nseed = {seed}\n",
            grammar_path("mini_c.ag").display()
        ),
    )
    .unwrap();
    path
}

fn write_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        "hidden = 4\nlayers = 1\nmax_epochs = 1\nes_samples = 2\nnode_cap = 300\nseed = 3\n",
    )
    .unwrap();
    path
}

#[test]
fn check_grammar_accepts_the_shipped_grammars() {
    let tmp = TempDir::new().unwrap();
    for name in ["mini_c.ag", "binary_numeral.ag"] {
        let out = nam(&["check-grammar", grammar_path(name).to_str().unwrap()], tmp.path());
        assert_ok(&out);
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(stdout.contains("grammar ok"), "stdout: {stdout}");
    }
}

#[test]
fn check_grammar_rejects_a_broken_file_with_exit_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.ag");
    fs::write(&bad, "nonterm s;\nprod Loop: s -> s;\n").unwrap();
    let out = nam(&["check-grammar", bad.to_str().unwrap()], tmp.path());
    assert_fails(&out, 2);

    let missing = nam(&["check-grammar", "no-such-file.ag"], tmp.path());
    assert_fails(&missing, 3);
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = write_corpus_spec(tmp.path(), 8, 5);
    let spec = spec.to_str().unwrap();
    for out_dir in ["a", "b"] {
        let out = nam(&["gen-corpus", "--spec", spec, "--out", out_dir], tmp.path());
        assert_ok(&out);
    }
    // Same seed twice: identical bytes, manifest included.
    for file in ["train.txt", "test.txt", "manifest.txt"] {
        let a = fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
    // An overriding --seed changes the corpus.
    let out = nam(&["gen-corpus", "--spec", spec, "--out", "c", "--seed", "6"], tmp.path());
    assert_ok(&out);
    let a = fs::read(tmp.path().join("a/train.txt")).unwrap();
    let c = fs::read(tmp.path().join("c/train.txt")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn pipeline_runs_end_to_end_and_emits_a_parseable_table() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let spec = write_corpus_spec(dir, 12, 5);
    let cfg = write_train_config(dir);
    let grammar = grammar_path("mini_c.ag");

    assert_ok(&nam(
        &["gen-corpus", "--spec", spec.to_str().unwrap(), "--out", "corpus"],
        dir,
    ));
    for variant in ["sgwc", "vanilla"] {
        assert_ok(&nam(
            &[
                "train",
                "--grammar",
                grammar.to_str().unwrap(),
                "--corpus",
                "corpus",
                "--constraint",
                "cd",
                "--variant",
                variant,
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                &format!("{variant}.ckpt"),
            ],
            dir,
        ));
        assert_ok(&nam(
            &[
                "sample",
                "--ckpt",
                &format!("{variant}.ckpt"),
                "--count",
                "10",
                "--seed",
                "11",
                "--out",
                &format!("{variant}.report"),
                "--node-cap",
                "300",
            ],
            dir,
        ));
    }
    // The count table ships as a sorted text file next to its checkpoint.
    let table = fs::read_to_string(dir.join("sgwc.ckpt.table.txt")).unwrap();
    assert!(table.lines().count() > 0);
    // Manifests record the run configuration.
    for name in ["sgwc.ckpt.manifest.txt", "vanilla.ckpt.manifest.txt"] {
        let manifest = fs::read_to_string(dir.join(name)).unwrap();
        assert!(manifest.contains("tool_version = "), "{name}: {manifest}");
        assert!(manifest.contains("grammar_hash = "), "{name}: {manifest}");
    }

    let out = nam(
        &[
            "eval",
            "--ckpt",
            "vanilla.ckpt",
            "--ckpt",
            "sgwc.ckpt",
            "--corpus",
            "corpus",
            "--samples",
            "vanilla.report",
            "--samples",
            "sgwc.report",
            "--out",
            "table.csv",
        ],
        dir,
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    for column in ["Model", "Avg. Vars.", "Constraint Violations", "NLL test"] {
        assert!(stdout.contains(column), "stdout: {stdout}");
    }
    // The written table round-trips through the library parser.
    let report = nam_core::eval::read_report(&dir.join("table.csv")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.batch, 10);
}

#[test]
fn train_resumes_from_an_existing_checkpoint_as_a_no_op() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let spec = write_corpus_spec(dir, 8, 5);
    let cfg = write_train_config(dir);
    let grammar = grammar_path("mini_c.ag");
    assert_ok(&nam(
        &["gen-corpus", "--spec", spec.to_str().unwrap(), "--out", "corpus"],
        dir,
    ));
    let train_args = [
        "train",
        "--grammar",
        grammar.to_str().unwrap(),
        "--corpus",
        "corpus",
        "--constraint",
        "cd",
        "--variant",
        "vanilla",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "v.ckpt",
    ];
    assert_ok(&nam(&train_args, dir));
    let first = fs::read(dir.join("v.ckpt")).unwrap();
    // max_epochs already reached: the rerun keeps the checkpoint bit-identical.
    assert_ok(&nam(&train_args, dir));
    let second = fs::read(dir.join("v.ckpt")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn sample_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let spec = write_corpus_spec(dir, 8, 5);
    let grammar = grammar_path("mini_c.ag");
    assert_ok(&nam(
        &["gen-corpus", "--spec", spec.to_str().unwrap(), "--out", "corpus"],
        dir,
    ));
    assert_ok(&nam(
        &[
            "train",
            "--grammar",
            grammar.to_str().unwrap(),
            "--corpus",
            "corpus",
            "--constraint",
            "ct",
            "--variant",
            "sgwc",
            "--out",
            "s.ckpt",
        ],
        dir,
    ));
    for name in ["r1", "r2"] {
        assert_ok(&nam(
            &[
                "sample", "--ckpt", "s.ckpt", "--count", "20", "--seed", "7", "--out", name,
                "--node-cap", "300",
            ],
            dir,
        ));
    }
    let r1 = fs::read(dir.join("r1")).unwrap();
    let r2 = fs::read(dir.join("r2")).unwrap();
    assert_eq!(r1, r2);
    let out = nam(
        &[
            "sample", "--ckpt", "s.ckpt", "--count", "20", "--seed", "8", "--out", "r3",
            "--node-cap", "300",
        ],
        dir,
    );
    assert_ok(&out);
    assert_ne!(r1, fs::read(dir.join("r3")).unwrap());
}

#[test]
fn errors_map_to_the_documented_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    // Missing checkpoint: data error.
    let out = nam(
        &["sample", "--ckpt", "absent.ckpt", "--count", "1", "--seed", "0", "--out", "r"],
        dir,
    );
    assert_fails(&out, 3);

    // Unknown constraint name: validation (clap rejects the value).
    let out = nam(
        &[
            "train",
            "--grammar",
            grammar_path("mini_c.ag").to_str().unwrap(),
            "--corpus",
            "corpus",
            "--constraint",
            "xx",
            "--variant",
            "vanilla",
            "--out",
            "v.ckpt",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));

    // Bad config value: validation, with the single-line error contract.
    let spec = write_corpus_spec(dir, 6, 5);
    assert_ok(&nam(
        &["gen-corpus", "--spec", spec.to_str().unwrap(), "--out", "corpus"],
        dir,
    ));
    let bad_cfg = dir.join("bad.cfg");
    fs::write(&bad_cfg, "hidden = polka\n").unwrap();
    let out = nam(
        &[
            "train",
            "--grammar",
            grammar_path("mini_c.ag").to_str().unwrap(),
            "--corpus",
            "corpus",
            "--constraint",
            "cd",
            "--variant",
            "vanilla",
            "--config",
            bad_cfg.to_str().unwrap(),
            "--out",
            "v.ckpt",
        ],
        dir,
    );
    let stderr = assert_fails(&out, 2);
    assert!(stderr.contains("hidden"), "stderr: {stderr}");

    // Corrupt checkpoint bytes: data error.
    fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = nam(
        &["sample", "--ckpt", "junk.ckpt", "--count", "1", "--seed", "0", "--out", "r"],
        dir,
    );
    assert_fails(&out, 3);
}
