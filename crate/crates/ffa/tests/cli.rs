//! End-to-end checks of the command-line surface: subcommands, file formats
//! and exit codes.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn ffa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ffa"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ffa");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_micro_config(path: &Path, extra: &str) {
    let base = "\
d_emb = 16
n_heads = 2
n_isa_layers = 1
n_msa_layers = 1
d_ff = 32
fusion_heads = 2
fusion_d_ff = 48
max_len = 16
dropout = 0.0
rdrop_alpha = 0.0
learning_rate = 0.002
batch_size = 8
max_epochs = 3
seed = 9
";
    std::fs::write(path, format!("{base}{extra}")).unwrap();
}

#[test]
fn gen_corpus_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    let c = dir.path().join("c.tsv");
    run_ok(ffa()
        .args(["gen-corpus", "--seed", "5", "--sentences", "30", "--out"])
        .arg(&a));
    run_ok(ffa()
        .args(["gen-corpus", "--seed", "5", "--sentences", "30", "--out"])
        .arg(&b));
    run_ok(ffa()
        .args(["gen-corpus", "--seed", "6", "--sentences", "30", "--out"])
        .arg(&c));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "d_emb = 16\nnot_a_real_key = 1\n").unwrap();
    let out = ffa()
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_real_key"));
}

#[test]
fn malformed_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    write_micro_config(&cfg, "");
    let corpus = dir.path().join("bad.tsv");
    std::fs::write(&corpus, "hello\tSEMICOLON\n").unwrap();
    let out = ffa()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--train"])
        .arg(&corpus)
        .args(["--valid"])
        .arg(&corpus)
        .args(["--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn gradcheck_passes_on_micro_config_and_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    write_micro_config(&cfg, "");
    let out = run_ok(ffa().args(["gradcheck", "--config"]).arg(&cfg));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradient check passed"), "{stdout}");
    assert!(stdout.contains("p_lambda"), "{stdout}");
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("micro.toml");
    write_micro_config(&cfg, "");
    let train = dir.path().join("train.tsv");
    let valid = dir.path().join("valid.tsv");
    run_ok(ffa()
        .args(["gen-corpus", "--seed", "1", "--sentences", "20", "--out"])
        .arg(&train));
    run_ok(ffa()
        .args(["gen-corpus", "--seed", "2", "--sentences", "6", "--out"])
        .arg(&valid));

    let run_dir = dir.path().join("run");
    let out = run_ok(ffa()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--train"])
        .arg(&train)
        .args(["--valid"])
        .arg(&valid)
        .args(["--out"])
        .arg(&run_dir)
        .args(["--seed", "33"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("config_hash\t"), "{stdout}");
    assert!(stdout.contains("stop_reason\t"), "{stdout}");
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(run_dir.join("train.log").exists());

    let out = run_ok(ffa()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--test"])
        .arg(&valid)
        .args(["--overall", "macro"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall[macro]"), "{stdout}");
    assert!(stdout.contains("COMMA"), "{stdout}");

    // predict from a file
    let input = dir.path().join("input.txt");
    std::fs::write(&input, "alice sees books\n\nwhere bob finds trees\n").unwrap();
    let out = run_ok(ffa()
        .args(["predict", "--checkpoint"])
        .arg(&ckpt)
        .args(["--input"])
        .arg(&input));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    assert!(lines[0].starts_with("alice sees books"), "{stdout}");
    assert!(lines[1].is_empty());

    // predict from stdin, token count preserved
    let mut child = ffa()
        .args(["predict", "--checkpoint"])
        .arg(&ckpt)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"carol helps rivers and dave draws maps\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let words: Vec<String> = stdout
        .split_whitespace()
        .map(|w| w.trim_end_matches([',', '.', '?']).to_string())
        .collect();
    assert_eq!(
        words,
        ["carol", "helps", "rivers", "and", "dave", "draws", "maps"]
    );
}

#[test]
fn missing_checkpoint_exits_2() {
    let out = ffa()
        .args(["eval", "--checkpoint", "/nonexistent.ckpt", "--test", "/nonexistent.tsv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
