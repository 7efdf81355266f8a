//! End-to-end checks of the `imt` binary through its public surface.

use std::path::Path;
use std::process::{Command, Output};

fn imt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imt"))
        .args(args)
        .current_dir(dir)
        .env_remove("IMT_SEED")
        .output()
        .expect("failed to launch imt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = imt(dir, args);
    assert!(
        out.status.success(),
        "imt {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("read {}: {}", rel, e))
}

fn synth(dir: &Path) {
    ok(
        dir,
        &[
            "synth", "--out-dir", "data", "--train", "120", "--dev", "24", "--test", "12",
            "--seed", "9",
        ],
    );
}

const TRAIN_ARGS: &[&str] = &[
    "--set",
    "lang_x=a",
    "--set",
    "lang_y=b",
    "--set",
    "train_x=data/train.a",
    "--set",
    "train_y=data/train.b",
    "--set",
    "dev_x=data/dev.a",
    "--set",
    "dev_y=data/dev.b",
    "--set",
    "model_dim=16",
    "--set",
    "ff_dim=32",
    "--set",
    "num_blocks=1",
    "--set",
    "batch_size=8",
    "--set",
    "eval_interval=10",
    "--max-steps",
    "20",
    "--seed",
    "9",
];

#[test]
fn bpe_learn_apply_decode_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(
        dir,
        &[
            "bpe", "learn", "--input", "data/train.a", "--merges", "8", "--output", "model.txt",
            "--lang", "a",
        ],
    );
    ok(
        dir,
        &["bpe", "apply", "--model", "model.txt", "--input", "data/test.a", "--output", "ids.txt"],
    );
    ok(
        dir,
        &["bpe", "decode", "--model", "model.txt", "--input", "ids.txt", "--output", "round.txt"],
    );
    assert_eq!(read(dir, "data/test.a"), read(dir, "round.txt"));
}

#[test]
fn bpe_learn_missing_file_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = imt(
        tmp.path(),
        &["bpe", "learn", "--input", "no-such-file", "--output", "m.txt"],
    );
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_joint_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec!["train-joint", "--run", "r1"];
    args.extend_from_slice(TRAIN_ARGS);
    ok(dir, &args);
    for artifact in ["config.txt", "metrics.csv", "system.ckpt"] {
        assert!(dir.join("runs/r1").join(artifact).exists(), "{} missing", artifact);
    }
    assert!(read(dir, "runs/r1/metrics.csv").starts_with("step,l_xx,l_yy,l_xy,l_yx,d,total,dev_loss"));

    let mut args = vec!["train-joint", "--run", "r2"];
    args.extend_from_slice(TRAIN_ARGS);
    ok(dir, &args);
    assert_eq!(read(dir, "runs/r1/metrics.csv"), read(dir, "runs/r2/metrics.csv"));

    // Every distance kind is accepted.
    for kind in ["corr", "max", "l1", "l2", "none"] {
        let run = format!("d-{}", kind);
        let mut args = vec!["train-joint", "--run", &run, "--distance", kind];
        args.extend_from_slice(TRAIN_ARGS);
        let mut args: Vec<&str> = args;
        // Keep these runs very short.
        let pos = args.iter().position(|a| *a == "--max-steps").unwrap();
        args[pos + 1] = "2";
        ok(dir, &args);
    }
    let out = imt(dir, &["train-joint", "--run", "bad", "--distance", "cosine"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec!["train-joint", "--run", "bad", "--set", "mystery=1"];
    args.extend_from_slice(TRAIN_ARGS);
    let out = imt(dir, &args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn full_pipeline_add_language_translate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec!["train-joint", "--run", "joint"];
    args.extend_from_slice(TRAIN_ARGS);
    ok(dir, &args);

    let add_args = [
        "add-language",
        "--run",
        "addc",
        "--set",
        "checkpoint=runs/joint/system.ckpt",
        "--set",
        "new_lang=c",
        "--set",
        "shared_lang=a",
        "--set",
        "train_new=data/train.c",
        "--set",
        "train_shared=data/train.a",
        "--set",
        "dev_new=data/dev.c",
        "--set",
        "dev_shared=data/dev.a",
        "--set",
        "shared_bpe_model=runs/joint/bpe.a.txt",
        "--set",
        "batch_size=8",
        "--set",
        "eval_interval=10",
        "--max-steps",
        "10",
        "--seed",
        "9",
    ];
    let stdout = ok(dir, &add_args);
    assert!(stdout.contains("frozen: unchanged"), "{}", stdout);
    assert!(stdout.contains("5 modules"), "{}", stdout);

    // Wrong shared vocabulary: a model learned over a different alphabet.
    std::fs::write(dir.join("other.txt"), "zz qq zz\nqq zz\n").unwrap();
    ok(
        dir,
        &[
            "bpe", "learn", "--input", "other.txt", "--merges", "4", "--output", "other-model.txt",
            "--lang", "a",
        ],
    );
    let mut wrong: Vec<&str> = add_args.to_vec();
    let pos = wrong
        .iter()
        .position(|a| *a == "shared_bpe_model=runs/joint/bpe.a.txt")
        .unwrap();
    wrong[pos] = "shared_bpe_model=other-model.txt";
    wrong[2] = "addc2";
    let out = imt(dir, &wrong);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));

    // Autoencode A->A and zero-shot C->B both compose; B->C has no decoder.
    ok(
        dir,
        &[
            "translate", "--checkpoint", "runs/addc/system.ckpt", "--src", "a", "--tgt", "a",
            "--src-model", "runs/joint/bpe.a.txt", "--tgt-model", "runs/joint/bpe.a.txt",
            "--input", "data/test.a", "--output", "auto.a",
        ],
    );
    ok(
        dir,
        &[
            "translate", "--checkpoint", "runs/addc/system.ckpt", "--src", "c", "--tgt", "b",
            "--src-model", "runs/addc/bpe.c.txt", "--tgt-model", "runs/joint/bpe.b.txt",
            "--input", "data/test.c", "--output", "zs.b",
        ],
    );
    assert_eq!(read(dir, "zs.b").lines().count(), 12);
    let out = imt(
        dir,
        &[
            "translate", "--checkpoint", "runs/addc/system.ckpt", "--src", "b", "--tgt", "c",
            "--src-model", "runs/joint/bpe.b.txt", "--tgt-model", "runs/addc/bpe.c.txt",
            "--input", "data/test.b", "--output", "never.c",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no module registered"));

    // evaluate: self-BLEU 100, compat triple, export row count.
    let stdout = ok(
        dir,
        &["evaluate", "bleu", "--hyp", "data/test.a", "--ref", "data/test.a"],
    );
    assert!(stdout.contains("BLEU = 100.00"), "{}", stdout);
    let stdout = ok(
        dir,
        &[
            "evaluate", "compat", "--checkpoint", "runs/joint/system.ckpt", "--decoder", "a",
            "--encoder", "b", "--file-a", "data/test.a", "--file-b", "data/test.b",
            "--model-a", "runs/joint/bpe.a.txt", "--model-b", "runs/joint/bpe.b.txt",
        ],
    );
    assert!(stdout.contains("autoencode"), "{}", stdout);
    ok(
        dir,
        &[
            "evaluate", "export", "--checkpoint", "runs/addc/system.ckpt", "--langs", "a,b,c",
            "--files", "data/test.a,data/test.b,data/test.c",
            "--models", "runs/joint/bpe.a.txt,runs/joint/bpe.b.txt,runs/addc/bpe.c.txt",
            "--output", "reps.csv",
        ],
    );
    assert_eq!(read(dir, "reps.csv").lines().count(), 1 + 3 * 12);
}

#[test]
fn imt_seed_env_overrides_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let mut args = vec!["train-joint", "--run", "env"];
    args.extend_from_slice(TRAIN_ARGS);
    let out = Command::new(env!("CARGO_BIN_EXE_imt"))
        .args(&args)
        .current_dir(dir)
        .env("IMT_SEED", "123")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(read(dir, "runs/env/config.txt").contains("seed = 123"));
}
