use std::path::Path;
use std::process::{Command, Output};

use lgdea_core::eval::EvalReport;
use lgdea_core::trainer::{load_checkpoint, save_checkpoint};

fn lgdea(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgdea"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_corpus(dir: &Path) {
    let out = lgdea(
        dir,
        &[
            "gen", "--preset", "small", "--seed", "3", "--out", "c.jsonl",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_succeeds_and_bad_invocations_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&lgdea(d, &["--help"])), 0);
    assert_eq!(code(&lgdea(d, &[])), 1);
    assert_eq!(code(&lgdea(d, &["train", "--corpus", "c.jsonl"])), 1);
    assert_eq!(
        code(&lgdea(
            d,
            &["train", "--corpus", "missing.jsonl", "--out", "m.json"]
        )),
        1
    );
    assert_eq!(
        code(&lgdea(d, &["gen", "--preset", "huge", "--out", "x"])),
        1
    );
    assert_eq!(code(&lgdea(d, &["frobnicate"])), 1);
}

#[test]
fn pipeline_resume_eval_and_relations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);

    let out = lgdea(
        d,
        &[
            "train",
            "--corpus",
            "c.jsonl",
            "--max-steps",
            "6",
            "--out",
            "a.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = lgdea(
        d,
        &[
            "train",
            "--corpus",
            "c.jsonl",
            "--max-steps",
            "3",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(code(&out), 0);
    let out = lgdea(
        d,
        &[
            "train",
            "--corpus",
            "c.jsonl",
            "--resume",
            "b.json",
            "--max-steps",
            "6",
            "--out",
            "b.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(d.join("a.json.metrics.jsonl")).unwrap();
    let b = std::fs::read(d.join("b.json.metrics.jsonl")).unwrap();
    assert_eq!(
        a, b,
        "resumed metrics stream differs from the uninterrupted one"
    );

    let out = lgdea(
        d,
        &[
            "eval",
            "--checkpoint",
            "b.json",
            "--corpus",
            "c.jsonl",
            "--n-heldout",
            "40",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = EvalReport::from_json(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    assert_eq!(report.n_images, 40);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Prec@1"));

    let out = lgdea(
        d,
        &[
            "dump-relations",
            "--corpus",
            "c.jsonl",
            "--checkpoint",
            "b.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["y", "p"] {
        assert!(v["relations"][key]["rows"].as_u64().unwrap() > 0);
    }
    let out = lgdea(
        d,
        &[
            "dump-relations",
            "--corpus",
            "c.jsonl",
            "--mode",
            "global-baseline",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = lgdea(
        d,
        &[
            "dump-relations",
            "--corpus",
            "c.jsonl",
            "--mode",
            "global_baseline",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("lgdea mode"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lgdea(dir.path(), &["gradcheck", "--out", "g.jsonl"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let lines = std::fs::read_to_string(dir.path().join("g.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

#[test]
fn overflowing_parameters_exit_with_the_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    assert_eq!(
        code(&lgdea(
            d,
            &[
                "train",
                "--corpus",
                "c.jsonl",
                "--max-steps",
                "1",
                "--out",
                "ck.json"
            ]
        )),
        0
    );
    let mut ck = load_checkpoint(d.join("ck.json")).unwrap();
    for (i, v) in ck
        .state
        .model
        .image
        .patch_projection
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        *v = if i % 2 == 0 { 1e308 } else { -1e308 };
    }
    save_checkpoint(&ck.state, &ck.config, d.join("ck.json")).unwrap();
    let out = lgdea(
        d,
        &[
            "train",
            "--corpus",
            "c.jsonl",
            "--resume",
            "ck.json",
            "--max-steps",
            "3",
            "--out",
            "ck2.json",
        ],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
