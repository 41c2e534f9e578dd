//! Exercises the installed binary end-to-end at a small scale: artifact
//! round-trips between subcommands, hash binding, and the exit-code
//! contract (1 usage/config, 2 binding, 3 numerical, 4 failed checks).

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentlm"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_train_probe_steer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let gen = run(
        &[
            "gen",
            "--scenario",
            "encyclopedia",
            "--atoms",
            "10",
            "--docs",
            "300",
            "--len",
            "4",
            "--seed",
            "5",
        ],
        d,
    );
    assert_code(&gen, 0);
    assert!(d.join("corpus.jsonl").exists() && d.join("world.txt").exists());

    let train = run(
        &[
            "train",
            "--corpus",
            "corpus.jsonl",
            "--world",
            "world.txt",
            "--hidden",
            "32",
            "--embed",
            "16",
            "--epochs",
            "2",
        ],
        d,
    );
    assert_code(&train, 0);

    let probe = run(
        &[
            "probe",
            "--checkpoint",
            "checkpoint.bin",
            "--world",
            "world.txt",
            "--corpus",
            "corpus.jsonl",
            "--position",
            "1",
            "--eval-docs",
            "200",
        ],
        d,
    );
    assert_code(&probe, 0);
    assert!(d.join("probe_report.json").exists());

    let steer = run(
        &[
            "steer",
            "--checkpoint",
            "checkpoint.bin",
            "--world",
            "world.txt",
            "--corpus",
            "corpus.jsonl",
            "--class",
            "A",
            "--n",
            "50",
        ],
        d,
    );
    assert_code(&steer, 0);

    let sample = run(
        &[
            "sample-eval",
            "--checkpoint",
            "checkpoint.bin",
            "--world",
            "world.txt",
            "--n",
            "50",
            "--len",
            "4",
        ],
        d,
    );
    assert_code(&sample, 0);

    // Merge the stage reports; all are bound to the same world/checkpoint.
    let report = run(
        &[
            "report",
            "--world",
            "world.txt",
            "--checkpoint",
            "checkpoint.bin",
            "--in",
            "probe_report.json",
            "--in",
            "steer_report.json",
            "--in",
            "sample_report.json",
            "--out",
            "merged.json",
        ],
        d,
    );
    assert_code(&report, 0);
    assert!(d.join("merged.json").exists() && d.join("merged.csv").exists());
}

#[test]
fn binding_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_code(
        &run(
            &["gen", "--atoms", "8", "--docs", "100", "--len", "3", "--seed", "1"],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "train", "--corpus", "corpus.jsonl", "--world", "world.txt", "--hidden", "16",
                "--embed", "8", "--epochs", "1",
            ],
            d,
        ),
        0,
    );
    // A world with a different seed has a different hash; the checkpoint
    // must refuse it.
    assert_code(
        &run(
            &[
                "gen", "--atoms", "8", "--docs", "100", "--len", "3", "--seed", "2", "--out",
                "corpus2.jsonl", "--world-out", "world2.txt",
            ],
            d,
        ),
        0,
    );
    let probe = run(
        &[
            "probe", "--checkpoint", "checkpoint.bin", "--world", "world2.txt", "--corpus",
            "corpus2.jsonl", "--position", "1", "--eval-docs", "50",
        ],
        d,
    );
    assert_code(&probe, 2);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // BDI with every atom contested is unidentifiable and must be refused.
    let out = run(
        &[
            "gen",
            "--scenario",
            "bdi",
            "--atoms",
            "8",
            "--contested-fraction",
            "1.0",
            "--docs",
            "10",
            "--len",
            "3",
        ],
        d,
    );
    assert_code(&out, 1);

    // doc_len longer than the archetype sets.
    let out = run(
        &["gen", "--atoms", "4", "--docs", "10", "--len", "9"],
        d,
    );
    assert_code(&out, 1);

    // Unknown steering class.
    assert_code(
        &run(
            &["gen", "--atoms", "8", "--docs", "50", "--len", "3"],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "train", "--corpus", "corpus.jsonl", "--world", "world.txt", "--hidden", "16",
                "--embed", "8", "--epochs", "0",
            ],
            d,
        ),
        0,
    );
    let out = run(
        &[
            "steer", "--checkpoint", "checkpoint.bin", "--world", "world.txt", "--corpus",
            "corpus.jsonl", "--class", "xyzzy", "--n", "5",
        ],
        d,
    );
    assert_code(&out, 1);
}

#[test]
fn corrupt_corpus_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_code(
        &run(
            &["gen", "--atoms", "8", "--docs", "20", "--len", "3"],
            d,
        ),
        0,
    );
    let path = d.join("corpus.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    let cut = text.lines().take(5).map(|l| l.len() + 1).sum::<usize>();
    text.insert_str(cut, "{not json\n");
    std::fs::write(&path, text).unwrap();
    let out = run(
        &[
            "train", "--corpus", "corpus.jsonl", "--world", "world.txt", "--hidden", "16",
            "--embed", "8", "--epochs", "0",
        ],
        d,
    );
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 6"), "stderr was: {stderr}");
}
