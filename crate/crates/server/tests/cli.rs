mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use calltriage::embed::export_embeddings;
use calltriage::ingest::CorpusRole;
use calltriage::store::{Project, METRICS_FILE, TRUTH_FILE};

fn calltriage(project: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calltriage"))
        .arg("--project")
        .arg(project)
        .args(args)
        .env_remove("CALLTRIAGE_PROJECT")
        .output()
        .unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_flags_print_usage_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = calltriage(dir.path(), &["cluster", "--clusters", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    let out = calltriage(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = calltriage(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn user_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // no project yet
    assert_eq!(calltriage(dir.path(), &["ingest"]).status.code(), Some(1));
    ok_json(&calltriage(dir.path(), &["init"]));
    // init refuses to clobber
    assert_eq!(calltriage(dir.path(), &["init"]).status.code(), Some(1));
    let out = calltriage(dir.path(), &["cluster"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("depends on"), "{}", stderr(&out));
    assert_eq!(
        calltriage(dir.path(), &["embed", "--backend", "external"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn full_run_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok_json(&calltriage(root, &["init", "--seed", "3"]));
    let synth = ok_json(&calltriage(
        root,
        &[
            "synth",
            "--n-reference",
            "16",
            "--n-positive",
            "5",
            "--n-negative",
            "5",
            "--length-s",
            "4",
        ],
    ));
    assert_eq!(synth["positives"], 5);
    ok_json(&calltriage(root, &["ingest"]));
    ok_json(&calltriage(root, &["spectrogram"]));
    ok_json(&calltriage(root, &["embed", "--backend", "baseline"]));

    let header = ok_json(&calltriage(root, &["cluster"]));
    assert_eq!(header["k"], 12);
    let p = Project::open(root).unwrap();
    let (model, assignment) = p.load_clusters().unwrap();
    assert_eq!(model.k, 12);
    assert_eq!(assignment.sizes().len(), 12);

    ok_json(&calltriage(root, &["project2d", "--method", "pca"]));
    assert_eq!(calltriage(root, &["propagate"]).status.code(), Some(1));
    ok_json(&calltriage(root, &["label", "--truth-aware"]));
    let summary = ok_json(&calltriage(root, &["propagate", "--auto"]));
    assert_eq!(summary["recordings"], 10);
    ok_json(&calltriage(root, &["verdict"]));

    std::fs::remove_file(root.join(METRICS_FILE)).unwrap();
    let truth = root.join("truth-copy.csv");
    std::fs::copy(root.join(TRUTH_FILE), &truth).unwrap();
    let metrics = ok_json(&calltriage(root, &["evaluate", "--truth", truth.to_str().unwrap()]));
    assert!(root.join(METRICS_FILE).exists());
    assert_eq!(metrics["baseline_precision"], 0.5);
    let report = ok_json(&calltriage(root, &["report"]));
    assert!(report.is_object());
}

#[test]
fn external_embeddings_with_missing_ids_are_rejected() {
    let (dir, p) = common::fresh_project();
    let reference = p.load_embeddings(CorpusRole::Reference).unwrap();
    let field = p.load_embeddings(CorpusRole::Field).unwrap();
    let dropped: Vec<String> = field.window_ids[..2].to_vec();
    let rows: Vec<(&String, &[f32])> = (0..reference.rows())
        .map(|i| (&reference.window_ids[i], reference.row(i)))
        .chain((2..field.rows()).map(|i| (&field.window_ids[i], field.row(i))))
        .collect();
    let partial = calltriage::embed::EmbeddingMatrix::new(
        rows.iter().map(|(id, _)| (*id).clone()).collect(),
        field.dim,
        rows.iter().flat_map(|(_, r)| r.to_vec()).collect(),
        field.backend,
    )
    .unwrap();
    let file = dir.path().join("partial.aemb");
    export_embeddings(&partial, &file).unwrap();

    let out = calltriage(
        dir.path(),
        &["embed", "--backend", "external", "--file", file.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    let listed = err.rsplit("missing window ids: ").next().unwrap().trim();
    assert_eq!(listed, dropped.join(", "));
}
