use std::path::Path;
use std::process::{Command, Output};

use sparsepo::analysis::{read_frontier, read_heatmap, read_sparsity};
use sparsepo::config::{schema, KeyType};
use sparsepo::losses::Method;

fn sparsepo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsepo")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn assert_one_line_error(o: &Output, code: i32, kind: &str) -> String {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: kind={kind} msg=")), "{err}");
    err
}

fn set(k: &str, v: impl std::fmt::Display) -> [String; 2] {
    ["--set".into(), format!("{k}={v}")]
}

fn run_with(sub: &[&str], sets: &[[String; 2]]) -> Output {
    let mut args: Vec<String> = sub.iter().map(|s| s.to_string()).collect();
    args.extend(sets.iter().flatten().cloned());
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    sparsepo(&refs)
}

/// Small-scale overrides shared by the pipeline tests.
fn small(out: &Path) -> Vec<[String; 2]> {
    vec![
        set("out_dir", out.display()),
        set("data.n_pairs", 16),
        set("data.n_eval_pairs", 8),
        set("batch_size", 8),
        set("epochs", 1),
        set("checkpoint_every", 1),
        set("frontier.n_prompts", 4),
    ]
}

#[test]
fn help_documents_every_key_and_exits_zero() {
    for args in [vec!["--help"], vec!["po", "--help"], vec!["frontier", "--help"]] {
        let o = sparsepo(&args);
        assert_eq!(o.status.code(), Some(0));
        let text = String::from_utf8_lossy(&o.stdout);
        for e in schema() {
            assert!(text.contains(&e.key), "{args:?} help lacks {}", e.key);
        }
    }
    assert_eq!(sparsepo(&["--version"]).status.code(), Some(0));
}

#[test]
fn schema_lists_exactly_the_supported_methods() {
    let entry = schema().iter().find(|e| e.key == "method").unwrap();
    let KeyType::Enum(opts) = &entry.ty else { panic!("method is not an enum") };
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    assert_eq!(opts, &names);
}

#[test]
fn unknown_method_is_a_usage_error_echoing_the_value() {
    let o = sparsepo(&["po", "--method", "ppo-xl"]);
    assert!(assert_one_line_error(&o, 2, "usage").contains("ppo-xl"));
    let o = sparsepo(&["po", "--set", "method=rlhf"]);
    assert!(assert_one_line_error(&o, 2, "usage").contains("rlhf"));
}

#[test]
fn unknown_keys_flags_and_subcommands_are_usage_errors() {
    assert!(assert_one_line_error(&sparsepo(&["eval", "--set", "betta=1"]), 2, "usage").contains("betta"));
    assert!(assert_one_line_error(&sparsepo(&["po", "--set", "epochs=lots"]), 2, "usage").contains("lots"));
    assert_one_line_error(&sparsepo(&["po", "--frobnicate"]), 2, "usage");
    assert_one_line_error(&sparsepo(&["train"]), 2, "usage");
    assert_one_line_error(&sparsepo(&["po", "--config", "/nonexistent/cfg.txt"]), 2, "usage");
}

#[test]
fn runtime_failures_exit_one_with_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(&["eval"], &[set("policy", dir.path().join("missing.ckpt").display())]);
    assert_one_line_error(&o, 1, "checkpoint");
    let o = run_with(&["po"], &[set("beta", 0), set("out_dir", dir.path().display())]);
    assert_one_line_error(&o, 1, "loss");
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\ndata.n_pairs = 8\ndata.kind = sft\n").unwrap();
    let out = dir.path().join("x.jsonl");
    let o = run_with(
        &["gen-data", "--config", cfg.to_str().unwrap()],
        &[set("data.kind", "pairs"), set("data.out", out.display())],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let d = sparsepo::data::Dataset::load(&out).unwrap();
    assert_eq!(d.len(), 8);
}

#[test]
fn po_runs_end_to_end_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(
        &["po", "--method", "sparse-common"],
        &[set("beta", 0.1), set("out_dir", dir.path().display()), set("data.n_pairs", 200), set("epochs", 1)],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = stdout_json(&o);
    assert_eq!(summary["runs"][0]["steps_done"], 25);
    assert!(dir.path().join("metrics.jsonl").is_file());
    assert!(dir.path().join("step_000025.ckpt").is_file());

    let o = run_with(&["eval"], &[set("out_dir", dir.path().display()), set("data.n_eval_pairs", 50)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = stdout_json(&o);
    assert_eq!(rep["n_pairs"], 50);
    assert!(rep["selectivity"]["n_responses"].as_u64().unwrap() > 0);
}

#[test]
fn frontier_has_one_row_per_checkpoint_and_beta() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = small(dir.path());
    sets.push(set("betas", "0.1,1.0"));
    let o = run_with(&["po", "--method", "dpo"], &sets);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for beta in ["beta_0.1", "beta_1"] {
        assert_eq!(sparsepo::train::list_checkpoints(&dir.path().join(beta)).unwrap().len(), 3);
    }
    let o = run_with(&["frontier"], &small(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_frontier(&dir.path().join("frontier.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.mean_kl >= 0.0 && (0.0..=1.0).contains(&r.mean_reward)));
    // the step-0 policy is the reference
    assert!(rows.iter().filter(|r| r.step == 0).all(|r| r.mean_kl <= 1e-9));

    let o = run_with(&["sparsity-report"], &small(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing beta: 0.01"));
    assert_eq!(stdout_json(&o)["missing_betas"].as_array().unwrap().len(), 15);
    let rows = read_sparsity(&dir.path().join("sparsity.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 2);
}

#[test]
fn heatmap_exports_eight_rows_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with(&["po", "--method", "sparse-indep"], &small(dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut sets = small(dir.path());
    sets.push(set("heatmap.pairs", "0,3"));
    let o = run_with(&["heatmap"], &sets);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_heatmap(&dir.path().join("heatmap.jsonl")).unwrap();
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.scaled.iter().all(|s| (0.0..=1.0).contains(s))));
}

#[test]
fn resume_latest_finishes_an_interrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let whole = run_with(&["po", "--method", "mapo"], &small(a.path()));
    assert_eq!(whole.status.code(), Some(0), "{}", stderr(&whole));
    let mut first = small(b.path());
    first.push(set("stop_after_steps", 1));
    assert_eq!(run_with(&["po", "--method", "mapo"], &first).status.code(), Some(0));
    let mut rest = small(b.path());
    rest.push(set("resume", "latest"));
    let o = run_with(&["po", "--method", "mapo"], &rest);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.path().join("metrics.jsonl")).unwrap(),
        std::fs::read(b.path().join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn sft_then_po_from_the_sft_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = small(dir.path());
    sets.push(set("sft.epochs", 1));
    let o = run_with(&["sft"], &sets);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = dir.path().join("sft.ckpt");
    assert!(ckpt.is_file());
    let mut sets = small(&dir.path().join("po"));
    sets.push(set("init", ckpt.display()));
    let o = run_with(&["po", "--method", "simpo"], &sets);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reference = sparsepo::model::TransformerLM::load(&dir.path().join("po/reference.ckpt")).unwrap();
    assert_eq!(reference.checksum(), sparsepo::model::TransformerLM::load(&ckpt).unwrap().checksum());
}
