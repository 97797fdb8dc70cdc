//! End-to-end runs of the `reqlens` binary on small generated workspaces.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const DAY: i64 = 86_400;
const USERS: usize = 6;
const DIALOGS: usize = 12;

fn reqlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reqlens"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn jsonl(path: &Path, rows: impl IntoIterator<Item = Value>) {
    let mut s = String::new();
    for r in rows {
        writeln!(s, "{r}").unwrap();
    }
    fs::write(path, s).unwrap();
}

/// Marked text of dialog `d` of user `u`.
fn marked(u: usize, d: usize) -> String {
    match d % 4 {
        0 => format!("Please [[R]]summarize chapter {d} of book {u}[[/R]]"),
        1 => format!("[[ROLE]]You are a tutor[[/ROLE]]. [[R]]Explain topic {d}[[/R]]"),
        2 => format!("Hi, can you [[R]]write a poem about river {u}[[/R]]? [[C]]It is long and wide {d}[[/C]]"),
        _ => format!("[[R]]Translate sentence {d} into French[[/R]]"),
    }
}

fn strip(m: &str) -> String {
    let mut s = m.to_string();
    for tag in ["[[R]]", "[[/R]]", "[[C]]", "[[/C]]", "[[ROLE]]", "[[/ROLE]]"] {
        s = s.replace(tag, "");
    }
    s
}

fn id(u: usize, d: usize) -> String {
    format!("c{u}_{d:02}")
}

/// Deterministic pseudo-random vector for an id.
fn vector(seed: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| ((seed * 7919 + j * 104_729) as f64 * 0.618_033_988_7).sin())
        .collect()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.path().join("out").join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", "run.toml"];
        all.extend_from_slice(args);
        reqlens(self.path(), &all)
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// A corpus of 6 users x 12 dialogs two days apart, replay annotators that
/// disagree on two records, reviewer decisions and an embedding file.
fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut corpus = Vec::new();
    let mut large = Vec::new();
    let mut small = Vec::new();
    let mut vectors = Vec::new();
    for u in 0..USERS {
        for d in 0..DIALOGS {
            let m = marked(u, d);
            corpus.push(json!({
                "conversation_hash": id(u, d),
                "user_hash": format!("user{u}"),
                "timestamp": 1_700_000_000 + (d as i64) * 2 * DAY + u as i64,
                "model": if d % 2 == 0 { "gpt-3.5" } else { "gpt-4" },
                "text": strip(&m),
            }));
            large.push(json!({"id": id(u, d), "marked_text": m}));
            // the small annotator misses the whole request on two records
            let s = if (u, d) == (0, 0) || (u, d) == (1, 0) {
                strip(&m)
            } else {
                m.clone()
            };
            small.push(json!({"id": id(u, d), "marked_text": s}));
            vectors.push(json!({"id": id(u, d), "vector": vector(u * 100 + d, 8)}));
        }
    }
    let anchors = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/anchors.jsonl")).unwrap();
    for (i, line) in anchors.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let a: Value = serde_json::from_str(line).unwrap();
        vectors.push(json!({"id": a["anchor_id"], "vector": vector(10_000 + i, 8)}));
    }
    jsonl(&p.join("corpus.jsonl"), corpus);
    jsonl(&p.join("large.jsonl"), large);
    jsonl(&p.join("small.jsonl"), small);
    jsonl(&p.join("vectors.jsonl"), vectors);
    jsonl(
        &p.join("decisions.jsonl"),
        [
            json!({"id": id(0, 0), "decision": "accept_L"}),
            json!({"id": id(1, 0), "decision": "relabel", "marked_text": marked(1, 0)}),
        ],
    );
    fs::write(
        p.join("run.toml"),
        r#"
seed = 7
out_dir = "out"

[corpus]
path = "corpus.jsonl"

[cohort]
min_span_days = 14
min_dialogs = 10

[annotate]
delta = 3
large = { name = "L", kind = "replay", path = "large.jsonl" }
small = { name = "l", kind = "replay", path = "small.jsonl" }
decisions = "decisions.jsonl"

[richness]
mattr_window = 10
bins = 5

[embedding]
kind = "file"
path = "vectors.jsonl"

[convergence]
min_users = 3

[timelapse]
batch_size = 20
min_batch_size = 5

[kde]
nx = 20
ny = 20
late_index = 9
"#,
    )
    .unwrap();
    Workspace { dir }
}

#[test]
fn validate_well_formed_reports_zero_rate() {
    let ws = workspace();
    ws.ok(&["validate", "--input", "large.jsonl"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.out("format_report.json")).unwrap()).unwrap();
    assert_eq!(report["rate"], 0.0);
    assert_eq!(report["total"], USERS * DIALOGS);
    assert!(ws.out("validate.manifest.json").exists());
}

#[test]
fn validate_without_config_checks_parsing_only() {
    let dir = tempfile::tempdir().unwrap();
    jsonl(
        &dir.path().join("r.jsonl"),
        [
            json!({"id": "a", "marked_text": "[[R]]do it[[/R]]"}),
            json!({"id": "b", "marked_text": "[[R]]unclosed"}),
        ],
    );
    let out = reqlens(dir.path(), &["validate", "--input", "r.jsonl", "--out", "o"]);
    assert!(out.status.success());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/format_report.json")).unwrap()).unwrap();
    assert_eq!(report["rate"], 0.5);
}

#[test]
fn converge_reruns_are_byte_identical() {
    let ws = workspace();
    ws.ok(&["annotate"]);
    ws.ok(&["triage"]);
    let args = ["converge", "--k", "1", "--trials", "50", "--seed", "7"];
    ws.ok(&args);
    let first = fs::read(ws.out("convergence.csv")).unwrap();
    let manifest = fs::read(ws.out("converge.manifest.json")).unwrap();
    ws.ok(&args);
    assert_eq!(first, fs::read(ws.out("convergence.csv")).unwrap());
    assert_eq!(manifest, fs::read(ws.out("converge.manifest.json")).unwrap());
    let csv = String::from_utf8(first).unwrap();
    assert!(csv.starts_with("position,mean_min_diff,n_users,baseline_mean,baseline_std\n"));
    assert_eq!(csv.lines().count(), DIALOGS);

    ws.ok(&["converge", "--seed", "8"]);
    assert_ne!(csv.as_bytes(), fs::read(ws.out("convergence.csv")).unwrap());
}

#[test]
fn stats_on_empty_corpus_is_a_user_error() {
    let ws = workspace();
    fs::write(ws.path().join("corpus.jsonl"), "").unwrap();
    let out = ws.run(&["stats", "--mode", "full_text"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["code"], "empty_corpus");
    assert_eq!(err["message"], "zero valid records");
}

#[test]
fn config_errors_are_reported_together() {
    let ws = workspace();
    fs::write(
        ws.path().join("bad.toml"),
        r#"
[corpus]
path = "missing.jsonl"
[convergence]
k = 0
[kde]
early_index = 5
late_index = 5
"#,
    )
    .unwrap();
    let out = reqlens(ws.path(), &["--config", "bad.toml", "converge"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["code"], "invalid_config");
    let message = err["message"].as_str().unwrap();
    for needle in [
        "corpus.path",
        "convergence.k",
        "late_index",
        "seed",
        "embedding",
        "segmentations",
    ] {
        assert!(message.contains(needle), "{needle} missing from {message}");
    }
    assert!(message.starts_with("6 configuration problem(s)"), "{message}");
}

#[test]
fn unknown_config_key_is_a_parse_error() {
    let ws = workspace();
    fs::write(ws.path().join("bad.toml"), "sede = 7\n").unwrap();
    let out = reqlens(ws.path(), &["--config", "bad.toml", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["code"], "config_parse");
    assert!(err["location"].as_str().unwrap().ends_with("bad.toml"));
}

#[test]
fn full_pipeline() {
    let ws = workspace();
    let corpus_before = fs::read(ws.path().join("corpus.jsonl")).unwrap();

    ws.ok(&["ingest"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.out("filter_report.json")).unwrap()).unwrap();
    assert_eq!(report["filter"]["kept"], USERS * DIALOGS);
    assert_eq!(report["cohort_users"], USERS);

    ws.ok(&["annotate"]);
    let formats: Value = serde_json::from_str(&fs::read_to_string(ws.out("format_report.json")).unwrap()).unwrap();
    assert_eq!(formats["large"]["rate"], 0.0);

    ws.ok(&["triage"]);
    let triage: Value = serde_json::from_str(&fs::read_to_string(ws.out("triage_report.json")).unwrap()).unwrap();
    assert_eq!(triage["queued"], 2);
    assert_eq!(triage["resolved"], 2);
    assert_eq!(triage["pending"], 0);
    assert_eq!(triage["training"]["silver_reviewed"], 2);
    assert_eq!(triage["training"]["silver_agreed"], USERS * DIALOGS - 2);
    let audit = fs::read_to_string(ws.out("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 2);
    assert_eq!(fs::read_to_string(ws.out("review_queue.jsonl")).unwrap(), "");

    ws.ok(&["extract"]);
    let first = fs::read_to_string(ws.out("templates.jsonl")).unwrap();
    let t: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(t["template_text"], "Please __[REQUEST]__");

    ws.ok(&["classify"]);
    let taxonomy = fs::read_to_string(ws.out("taxonomy.csv")).unwrap();
    assert!(taxonomy.lines().count() > 1);

    ws.ok(&["stats"]);
    let stats = fs::read_to_string(ws.out("user_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), USERS + 1);
    let dist = fs::read_to_string(ws.out("distributions.csv")).unwrap();
    assert_eq!(dist.lines().count(), 1 + 3 * 5);

    ws.ok(&["timelapse"]);
    let full = fs::read_to_string(ws.out("timelapse_full.csv")).unwrap();
    // 36 records per model tag, batches of 20: one full batch each
    assert_eq!(full.lines().count(), 1 + 2);
    assert!(ws.out("cohort_compare.csv").exists());

    ws.ok(&["project", "--tau", "-1"]);
    let assignments = fs::read_to_string(ws.out("assignments.jsonl")).unwrap();
    assert_eq!(assignments.lines().count(), USERS * DIALOGS);
    assert!(assignments.lines().all(|l| l.contains("\"status\":\"assigned\"")));
    let projection = fs::read_to_string(ws.out("projection.csv")).unwrap();
    assert!(projection.contains("\nuser:user0,"));
    assert!(projection.contains("\nanchor:nc_r_01,"));

    ws.ok(&["kde"]);
    let diff: Value = serde_json::from_str(&fs::read_to_string(ws.out("kde_diff.json")).unwrap()).unwrap();
    assert_eq!(diff["cells"].as_array().unwrap().len(), 400);
    let early: Value = serde_json::from_str(&fs::read_to_string(ws.out("kde_early.json")).unwrap()).unwrap();
    let mass: f64 = early["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_f64().unwrap())
        .sum::<f64>()
        * ((early["x_range"][1].as_f64().unwrap() - early["x_range"][0].as_f64().unwrap()) / 20.0)
        * ((early["y_range"][1].as_f64().unwrap() - early["y_range"][0].as_f64().unwrap()) / 20.0);
    assert!((mass - 1.0).abs() < 1e-9, "{mass}");
    assert_eq!(
        fs::read_to_string(ws.out("trajectories.jsonl"))
            .unwrap()
            .lines()
            .count(),
        USERS
    );

    let manifest: Value = serde_json::from_str(&fs::read_to_string(ws.out("kde.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "kde");
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("corpus.jsonl")));
    assert!(manifest["outputs"]["kde_diff.json"].as_str().unwrap().len() == 64);

    assert_eq!(corpus_before, fs::read(ws.path().join("corpus.jsonl")).unwrap());
}

#[test]
fn compare_against_reference_corpus() {
    let ws = workspace();
    ws.ok(&["annotate"]);
    ws.ok(&["triage"]);
    jsonl(
        &ws.path().join("reference.jsonl"),
        (0..20).map(|i| json!({"id": i, "speaker": format!("s{}", i % 4), "text": format!("Could you please look at item {i}?")})),
    );
    let mut cfg = fs::read_to_string(ws.path().join("run.toml")).unwrap();
    cfg.push_str("\n[compare.reference]\npath = \"reference.jsonl\"\nformat = \"speaker\"\n");
    fs::write(ws.path().join("run.toml"), cfg).unwrap();
    ws.ok(&["compare"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(ws.out("compare_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reference_mode"], "full_text");
    assert_eq!(summary["reference"]["mtld"]["n"], 4);
    assert_eq!(summary["main"]["mtld"]["n"], USERS);
    let csv = fs::read_to_string(ws.out("compare.csv")).unwrap();
    assert!(csv.starts_with("metric,bin_lo,bin_hi,main,reference\n"));
}

#[test]
fn missing_seed_blocks_converge() {
    let ws = workspace();
    let cfg = fs::read_to_string(ws.path().join("run.toml"))
        .unwrap()
        .replace("seed = 7\n", "");
    fs::write(ws.path().join("run.toml"), cfg).unwrap();
    ws.ok(&["annotate"]);
    ws.ok(&["triage"]);
    let out = ws.run(&["converge"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("seed"));
}

#[test]
fn usage_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = reqlens(dir.path(), &["converge", "--k", "many"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["code"], "usage");
    assert!(reqlens(dir.path(), &["--help"]).status.success());
}
