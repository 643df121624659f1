use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
task = "copy"

[data]
vocab_size = 16
train_size = 60
dev_size = 12
test_size = 12
train_min_len = 2
train_max_len = 5
test_min_len = 2
test_max_len = 5
seed = 3

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
vocab_size = 16
max_len = 16
seed = 3

[train]
steps = 6
batch_size = 4
warmup = 2
validate_every = 3
average_best_k = 2
dev_limit = 6
seed = 3

[bench]
budgets = [8, 64]
warmup = 0
repeats = 1
"#;

fn fracpos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracpos")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = fracpos(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map(|r| r.map(|e| e.unwrap().file_name().into_string().unwrap()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// gen-data → train → decode → eval, returning the metrics file.
fn pipeline(root: &Path, cfg: &Path, pe: &str) -> String {
    let (data, model, dec, ev) = (root.join("data"), root.join("model"), root.join("dec"), root.join("eval"));
    ok(&["gen-data", "--config", s(cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(cfg), "--pe", pe, "--data", s(&data), "--out", s(&model)]);
    let test = data.join("test.tsv");
    ok(&["decode", "--config", s(cfg), "--model", s(&model), "--input", s(&test), "--out", s(&dec)]);
    ok(&["eval", "--hyp", s(&dec.join("decode.tsv")), "--refs", s(&test), "--out", s(&ev)]);
    fs::read_to_string(ev.join("metrics.toml")).unwrap()
}

#[test]
fn pipeline_is_deterministic_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = pipeline(&dir.path().join("a"), &cfg, "fpe");
    let b = pipeline(&dir.path().join("b"), &cfg, "fpe");
    assert_eq!(a, b);
    assert!(a.contains("exact_match"));

    let root = dir.path().join("a");
    assert_eq!(entries(&root.join("data")), ["dev.tsv", "run.toml", "stats.md", "test.tsv", "train.tsv"]);
    assert_eq!(entries(&root.join("model")), ["curve.csv", "model.ckpt", "model.toml", "run.toml"]);
    let run = fs::read_to_string(root.join("model/run.toml")).unwrap();
    assert!(run.contains("seed = 3"));
    assert!(run.contains(&format!("version = \"{}\"", env!("CARGO_PKG_VERSION"))));
    assert!(run.contains("[config.model]"));

    let lines = fs::read_to_string(root.join("dec/decode.tsv")).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert!(lines.lines().all(|l| l.split('\t').count() == 5));
}

#[test]
fn sweep_eos_runs_eleven_decodes_and_selects_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path();
    pipeline(root, &cfg, "rel");
    let out = root.join("sweep");
    let o = ok(&["sweep-eos", "--config", s(&cfg), "--model", s(&root.join("model")), "--dev", s(&root.join("data/dev.tsv")), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let betas: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(betas, (0..=10).map(|i| i as f64 * 0.5).collect::<Vec<_>>());
    let sel = fs::read_to_string(out.join("sweep.toml")).unwrap();
    assert_eq!(sel.matches("selected_eos_penalty").count(), 1);
    assert!(sel.contains("decodes = 11"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected eos_penalty"));
}

#[test]
fn abs_incremental_decode_is_refused_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path();
    pipeline(root, &cfg, "abs");
    let out = root.join("refused");
    let o = fracpos(&[
        "decode", "--pe", "abs", "--mode", "incremental", "--model", s(&root.join("model")),
        "--input", s(&root.join("data/test.tsv")), "--out", s(&out),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ABS requires re-encoding"));
    assert!(entries(&out).is_empty());

    // Same refusal when the scheme comes from the trained model itself.
    let o = fracpos(&[
        "decode", "--mode", "incremental", "--model", s(&root.join("model")),
        "--input", s(&root.join("data/test.tsv")), "--out", s(&out),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("ABS requires re-encoding"));
    assert!(entries(&out).is_empty());
}

#[test]
fn bench_and_flops_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path();
    pipeline(root, &cfg, "fpe");
    let model = root.join("model");
    let test = root.join("data/test.tsv");
    let bench = root.join("bench");
    ok(&["bench", "--config", s(&cfg), "--model", s(&model), "--input", s(&test), "--out", s(&bench)]);
    let csv = fs::read_to_string(bench.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "task,scheme,mode,budget,n,latency_ms,steps,len,flops");
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(bench.join("summary.md")).unwrap().contains("| FPE | incremental |"));

    let flops = root.join("flops");
    ok(&["flops", "--config", s(&cfg), "--model", s(&model), "--input", s(&test), "--out", s(&flops)]);
    let csv = fs::read_to_string(flops.join("flops.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("FPE,recompute,12,") && rows[1].starts_with("FPE,incremental,12,"));
}

#[test]
fn bad_invocations_exit_nonzero_and_leave_nothing() {
    assert!(!fracpos(&["frobnicate"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = fracpos(&["train", "--data", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
    assert!(entries(&out).is_empty());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nstepz = 3\n").unwrap();
    let o = fracpos(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(entries(&out).is_empty());
}
