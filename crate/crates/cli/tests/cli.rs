use std::path::Path;
use std::process::{Command, Output};

fn gba_lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gba-lab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn quad_config(mode: &str, steps: u64, eta: f64) -> String {
    format!(
        r#"
[model]
kind = "quadratic"
dim = 8

[mode]
{mode}

[run]
steps = {steps}
eta = {eta}
seeds = [3]
eval_every = 1
log_norms = true
"#
    )
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn fresh_sync_run_writes_one_metrics_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sync.toml", &quad_config("kind = \"sync\"\nworkers = 4\nlocal_batch = 8", 200, 0.05));
    let o = gba_lab(&["train", "--config", "sync.toml", "--out", "runs"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(d.join("runs/sync-seed3.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 201);
    assert!(d.join("runs/sync-seed3.trace.jsonl").exists());
    assert!(d.join("runs/sync-seed3.ckpt").exists());

    let o = gba_lab(&["report", "--out", "runs"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("sync-seed3.trace.jsonl,sync,200,"), "{}", stdout(&o));
}

#[test]
fn continuation_into_gba_derives_the_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sync.toml", &quad_config("kind = \"sync\"\nworkers = 32\nlocal_batch = 40000", 3, 0.05));
    let o = gba_lab(&["train", "--config", "sync.toml", "--out", "."], d);
    assert!(o.status.success(), "{}", stderr(&o));

    write(d, "gba.toml", &quad_config("kind = \"gba\"\nlocal_batch = 12800", 2, 0.05));
    let o = gba_lab(&["train", "--config", "gba.toml", "--out", ".", "--from", "sync-seed3.ckpt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("steps 3..5"), "{}", stdout(&o));
    let ckpt = std::fs::read_to_string(d.join("gba-seed3.ckpt")).unwrap();
    assert!(ckpt.contains(r#""kind":"gba","buffer":100"#), "{}", &ckpt[..400.min(ckpt.len())]);

    let o = gba_lab(
        &[
            "train",
            "--config",
            "gba.toml",
            "--out",
            ".",
            "--from",
            "sync-seed3.ckpt",
            "--mode-override",
            r#"{ kind = "gba", local_batch = 12801 }"#,
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not divisible"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 5, 0.05).replace("eta = 0.05", "eta = 0.05\nmomentum = 0.9");
    write(d, "bad.toml", &bad);
    let o = gba_lab(&["train", "--config", "bad.toml"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));

    write(d, "ok.toml", &quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 5, 0.05));
    std::fs::write(d.join("broken.ckpt"), "{\"format\":\"gba-lab-checkpoint\"").unwrap();
    let o = gba_lab(&["train", "--config", "ok.toml", "--from", "broken.ckpt"], d);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bounds_reports_caps_and_fails_on_violation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "ok.toml", &quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 50, 0.05));
    let o = gba_lab(&["bounds", "--config", "ok.toml", "--out", "b"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("step cap        5.000000e-1"), "{text}");
    assert!(text.contains("gamma'=1.500000"), "{text}");
    assert!(text.contains("PASS"), "{text}");
    assert!(d.join("b/bounds.json").exists());

    write(d, "hot.toml", &quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 50, 0.8));
    let o = gba_lab(&["bounds", "--config", "hot.toml", "--out", "b"], d);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("VIOLATED"));
}

#[test]
fn analyses_run_from_trace_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sync.toml", &quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 40, 0.05));
    assert!(gba_lab(&["train", "--config", "sync.toml", "--out", "."], d).status.success());
    let o = gba_lab(
        &[
            "analyze",
            "grad-norm-dist",
            "--trace",
            "sync-seed3.trace.jsonl",
            "--trace",
            "sync-seed3.trace.jsonl",
            "--out",
            "a",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let ks = std::fs::read_to_string(d.join("a/ks-distance.csv")).unwrap();
    assert_eq!(ks.lines().nth(1).unwrap(), "sync-seed3,0,0");

    let o = gba_lab(&["analyze", "staleness", "--trace", "sync-seed3.trace.jsonl", "--out", "a"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean staleness 0.0000"));

    let plain = quad_config("kind = \"sync\"\nworkers = 2\nlocal_batch = 4", 10, 0.05).replace("log_norms = true", "");
    write(d, "plain.toml", &plain);
    assert!(gba_lab(&["train", "--config", "plain.toml", "--out", "p"], d).status.success());
    let o = gba_lab(&["analyze", "grad-norm-dist", "--trace", "p/sync-seed3.trace.jsonl"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("logging not enabled"), "{}", stderr(&o));
}

#[test]
fn gen_data_and_id_histogram_for_ctr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "ctr.toml",
        r#"
[model]
kind = "logistic-ctr"

[data]
days = 4

[data.ctr]
num_samples = 400
dense_dim = 2
ids_per_sample = 3
teacher_seed = 1
zipf = { exponent = 1.2, vocab = 100 }

[mode]
kind = "sync"
workers = 2
local_batch = 10

[run]
epochs = 1
eta = 0.5
"#,
    );
    let o = gba_lab(&["gen-data", "--config", "ctr.toml", "--out", "data"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let day0 = std::fs::read_to_string(d.join("data/day0.txt")).unwrap();
    assert_eq!(day0.lines().count(), 101);

    let o = gba_lab(&["analyze", "id-histogram", "--config", "ctr.toml", "--out", "h"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = std::fs::read_to_string(d.join("h/id-histogram.csv")).unwrap();
    let counts: Vec<u64> = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));

    let o = gba_lab(&["train", "--config", "ctr.toml", "--out", "t"], d);
    assert!(o.status.success(), "{}", stderr(&o));
}
