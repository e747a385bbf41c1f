use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vil_core::ablate::{AblationConfig, AblationRow};
use vil_core::config::TrainConfig;
use vil_core::model::Pooling;
use vil_core::train::METRICS_HEADER;
use vil_core::traversal::BlockDesign;

fn vil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vil"))
        .args(args)
        .output()
        .expect("run vil")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::micro_corners(8, 2);
    cfg.dataset.corners.train_size = 32;
    cfg.dataset.corners.eval_size = 16;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.eval_every = 4;
    cfg
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> String {
    let path = dir.join("train.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn params_of_tiny_preset() {
    let o = vil(&["params", "--preset", "tiny"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("parameters: 6188008"), "{}", stdout(&o));
}

#[test]
fn params_verbose_lists_tensors() {
    let o = vil(&["params", "--preset", "tiny", "--verbose"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("head.weight"), "{out}");
    assert!(out.lines().count() > 20);
}

#[test]
fn flops_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = vil(&["flops", "--preset", "tiny", "--sweep", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("component,count\n"), "{csv}");
    assert!(csv.contains("total,1403174248"), "{csv}");
    let sweep = fs::read_to_string(dir.path().join("chunk_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 197);
}

#[test]
fn flops_rejects_bad_mode() {
    let o = vil(&["flops", "--preset", "tiny", "--mode", "chunkwise:0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let o = vil(&["gradcheck", "--max-per-group", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let o = vil(&["gradcheck", "--max-per-group", "6", "--inject-fault", "mlstm_parallel:1.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains("FAILED"));
}

#[test]
fn gradcheck_rejects_malformed_fault() {
    let o = vil(&["gradcheck", "--inject-fault", "matmul"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn equivalence_pass_and_fail() {
    let o = vil(&["equivalence", "--lens", "8,13", "--dims", "4", "--trials", "3", "--precision", "f64"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("f64 precision"));
    let o = vil(&["equivalence", "--lens", "16", "--dims", "8", "--trials", "2", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = vil(&[
        "bench", "--lens", "16,32", "--dim", "8", "--chunks", "4", "--min-sample-ms", "0", "--out", out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("L,C,mode,median_ms,flops\n"));
    assert_eq!(csv.lines().count(), 7);
    assert!(stdout(&o).contains("timer-resolution"));
}

#[test]
fn bench_requires_repeats() {
    let o = vil(&["bench", "--repeats", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let run = dir.path().join("run");
    let out = run.to_str().unwrap();
    let o = vil(&["train", "--config", &cfg, "--out", out, "--sequential"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER.join(","));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());

    let o = vil(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("eval accuracy"));
}

#[test]
fn train_on_synthesised_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    let data = dir.path().join("data");
    let o = vil(&["synth", "--config", &write_config(dir.path(), &cfg), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("train/images.bin").exists());
    assert!(data.join("eval/labels.txt").exists());

    cfg.dataset.path = Some(data);
    cfg.epochs = 1;
    let path = write_config(dir.path(), &cfg);
    let o = vil(&["train", "--config", &path, "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, format!("learning_rate = 1\n{}", tiny_config().to_toml())).unwrap();
    let o = vil(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("line 1"), "{err}");
}

#[test]
fn missing_config_is_usage_error() {
    let o = vil(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vil(&["train", "--config", "/nonexistent/train.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = tiny_config();
    train.epochs = 1;
    let cfg = AblationConfig {
        seeds: vec![0],
        rows: vec![
            AblationRow {
                design: BlockDesign::uni(),
                pooling: Pooling::Avg,
            },
            AblationRow {
                design: BlockDesign::alternating_bi(),
                pooling: Pooling::Avg,
            },
        ],
        train,
    };
    let path = dir.path().join("ablate.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let out = dir.path().join("out");
    let o = vil(&["ablate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(stdout(&o).contains("alt-bi"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let corners = TrainConfig::load(dir.join("corners.toml")).unwrap();
    assert_eq!(corners.total_steps(), 2000);
    let text = fs::read_to_string(dir.join("ablation.toml")).unwrap();
    let ablation = AblationConfig::from_toml(&text).unwrap();
    assert_eq!(ablation.seeds, [0, 1, 2]);
}
