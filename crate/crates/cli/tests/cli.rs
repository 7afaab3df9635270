use std::path::Path;
use std::process::{Command, Output};

use markerprompt_cli::{CHECKPOINT_FILE, CONFIG_FILE, LOSS_FILE, RUN_MANIFEST};
use markerprompt_core::metrics::MetricReport;
use markerprompt_core::scene::{load_dataset, MANIFEST_FILE};
use markerprompt_core::trainer::TrainConfig;

const TINY: &str = r#"
total_iters = 6
scene_token_count = 64
log_every = 2

[encoder]
patch_size = 16
embed_dim = 16
depth = 1
heads = 2
lora_rank = 4

[decoder]
embed_dim = 16
depth = 1
heads = 2
lora_rank = 4
max_seq_len = 512
max_answer_len = 8
"#;

fn markerprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markerprompt"))
        .args(args)
        .env("MARKERPROMPT_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, seed: u64) {
    let p = dir.to_str().unwrap();
    let seed = seed.to_string();
    ok(markerprompt(&[
        "gen",
        "--out",
        p,
        "--scenes",
        "5",
        "--seed",
        &seed,
        "--image-size",
        "128",
    ]));
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("JSON error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn gen_render_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 3);
    let scenes = load_dataset(&data).unwrap();
    assert_eq!(scenes.len(), 5);
    assert!(data.join(RUN_MANIFEST).exists());

    let png = tmp.path().join("render/scene.png");
    ok(markerprompt(&[
        "render",
        "--dataset",
        data.to_str().unwrap(),
        "--scene",
        &scenes[0].scene_id,
        "--out",
        png.to_str().unwrap(),
    ]));
    assert!(png.exists());
    let map = std::fs::read_to_string(png.with_extension("json")).unwrap();
    assert!(map.contains(&format!("{}", scenes[0].detections.len())));

    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let stdout = ok(markerprompt(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    assert!(stdout.contains("iterations: 6"), "{stdout}");
    for f in [CHECKPOINT_FILE, LOSS_FILE, CONFIG_FILE, RUN_MANIFEST] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,lr,loss"));
    assert_eq!(csv.lines().count(), 7);
    let resolved =
        TrainConfig::from_toml(&std::fs::read_to_string(run.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(resolved, TrainConfig::from_toml(TINY).unwrap());

    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let report = tmp.path().join(name);
        ok(markerprompt(&[
            "eval",
            "--dataset",
            data.to_str().unwrap(),
            "--ckpt",
            run.join(CHECKPOINT_FILE).to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]));
        let parsed: MetricReport =
            serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert!((0.0..=1.0).contains(&parsed.accuracy));
        assert!(report.with_extension("predictions.jsonl").exists());
        reports.push(parsed);
    }
    // evaluation of a fixed checkpoint is deterministic
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    gen(&a, 9);
    gen(&b, 9);
    gen(&c, 10);
    let read = |d: &Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(load_dataset(&a).unwrap(), load_dataset(&b).unwrap());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = markerprompt(&[
        "train",
        "--dataset",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(error_line(&out)["exit_code"], out.status.code().unwrap());
}

#[test]
fn bad_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 1);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = markerprompt(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "validation");
}

#[test]
fn diverging_run_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 2);
    let cfg = tmp.path().join("hot.toml");
    let text = TINY.replace(
        "total_iters = 6",
        "total_iters = 40\ninitial_lr = 1e30\ngrad_clip = 0.0",
    );
    std::fs::write(&cfg, text).unwrap();
    let run = tmp.path().join("run");
    let out = markerprompt(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "numerical_abort");
    let iteration = err["iteration"].as_u64().unwrap();
    // the partial loss CSV stops before the aborted iteration
    let csv = std::fs::read_to_string(run.join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().count() as u64, iteration + 1);
    assert!(!run.join(CHECKPOINT_FILE).exists());
}
