use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compvae::config::ExperimentConfig;
use compvae::trainer::{read_metrics, METRICS_HEADER};

fn dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compvae"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(d: &Path, cfg: &ExperimentConfig) -> String {
    let p = d.join("config.toml");
    std::fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

/// Trains a tiny run and returns the path of its latest checkpoint.
fn tiny_checkpoint(d: &Path, cfg: ExperimentConfig, iterations: &str) -> String {
    let c = write_config(d, &cfg);
    let out = d.join("run");
    ok(&[
        "--config",
        &c,
        "--output",
        out.to_str().unwrap(),
        "train",
        "--max-iterations",
        iterations,
    ]);
    out.join("checkpoints/latest.safetensors")
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn train_writes_metrics_plot_and_checkpoints() {
    let d = dir("train");
    let out = d.join("run");
    ok(&[
        "--output",
        out.to_str().unwrap(),
        "train",
        "--preset",
        "sine-tiny",
        "--max-iterations",
        "100",
    ]);
    let text = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let rows = read_metrics(&out.join("metrics.tsv")).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.last().unwrap().iteration, 100);
    assert!(rows.iter().all(|r| r.elbo.is_finite()));
    assert!(std::fs::read_to_string(out.join("loss.svg"))
        .unwrap()
        .starts_with("<svg"));
    assert!(out.join("checkpoints/latest.safetensors").exists());
    assert!(out.join("config.toml").exists());
}

#[test]
fn missing_config_fails_naming_the_path() {
    let d = dir("missing");
    let bogus = d.join("nope.toml");
    let out = run(&[
        "--config",
        bogus.to_str().unwrap(),
        "--output",
        d.to_str().unwrap(),
        "train",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn invalid_arguments_exit_nonzero() {
    assert_ne!(run(&["train", "--preset", "huge"]).status.code(), Some(0));
    assert_eq!(
        run(&["--device", "accelerator", "kl-debug"]).status.code(),
        Some(1)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn resume_refuses_a_new_seed() {
    let d = dir("resume_seed");
    let ck = tiny_checkpoint(&d, ExperimentConfig::sine_tiny(), "20");
    let out = run(&["--seed", "4", "resume", &ck]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn compose_is_reproducible_and_order_free_in_single_mode() {
    let d = dir("compose1d");
    let ck = tiny_checkpoint(&d, ExperimentConfig::sine_tiny(), "30");
    let mut archives = Vec::new();
    for (name, labels) in [
        ("a", ["1", "3", "3"]),
        ("b", ["1", "3", "3"]),
        ("c", ["3", "1", "3"]),
    ] {
        let out = d.join(name);
        let mut args = vec![
            "--seed",
            "9",
            "--output",
            out.to_str().unwrap(),
            "compose",
            &ck,
        ];
        args.extend(labels);
        args.extend(["--mode", "single"]);
        ok(&args);
        archives.push(std::fs::read(out.join("compose.safetensors")).unwrap());
        assert!(out.join("whole_1.svg").exists());
    }
    assert_eq!(archives[0], archives[1]);
    assert_eq!(archives[0], archives[2]);

    let inc = d.join("inc");
    ok(&[
        "--output",
        inc.to_str().unwrap(),
        "compose",
        &ck,
        "2",
        "4",
        "5",
    ]);
    for i in 1..=3 {
        assert!(inc.join(format!("part_{i}.svg")).exists());
        assert!(inc.join(format!("whole_{i}.svg")).exists());
    }
    assert!(inc.join("panel.svg").exists());
}

#[test]
fn compose_rejects_labels_of_the_wrong_problem() {
    let d = dir("compose_wrong");
    let ck = tiny_checkpoint(&d, ExperimentConfig::sine_tiny(), "10");
    let out = run(&[
        "--output",
        d.join("o").to_str().unwrap(),
        "compose",
        &ck,
        "red@0.1,0.2",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compose_renders_images_for_the_2d_problem() {
    let d = dir("compose2d");
    let ck = tiny_checkpoint(&d, ExperimentConfig::gradient_tiny(), "10");
    let out = d.join("o");
    ok(&[
        "--output",
        out.to_str().unwrap(),
        "compose",
        &ck,
        "red@-0.5,0.5",
        "blue@0.5,-0.5",
        "--samples",
        "2",
    ]);
    for f in [
        "part_1.png",
        "part_2.png",
        "whole_1.png",
        "whole_2.png",
        "panel.png",
    ] {
        let img = image::open(out.join(f)).unwrap();
        assert!(img.width() >= 32 && img.height() >= 32, "{f}");
    }
}

#[test]
fn eval_without_checkpoint_runs_the_kl_oracle() {
    let d = dir("eval_kl");
    let stdout = ok(&[
        "--output",
        d.to_str().unwrap(),
        "eval",
        "--suite",
        "kl-oracle",
        "--mc-samples",
        "20000",
    ]);
    assert!(stdout.contains("KL oracle"));
    let report = std::fs::read_to_string(d.join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 8);
    for line in report.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["probe"], "kl_oracle");
    }
    assert!(d.join("summary.txt").exists());
}

#[test]
fn eval_amplitude_on_the_ground_truth_generator() {
    let d = dir("eval_amp");
    let stdout = ok(&[
        "--output",
        d.to_str().unwrap(),
        "eval",
        "--suite",
        "amplitude",
        "--ks",
        "1,4,8",
        "--trials",
        "50",
    ]);
    assert!(stdout.contains("strictly increasing: true"), "{stdout}");
}

#[test]
fn eval_checks_suite_applicability() {
    let d = dir("eval_color");
    let ck = tiny_checkpoint(&d, ExperimentConfig::sine_tiny(), "10");
    let out = run(&[
        "--output",
        d.join("o").to_str().unwrap(),
        "eval",
        "--checkpoint",
        &ck,
        "--suite",
        "color",
    ]);
    assert_eq!(out.status.code(), Some(1));
    ok(&[
        "--output",
        d.join("f").to_str().unwrap(),
        "eval",
        "--checkpoint",
        &ck,
        "--suite",
        "freq",
        "--trials",
        "5",
    ]);
}

#[test]
fn kl_debug_prints_a_comparison() {
    let stdout = ok(&[
        "--seed",
        "2",
        "kl-debug",
        "--k",
        "2",
        "--d",
        "2",
        "--samples",
        "5000",
    ]);
    assert!(!stdout.trim().is_empty());
    assert_eq!(
        stdout,
        ok(&[
            "--seed",
            "2",
            "kl-debug",
            "--k",
            "2",
            "--d",
            "2",
            "--samples",
            "5000"
        ])
    );
}
