use std::path::Path;
use std::process::{Command, Output};

use dipp_core::verify::CheckReport;
use dipp_harness::config::ExperimentConfig;
use dipp_harness::eval::EvalReport;

fn dipp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipp")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.join("run");
    cfg.network.hidden = vec![8];
    cfg.reference.steps = 40;
    cfg.reference.batch = 16;
    cfg.distill.steps = 10;
    cfg.distill.batch = 16;
    cfg.align.steps = 10;
    cfg.align.batch = 16;
    cfg.align.alpha_rew = 1.0;
    cfg.eval.samples = 300;
    let path = dir.join("c.toml");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn full_workflow_through_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");

    let out = dipp(&["align", "--config", c]);
    assert_eq!(out.status.code(), Some(2), "align before distill must fail");
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain-ref"));

    for args in [vec!["pretrain-ref", "--config", c], vec!["distill", "--config", c]] {
        let out = dipp(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dipp(&["align", "--config", c, "--alpha-rew", "10", "--steps", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = ExperimentConfig::load(&run.join("align_config.toml")).unwrap();
    assert_eq!(saved.align.alpha_rew, 10.0);
    assert_eq!(saved.align.steps, 5);

    let ckpt = run.join("distill_generator.ckpt");
    let out = dipp(&["eval", "--config", c, "--ckpt", ckpt.to_str().unwrap(), "--samples", "200"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: EvalReport = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.samples, 200);
    assert!(report.mean_reward.is_some());

    let out = dipp(&["plot-data", run.join("align_metrics.csv").to_str().unwrap(), "--columns", "step,ta_loss"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("step,ta_loss"));
    // header, first and last trace rows, evaluation row
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn eval_without_generator_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dipp(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("v");
    let out = dipp(&["verify", "--check", "theorem3-cfg-identity", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let reports: Vec<CheckReport> = serde_json::from_slice(&std::fs::read(out_dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].pass);

    let bad = dipp(&["verify", "--check", "no-such-check", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}
