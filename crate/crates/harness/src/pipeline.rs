//! The stage driver: pretrain-ref, distill, align, eval and verify.
//!
//! The in-memory functions (`train_reference`, `distill`, `align`) do the
//! work; the `run_*` functions wrap them with checkpoint and metrics files in
//! the output directory.

use std::path::{Path, PathBuf};

use dipp_core::align::{diff_instruct_pretrain, dipp_align, AlignState};
use dipp_core::diffusion::{dsm_train, Denoiser};
use dipp_core::generator::OneStepGenerator;
use dipp_core::nn::{Activation, AdamConfig, AdamState};
use dipp_core::verify::{self, CheckReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Architecture, Checkpoint, ModelKind};
use crate::config::{ExperimentConfig, Stage};
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{eval_generator, EvalReport};
use crate::metrics::{thin, write_metrics_csv, MetricRecord};

pub const REFERENCE_CKPT: &str = "reference.ckpt";
pub const REFERENCE_METRICS: &str = "reference_metrics.csv";
pub const DISTILL_GENERATOR_CKPT: &str = "distill_generator.ckpt";
pub const DISTILL_TA_CKPT: &str = "distill_ta.ckpt";
pub const DISTILL_METRICS: &str = "distill_metrics.csv";
pub const ALIGN_GENERATOR_CKPT: &str = "align_generator.ckpt";
pub const ALIGN_TA_CKPT: &str = "align_ta.ckpt";
pub const ALIGN_METRICS: &str = "align_metrics.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_METRICS: &str = "eval_metrics.csv";
pub const VERIFY_JSON: &str = "verify.json";

/// Architecture the config implies; `sigma_init` is zero for non-generators.
pub fn expected_architecture(cfg: &ExperimentConfig, generator: bool) -> Architecture {
    let (dim, nc) = (cfg.mixture.dim, cfg.mixture.n_conditions());
    let mut widths = vec![Denoiser::input_width(dim, nc)];
    widths.extend_from_slice(&cfg.network.hidden);
    widths.push(dim);
    Architecture {
        dim,
        n_conditions: nc,
        sigma_data: cfg.network.sigma_data,
        sigma_init: if generator { cfg.network.sigma_init } else { 0.0 },
        activation: Activation::Tanh,
        widths,
    }
}

/// DSM training of the reference denoiser. Returns the model and its loss
/// trace.
pub fn train_reference(cfg: &ExperimentConfig) -> Result<(Denoiser, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Reference));
    let mix = &cfg.mixture;
    let mut model = Denoiser::new(mix.dim, mix.n_conditions(), &cfg.network.hidden, cfg.network.sigma_data, &mut rng)?;
    let adam_cfg = AdamConfig {
        lr: cfg.reference.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.net().num_params())?;
    let trace = dsm_train(&mut model, mix, &cfg.time, &mut adam, &cfg.dsm_config(), &mut rng)?;
    Ok((model, trace))
}

/// Diff-Instruct pre-training of a one-step generator from the reference.
pub fn distill(cfg: &ExperimentConfig, reference: &Denoiser) -> Result<AlignState> {
    Ok(diff_instruct_pretrain(reference, cfg.network.sigma_init, &cfg.align_config(Stage::Distill)?)?)
}

/// Reward alignment starting from `base`.
pub fn align(cfg: &ExperimentConfig, reference: &Denoiser, base: &OneStepGenerator) -> Result<AlignState> {
    Ok(dipp_align(base, reference, Some(&cfg.reward), &cfg.align_config(Stage::Align)?)?)
}

pub fn evaluate(cfg: &ExperimentConfig, generator: &OneStepGenerator, samples: usize) -> Result<EvalReport> {
    eval_generator(generator, &cfg.mixture, Some(&cfg.reward), samples, cfg.stage_seed(Stage::Eval))
}

fn prepare_out(cfg: &ExperimentConfig, stage: &str) -> Result<PathBuf> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    cfg.save(&out.join(format!("{stage}_config.toml")))?;
    Ok(out)
}

fn load_reference(cfg: &ExperimentConfig) -> Result<Denoiser> {
    let path = cfg.out_dir.join(REFERENCE_CKPT);
    if !path.exists() {
        return Err(HarnessError::Usage(format!(
            "{} not found; run pretrain-ref first",
            path.display()
        )));
    }
    let ck = Checkpoint::load_expecting(&path, &[ModelKind::Reference], Some(&cfg.stage_hash(Stage::Reference)))?;
    ck.check_architecture(&expected_architecture(cfg, false)).map_err(|e| with_path(e, &path))?;
    ck.to_denoiser()
}

fn with_path(e: HarnessError, path: &Path) -> HarnessError {
    match e {
        HarnessError::Checkpoint { reason, .. } => HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

/// Training trace rows, thinned, followed by one evaluation row.
fn stage_records(cfg: &ExperimentConfig, state: &AlignState, report: &EvalReport) -> Vec<MetricRecord> {
    let mut rows: Vec<MetricRecord> = thin(&state.trace, cfg.eval.log_every).iter().map(MetricRecord::from).collect();
    rows.push(report.record(state.step as u64));
    rows
}

pub fn run_pretrain_ref(cfg: &ExperimentConfig) -> Result<Denoiser> {
    let out = prepare_out(cfg, "reference")?;
    let (model, trace) = train_reference(cfg)?;
    let hash = cfg.stage_hash(Stage::Reference);
    Checkpoint::from_denoiser(ModelKind::Reference, &model, trace.len() as u64, hash).save(&out.join(REFERENCE_CKPT))?;
    let rows: Vec<MetricRecord> = thin(&trace.iter().copied().enumerate().collect::<Vec<_>>(), cfg.eval.log_every)
        .into_iter()
        .map(|(step, loss)| MetricRecord {
            step: step as u64,
            dsm_loss: Some(loss),
            ..MetricRecord::default()
        })
        .collect();
    if !rows.is_empty() {
        write_metrics_csv(&rows, &out.join(REFERENCE_METRICS))?;
    }
    Ok(model)
}

pub fn run_distill(cfg: &ExperimentConfig) -> Result<AlignState> {
    let reference = load_reference(cfg)?;
    let out = prepare_out(cfg, "distill")?;
    let state = distill(cfg, &reference)?;
    let hash = cfg.stage_hash(Stage::Distill);
    let step = state.step as u64;
    let ema = state.ema_generator();
    Checkpoint::from_generator(ModelKind::GeneratorEma, &ema, step, hash).save(&out.join(DISTILL_GENERATOR_CKPT))?;
    Checkpoint::from_denoiser(ModelKind::Ta, &state.ta, step, hash).save(&out.join(DISTILL_TA_CKPT))?;
    let report = evaluate(cfg, &ema, cfg.eval.samples)?;
    write_metrics_csv(&stage_records(cfg, &state, &report), &out.join(DISTILL_METRICS))?;
    Ok(state)
}

pub fn run_align(cfg: &ExperimentConfig) -> Result<AlignState> {
    let reference = load_reference(cfg)?;
    let base_path = cfg.out_dir.join(DISTILL_GENERATOR_CKPT);
    if !base_path.exists() {
        return Err(HarnessError::Usage(format!(
            "{} not found; align starts from a distilled generator, run distill first",
            base_path.display()
        )));
    }
    let ck = Checkpoint::load_expecting(&base_path, &[ModelKind::GeneratorEma], Some(&cfg.stage_hash(Stage::Distill)))?;
    ck.check_architecture(&expected_architecture(cfg, true)).map_err(|e| with_path(e, &base_path))?;
    let base = ck.to_generator()?;

    let out = prepare_out(cfg, "align")?;
    let state = align(cfg, &reference, &base)?;
    let hash = cfg.stage_hash(Stage::Align);
    let step = state.step as u64;
    let ema = state.ema_generator();
    Checkpoint::from_generator(ModelKind::GeneratorEma, &ema, step, hash).save(&out.join(ALIGN_GENERATOR_CKPT))?;
    Checkpoint::from_denoiser(ModelKind::Ta, &state.ta, step, hash).save(&out.join(ALIGN_TA_CKPT))?;
    let report = evaluate(cfg, &ema, cfg.eval.samples)?;
    write_metrics_csv(&stage_records(cfg, &state, &report), &out.join(ALIGN_METRICS))?;
    Ok(state)
}

/// Evaluates `ckpt`, or the aligned generator in the output directory.
pub fn run_eval(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<EvalReport> {
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(ALIGN_GENERATOR_CKPT));
    if !path.exists() {
        return Err(HarnessError::Usage(format!(
            "generator checkpoint {} not found; run align or pass --ckpt",
            path.display()
        )));
    }
    let ck = Checkpoint::load_expecting(&path, &[ModelKind::Generator, ModelKind::GeneratorEma], None)?;
    ck.check_architecture(&expected_architecture(cfg, true)).map_err(|e| with_path(e, &path))?;
    let generator = ck.to_generator()?;
    let report = evaluate(cfg, &generator, cfg.eval.samples)?;
    let out = prepare_out(cfg, "eval")?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let json_path = out.join(EVAL_JSON);
    std::fs::write(&json_path, json).map_err(io_err(&json_path))?;
    write_metrics_csv(&[report.record(ck.step)], &out.join(EVAL_METRICS))?;
    Ok(report)
}

/// Runs the named identity checks (all of them when `names` is empty) and
/// writes the report.
pub fn run_verify(seed: u64, names: &[String], out: &Path) -> Result<Vec<CheckReport>> {
    let reports: Vec<CheckReport> = verify::run_all(seed)?;
    let known: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
        return Err(HarnessError::Usage(format!("unknown check '{bad}', expected one of {known:?}")));
    }
    let reports: Vec<CheckReport> =
        reports.into_iter().filter(|r| names.is_empty() || names.contains(&r.name)).collect();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(VERIFY_JSON);
    std::fs::write(&path, serde_json::to_string_pretty(&reports).expect("reports serialize")).map_err(io_err(&path))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = out.to_path_buf();
        cfg.network.hidden = vec![8];
        cfg.reference.steps = 30;
        cfg.reference.batch = 16;
        cfg.distill.steps = 10;
        cfg.distill.batch = 16;
        cfg.align.steps = 10;
        cfg.align.batch = 16;
        cfg.eval.samples = 150;
        cfg.eval.log_every = 4;
        cfg
    }

    #[test]
    fn stages_enforce_order() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        assert!(matches!(run_distill(&cfg), Err(HarnessError::Usage(_))));
        assert!(matches!(run_eval(&cfg, None), Err(HarnessError::Usage(_))));
        run_pretrain_ref(&cfg).unwrap();
        assert!(matches!(run_align(&cfg), Err(HarnessError::Usage(_))));
        run_distill(&cfg).unwrap();
        run_align(&cfg).unwrap();
        let report = run_eval(&cfg, None).unwrap();
        assert_eq!(report.samples, 150);
        for f in [REFERENCE_METRICS, DISTILL_METRICS, ALIGN_METRICS, EVAL_METRICS, EVAL_JSON, ALIGN_TA_CKPT] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn mismatched_hash_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        run_pretrain_ref(&cfg).unwrap();
        run_distill(&cfg).unwrap();

        let mut other = cfg.clone();
        other.distill.alpha_cfg = 2.0;
        let err = run_align(&other).unwrap_err();
        assert!(matches!(err, HarnessError::Checkpoint { .. }), "{err}");

        let mut reseeded = cfg.clone();
        reseeded.seed = 11;
        assert!(matches!(run_distill(&reseeded), Err(HarnessError::Checkpoint { .. })));

        let mut aligned = cfg.clone();
        aligned.align.alpha_rew = 3.0;
        run_align(&aligned).unwrap();
    }

    #[test]
    fn eval_rejects_non_generator() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        run_pretrain_ref(&cfg).unwrap();
        let err = run_eval(&cfg, Some(&dir.path().join(REFERENCE_CKPT))).unwrap_err();
        assert!(err.to_string().contains("reference"), "{err}");
    }
}
