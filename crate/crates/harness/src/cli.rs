use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::plot_data;
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "dipp", about = "Reward-aligned one-step generator on a toy mixture benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference denoiser by score matching.
    PretrainRef {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Diff-Instruct pre-training of the one-step generator.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha_cfg: Option<f64>,
    },
    /// Reward alignment of the distilled generator.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        alpha_rew: Option<f64>,
        #[arg(long)]
        alpha_cfg: Option<f64>,
    },
    /// Evaluate a generator checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the gradient-identity checks.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run every check.
        #[arg(long, conflicts_with = "check")]
        all: bool,
        /// Run only the named check (repeatable).
        #[arg(long)]
        check: Vec<String>,
    },
    /// Print selected columns of a metrics CSV.
    PlotData {
        metrics: PathBuf,
        /// Comma-separated column names.
        #[arg(long, value_delimiter = ',', default_value = "step,mean_reward")]
        columns: Vec<String>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Applies flags after the config file so the command line wins.
fn finish(mut cfg: ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::PretrainRef { common, steps } => {
            let cfg = finish(load_config(&common)?, |c| {
                if let Some(s) = steps {
                    c.reference.steps = s;
                }
            })?;
            pipeline::run_pretrain_ref(&cfg)?;
            println!("reference written to {}", cfg.out_dir.join(pipeline::REFERENCE_CKPT).display());
        }
        Command::Distill {
            common,
            steps,
            alpha_cfg,
        } => {
            let cfg = finish(load_config(&common)?, |c| {
                if let Some(s) = steps {
                    c.distill.steps = s;
                }
                if let Some(a) = alpha_cfg {
                    c.distill.alpha_cfg = a;
                }
            })?;
            let state = pipeline::run_distill(&cfg)?;
            println!("distilled {} steps into {}", state.step, cfg.out_dir.display());
        }
        Command::Align {
            common,
            steps,
            alpha_rew,
            alpha_cfg,
        } => {
            let cfg = finish(load_config(&common)?, |c| {
                if let Some(s) = steps {
                    c.align.steps = s;
                }
                if let Some(a) = alpha_rew {
                    c.align.alpha_rew = a;
                }
                if let Some(a) = alpha_cfg {
                    c.align.alpha_cfg = a;
                }
            })?;
            let state = pipeline::run_align(&cfg)?;
            println!("aligned {} steps into {}", state.step, cfg.out_dir.display());
        }
        Command::Eval { common, ckpt, samples } => {
            let cfg = finish(load_config(&common)?, |c| {
                if let Some(n) = samples {
                    c.eval.samples = n;
                }
            })?;
            let report = pipeline::run_eval(&cfg, ckpt.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Verify { seed, out, all, check } => {
            if !all && check.is_empty() {
                return Err(HarnessError::Usage("verify needs --all or at least one --check NAME".into()));
            }
            let out = out.unwrap_or_else(|| ExperimentConfig::default().out_dir);
            let reports = pipeline::run_verify(seed.unwrap_or(0), &check, &out)?;
            println!("{:<28} {:>12} {:>10}  result", "check", "error", "tolerance");
            for r in &reports {
                let verdict = if r.pass { "PASS" } else { "FAIL" };
                println!("{:<28} {:>12.3e} {:>10.1e}  {verdict}", r.name, r.measured_error, r.tolerance);
            }
            if reports.iter().any(|r| !r.pass) {
                return Ok(1);
            }
        }
        Command::PlotData { metrics, columns } => {
            let stdout = std::io::stdout();
            plot_data(Path::new(&metrics), &columns, &mut stdout.lock())?;
        }
    }
    Ok(0)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on a failed stage or check, 2 on a
/// usage or configuration error.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Usage(_) | HarnessError::Config(_) => 2,
                _ => 1,
            }
        }
    }
}
