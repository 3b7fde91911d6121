use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use csi_llm::checkpoint::load_checkpoint;
use csi_llm::config::ExperimentConfig;
use csi_llm::dataset_io::{load_dataset, write_dataset};
use csi_llm::pipeline::{run_pipeline, PipelineReport, Stage, StageStatus};
use csi_llm::pretrained::synthesize_pretrained;
use csi_llm::report::{self, grid_records, rollout_records, Protocol};
use csi_llm::LabError;
use csi_llm_core::channel::{generate_synthetic_dataset, NormStats};
use csi_llm_core::config::SpeedSpec;
use csi_llm_core::eval::{one_step_eval, rollout, EvalSettings, Predictor};

#[derive(Parser)]
#[command(name = "csi-llm", version, about = "CSI channel prediction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML, dotted section keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set hparams.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Re-run stages that already completed.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// Speed in km/h; a comma-separated list draws one per sample.
        #[arg(long, value_delimiter = ',', required = true)]
        speed: Vec<f64>,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate data (if needed) and train into the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = ["pretrained", "random"])]
        init: Option<String>,
        #[arg(long, value_parser = ["csi-llm", "fixed4", "fixed8", "fixed16", "parallel4"])]
        variant: Option<String>,
    },
    /// One-step NMSE grid, from a checkpoint file or the run directory.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Report directory for standalone evaluation.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continuous autoregressive prediction.
    Rollout {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        context: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// First context step (0-based).
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrained-vs-random initialization comparison.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render plots and the summary from a records file.
    Plot {
        #[arg(long)]
        from: PathBuf,
        /// Output directory; defaults to the records file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run pipeline stages in order.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "gen-data,train,eval,rollout,plot"
        )]
        stages: Vec<String>,
    },
    /// Write seeded stand-in pretrained weights in the published layout.
    SynthPretrained {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_cfg(args: &ConfigArgs, extra: &[String]) -> Result<ExperimentConfig, LabError> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    ExperimentConfig::load(args.config.as_deref(), &overrides)
}

fn pipeline(args: &ConfigArgs, extra: &[String], stages: &[Stage]) -> anyhow::Result<()> {
    let cfg = load_cfg(args, extra)?;
    let report = run_pipeline(&cfg, stages, args.force)?;
    print_outcomes(&report);
    Ok(())
}

fn print_outcomes(report: &PipelineReport) {
    for (stage, status) in &report.outcomes {
        let word = match status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "skipped",
        };
        println!("{:<9} {word}", stage.name());
    }
    println!("run directory: {}", report.run_dir.display());
}

fn standalone_data(
    ck: &csi_llm_core::training::Checkpoint<f32>,
    path: &Path,
) -> anyhow::Result<csi_llm_core::channel::ChannelDataset> {
    let ds = load_dataset(path, &ck.scenario)?;
    let stats = ck.norm_stats.clone().unwrap_or_else(NormStats::identity);
    Ok(stats.apply(&ds)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            speed,
            samples,
            seed,
            out,
            cfg,
        } => {
            let base = load_cfg(&cfg, &[])?.scenario;
            let speed = match speed.as_slice() {
                [v] => SpeedSpec::Single(*v),
                list => SpeedSpec::Mixture(list.to_vec()),
            };
            let scenario = csi_llm_core::config::ScenarioConfig {
                seed,
                n_samples: samples,
                ..base
            }
            .with_speed(speed);
            let ds = generate_synthetic_dataset(&scenario, samples)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { cfg, init, variant } => {
            let mut extra = Vec::new();
            if let Some(i) = init {
                extra.push(format!("backbone.init_mode={i}"));
            }
            if let Some(v) = variant {
                extra.push(format!("sweep.variants=[\"{v}\"]"));
            }
            pipeline(&cfg, &extra, &[Stage::GenData, Stage::Train])?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            lengths,
            out,
        } => {
            let extra: Vec<String> = lengths
                .iter()
                .map(|l| {
                    format!(
                        "eval.lengths=[{}]",
                        l.iter()
                            .map(ToString::to_string)
                            .collect::<Vec<_>>()
                            .join(",")
                    )
                })
                .collect();
            match (checkpoint, data) {
                (Some(ckp), Some(data)) => {
                    let exp = load_cfg(&cfg, &extra)?;
                    let ck = load_checkpoint(&ckp)?;
                    let test = standalone_data(&ck, &data)?;
                    let tag = ck.scenario.speed_kmh.tag();
                    let settings = EvalSettings::new(tag, exp.hparams.eval_batch);
                    let anchor = exp.eval.resolved_anchor(ck.hparams.l_m);
                    let mut records = Vec::new();
                    for p in [Predictor::NoPrediction, Predictor::Model(&ck.model)] {
                        let grid = one_step_eval(&p, &test, &exp.eval.lengths, anchor, &settings)?;
                        records.extend(grid_records(&exp.run_id, &grid, Protocol::OneStep));
                    }
                    print!("{}", report::summary(&records));
                    if let Some(out) = out {
                        report::emit_report(&records, &out)?;
                    }
                }
                _ => pipeline(&cfg, &extra, &[Stage::Eval])?,
            }
        }
        Command::Rollout {
            cfg,
            checkpoint,
            data,
            context,
            horizon,
            start,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = context {
                extra.push(format!("eval.rollout_context={c}"));
            }
            if let Some(h) = horizon {
                extra.push(format!("eval.horizon={h}"));
            }
            if let Some(s) = start {
                extra.push(format!("eval.rollout_start={s}"));
            }
            match (checkpoint, data) {
                (Some(ckp), Some(data)) => {
                    let exp = load_cfg(&cfg, &extra)?;
                    let e = &exp.eval;
                    let ck = load_checkpoint(&ckp)?;
                    let test = standalone_data(&ck, &data)?;
                    let settings =
                        EvalSettings::new(ck.scenario.speed_kmh.tag(), exp.hparams.eval_batch);
                    let l_m = ck.hparams.l_m;
                    let mut records = Vec::new();
                    for p in [Predictor::NoPrediction, Predictor::Model(&ck.model)] {
                        let r = rollout(
                            &p,
                            &test,
                            e.rollout_start,
                            e.rollout_context,
                            e.horizon,
                            l_m,
                            &settings,
                        )?;
                        records.extend(rollout_records(&exp.run_id, &r, l_m));
                    }
                    print!("{}", report::summary(&records));
                    if let Some(out) = out {
                        report::emit_report(&records, &out)?;
                    }
                }
                _ => pipeline(&cfg, &extra, &[Stage::Rollout])?,
            }
        }
        Command::Ablate { cfg } => {
            pipeline(&cfg, &[], &[Stage::GenData, Stage::Ablate, Stage::Plot])?
        }
        Command::Plot { from, out } => {
            let records = report::read_records(&from)?;
            if records.is_empty() {
                return Err(
                    LabError::Precondition(format!("{} holds no records", from.display())).into(),
                );
            }
            let dir =
                out.unwrap_or_else(|| from.parent().map(Path::to_path_buf).unwrap_or_default());
            let written = report::write_plots(&records, &dir.join("plots"))?;
            let summary = dir.join("summary.txt");
            std::fs::write(&summary, report::summary(&records))
                .with_context(|| summary.display().to_string())?;
            for p in written {
                println!("{}", p.display());
            }
            println!("{}", summary.display());
        }
        Command::Run { cfg, stages } => {
            let stages = stages
                .iter()
                .map(|s| Stage::parse(s))
                .collect::<Result<Vec<_>, _>>()?;
            pipeline(&cfg, &[], &stages)?;
        }
        Command::SynthPretrained { cfg, out, seed } => {
            let exp = load_cfg(&cfg, &[])?;
            synthesize_pretrained(&out, &exp.backbone, seed)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<LabError>().map_or(1, LabError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
