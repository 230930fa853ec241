//! Command implementations behind the `silq` binary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::distill::{self, Corpora, TrainMetrics};
use crate::error::{Result, SilqError};
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{Overrides, RunConfig};
use crate::io::corpus::BatchSampler;
use crate::io::export::{export_verified, ExportSummary};
use crate::model::{build_quantized_model, eval_perplexity, init_weights, EvalReport, Model};
use crate::params::ParamKind;
use crate::rotation::{self, RotationReport};

/// File written next to command outputs with the resolved configuration.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Parser)]
#[command(name = "silq", version, about = "Desk-scale quantization-aware training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Rescale the learning rate by sqrt(base_steps / steps).
    #[arg(long)]
    pub auto_lr: bool,
}

impl RunArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(
            &self.config,
            Overrides {
                seed: self.seed,
                steps: self.steps,
                auto_lr: self.auto_lr,
            },
        )
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the full-precision teacher on next-token prediction.
    Pretrain(RunArgs),
    /// Build the quantized student from the teacher and initialize step sizes.
    Calibrate(RunArgs),
    /// Distill the calibrated student from the teacher.
    Train(RunArgs),
    /// Held-out perplexity of a checkpoint.
    Eval(RunArgs),
    /// Write the integer artifact after a logit parity check.
    Export(RunArgs),
    /// Rotational versus non-rotational weight change between two checkpoints.
    AnalyzeRotation(RunArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    let (args, name) = match &cli.command {
        Command::Pretrain(a) => (a, "pretrain"),
        Command::Calibrate(a) => (a, "calibrate"),
        Command::Train(a) => (a, "train"),
        Command::Eval(a) => (a, "eval"),
        Command::Export(a) => (a, "export"),
        Command::AnalyzeRotation(a) => (a, "analyze-rotation"),
    };
    let config = args.load()?;
    println!("# {name}: resolved configuration\n{}", config.echo());
    match &cli.command {
        Command::Pretrain(_) => {
            let m = cmd_pretrain(&config)?;
            println!("final loss {:.5} after {} steps", m.tail_loss(1), m.records.len());
        }
        Command::Calibrate(_) => {
            let steps = cmd_calibrate(&config)?;
            for (name, values) in steps {
                println!("{name}\t{}", format_steps(&values));
            }
        }
        Command::Train(_) => {
            let m = cmd_train(&config)?;
            println!(
                "final loss {:.5} after {} steps ({:.1}s)",
                m.tail_loss(1),
                m.records.len(),
                m.wall_clock_secs
            );
        }
        Command::Eval(_) => {
            let r = cmd_eval(&config)?;
            println!("{}", serde_json::to_string(&r).expect("report serializes"));
        }
        Command::Export(_) => {
            let s = cmd_export(&config)?;
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        }
        Command::AnalyzeRotation(_) => {
            let r = cmd_analyze_rotation(&config)?;
            print!("{}", r.to_tsv(&layer_types(&r)));
        }
    }
    Ok(())
}

fn format_steps(values: &[f32]) -> String {
    if values.len() == 1 {
        format!("{:.6e}", values[0])
    } else {
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        format!("{} channels in [{min:.6e}, {max:.6e}]", values.len())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SilqError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| SilqError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SilqError::io(path, e))
}

fn write_echo(dir: &Path, config: &RunConfig) -> Result<()> {
    write_atomic(&dir.join(ECHO_FILE), config.echo().as_bytes())
}

/// Corpora named by the data section.
pub fn load_corpora(config: &RunConfig) -> Result<Corpora> {
    Ok(Corpora {
        pretrain: config.data.pretrain.load()?,
        sft: config.data.sft.load()?,
        heldout: Some(config.data.heldout.load()?),
    })
}

/// Trains a fresh full-precision model and saves it as the teacher.
pub fn cmd_pretrain(config: &RunConfig) -> Result<TrainMetrics> {
    let corpora = load_corpora(config)?;
    let weights = init_weights(&config.model, config.seed)?;
    let mut model = Model::full_precision(config.model.clone(), weights)?;
    let train = config.pretrain.train_config(&config.train);
    let metrics = distill::pretrain(&mut model, &corpora, &train)?;
    Checkpoint::new(model, config.seed).save(&config.paths.teacher)?;
    write_echo(&config.paths.teacher, config)?;
    Ok(metrics)
}

/// Builds and calibrates the student; returns every static step size.
pub fn cmd_calibrate(config: &RunConfig) -> Result<BTreeMap<String, Vec<f32>>> {
    let cal = &config.calibration;
    let teacher = Checkpoint::load(&config.paths.teacher)?.model;
    let corpora = load_corpora(config)?;
    let plan = cal.precision_plan()?;
    let mut student = build_quantized_model(teacher.config.clone(), plan, &teacher.base_weights(), cal.weight_method)?;
    info!("calibration: {} batches x {} samples", cal.batches, cal.batch_size);
    let mut sampler = BatchSampler::new(
        corpora.pretrain,
        corpora.sft,
        config.train.mixture_ratio,
        cal.batch_size,
        cal.seq_len.min(teacher.config.max_seq_len),
        config.seed,
    )?;
    let batches: Vec<Vec<Vec<usize>>> = (0..cal.batches).map(|_| sampler.next_batch().inputs).collect();
    student.calibrate_activations(&batches, cal.act_method, &cal.table()?, cal.percentile_mode)?;
    if !student.all_steps_positive() {
        return Err(SilqError::Input("calibration produced a non-positive step size".into()));
    }
    Checkpoint::new(student.clone(), config.seed).save(&config.paths.calibrated)?;
    write_echo(&config.paths.calibrated, config)?;
    Ok(student
        .quantizers()
        .iter()
        .filter_map(|q| student.step_size(&q.key).map(|s| (q.key.clone(), s.values)))
        .collect())
}

/// Distills the calibrated student, streaming one JSON record per step to
/// the metrics file. A divergence still leaves the records written so far.
pub fn cmd_train(config: &RunConfig) -> Result<TrainMetrics> {
    let teacher = Checkpoint::load(&config.paths.teacher)?.model;
    let mut student = Checkpoint::load(&config.paths.calibrated)?.model;
    let corpora = load_corpora(config)?;
    let metrics_path = &config.paths.metrics;
    if let Some(dir) = metrics_path.parent() {
        fs::create_dir_all(dir).map_err(|e| SilqError::io(dir, e))?;
    }
    let tmp = metrics_path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp).map_err(|e| SilqError::io(&tmp, e))?);
    let result = distill::train_qat_with(&mut student, Some(&teacher), &corpora, &config.train, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| SilqError::io(&tmp, e))
    });
    out.flush().map_err(|e| SilqError::io(&tmp, e))?;
    drop(out);
    fs::rename(&tmp, metrics_path).map_err(|e| SilqError::io(metrics_path, e))?;
    let metrics = result?;
    Checkpoint::new(student, config.seed).save(&config.paths.trained)?;
    write_echo(&config.paths.trained, config)?;
    Ok(metrics)
}

pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    let path = config.paths.eval.as_ref().unwrap_or(&config.paths.trained);
    let model = Checkpoint::load(path)?.model;
    let heldout = config.data.heldout.load()?;
    eval_perplexity(&model, &heldout, config.train.seq_len)
}

pub fn cmd_export(config: &RunConfig) -> Result<ExportSummary> {
    let path = config.paths.export_source.as_ref().unwrap_or(&config.paths.trained);
    let ck = Checkpoint::load(path)?;
    ck.model.plan.validate_deployment()?;
    let summary = export_verified(&ck.model, &config.paths.export, config.seed, config.export.prompt_len)?;
    write_echo(&config.paths.export, config)?;
    Ok(summary)
}

fn layer_types(report: &RotationReport) -> BTreeMap<String, String> {
    report
        .entries
        .iter()
        .map(|e| (e.layer.clone(), rotation::layer_type_of(&e.layer).to_string()))
        .collect()
}

/// Decomposes every linear weight present in both checkpoints and writes
/// the tab-separated report.
pub fn cmd_analyze_rotation(config: &RunConfig) -> Result<RotationReport> {
    let paths = &config.paths;
    let before = Checkpoint::load(paths.rotation_before.as_ref().unwrap_or(&paths.teacher))?.model;
    let after = Checkpoint::load(paths.rotation_after.as_ref().unwrap_or(&paths.trained))?.model;
    let mut entries = Vec::new();
    for p in before.params.iter().filter(|p| p.kind == ParamKind::Weight) {
        let w1 = after
            .params
            .tensor(&p.name)
            .map_err(|_| SilqError::Input(format!("`{}` is missing from the second checkpoint", p.name)))?;
        let special = config.rotation.special_orthogonal;
        if let Some(e) = rotation::decompose(&p.name, &p.tensor, w1, special)? {
            entries.push(e);
        }
    }
    let types: BTreeMap<String, String> = entries
        .iter()
        .map(|e| (e.layer.clone(), rotation::layer_type_of(&e.layer).to_string()))
        .collect();
    let report = rotation::aggregate_report(entries, &types, config.rotation.exclude_both_side)?;
    write_atomic(&paths.report, report.to_tsv(&types).as_bytes())?;
    Ok(report)
}
