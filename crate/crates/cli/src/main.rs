//! Single entry point for training, evaluation, attention visualization,
//! and synthetic data generation. Every run directory gets the resolved
//! config and seed so runs can be reproduced bit-for-bit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rolesep_core::arcdata::{family_from_name, parse_task, serialize_task, synth_suite, synth_task, Task};
use rolesep_core::error::Error;
use rolesep_core::infer::{evaluate, export_attention, EvalOptions};
use rolesep_core::mask::Variant;
use rolesep_core::model::{Model, ModelConfig};
use rolesep_core::params::ParamStore;
use rolesep_core::train::{staged_c_to_d, train_offline, TrainConfig, TttStrategy};

#[derive(Parser)]
#[command(name = "rolesep", about = "Role-separated transformer for ARC-style grid tasks")]
struct Cli {
    /// Worker threads for evaluation; 1 keeps runs fully reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a checkpoint offline over a task set.
    Train(TrainArgs),
    /// Score a checkpoint on a task set with voting (optionally, with TTT).
    Eval(EvalArgs),
    /// Export per-layer attention maps for one task.
    Viz(VizArgs),
    /// Generate synthetic tasks as ARC-format JSON files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory of ARC-format task JSON files.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Synthetic family name instead of a task directory.
    #[arg(long)]
    synthetic: Option<String>,
    /// Number of synthetic tasks ("suite" cycles all families).
    #[arg(long, default_value_t = 1)]
    n_tasks: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    steps: Option<u64>,
    /// a, b, c, d, or c-d for the staged schedule.
    #[arg(long)]
    variant: Option<String>,
    /// Extra steps after the mask swap in the c-d schedule.
    #[arg(long, default_value_t = 100)]
    stage2_steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// 0 disables test-time training.
    #[arg(long, default_value_t = 0)]
    ttt: u8,
    #[arg(long, default_value_t = 30)]
    views: usize,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Use trained task embeddings by position instead of the adapted token.
    #[arg(long, default_value_t = false)]
    trained: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// ARC-format task JSON file.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value = "runs/viz")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    family: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/synth")]
    out: PathBuf,
}

/// The resolved, fully serialized run configuration written into every run
/// directory (and into checkpoints).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    seed: u64,
    train: TrainConfig,
    n_views: usize,
}

impl RunConfig {
    fn desk() -> Self {
        RunConfig {
            seed: 0,
            train: TrainConfig::desk(ModelConfig::desk(Variant::D)),
            n_views: 30,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 1 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    } else {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Viz(a) => cmd_viz(a),
        Cmd::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// 2: configuration error; 3: data error; 4: numeric abort.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::NonFiniteGradient(_) | Error::NonFiniteState(_) | Error::NonFiniteLoss(_),
        ) => 4,
        Some(
            Error::MalformedJson(_)
            | Error::GridTooLarge(_)
            | Error::ColorOutOfRange(_)
            | Error::RaggedRows { .. }
            | Error::EmptyRow(_)
            | Error::MissingGroundTruth(_)
            | Error::GridTooLargeForScale2 { .. }
            | Error::Io(_),
        ) => 3,
        Some(_) => 2,
        None => {
            if e.downcast_ref::<std::io::Error>().is_some() {
                3
            } else {
                2
            }
        }
    }
}

fn load_tasks(data: &DataArgs) -> anyhow::Result<Vec<Task>> {
    if let Some(dir) = &data.tasks {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(Error::Io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        if entries.is_empty() {
            anyhow::bail!(Error::MalformedJson(format!("no task files in {}", dir.display())));
        }
        entries
            .iter()
            .map(|p| {
                let id = p.file_stem().unwrap().to_string_lossy().into_owned();
                let text = std::fs::read_to_string(p).map_err(Error::Io)?;
                Ok(parse_task(&text, &id)?)
            })
            .collect()
    } else if let Some(name) = &data.synthetic {
        if name == "suite" {
            Ok(synth_suite(data.n_tasks, data.data_seed, 3, 1))
        } else {
            (0..data.n_tasks)
                .map(|i| {
                    let seed = data.data_seed.wrapping_add(i as u64);
                    let fam = family_from_name(name, seed)?;
                    Ok(synth_task(fam, seed, 3, 1))
                })
                .collect()
        }
    } else {
        anyhow::bail!(Error::ConfigViolation("either --tasks or --synthetic is required".into()))
    }
}

fn write_run_config(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).map_err(Error::Io)?;
    let blob = toml::to_string_pretty(cfg)?;
    std::fs::write(out.join("config.toml"), blob).map_err(Error::Io)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut run = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::Io)?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::ConfigViolation(format!("bad config: {e}")))?
        }
        None => RunConfig::desk(),
    };
    run.seed = args.seed;
    if let Some(s) = args.steps {
        run.train.steps = s;
    }
    if let Some(lr) = args.lr {
        run.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        run.train.batch_size = b;
    }
    let staged = matches!(args.variant.as_deref(), Some("c-d"));
    if let Some(v) = &args.variant {
        if !staged {
            run.train.model.variant = Variant::parse(v).ok_or_else(|| {
                Error::ConfigViolation(format!("unknown variant '{v}'"))
            })?;
        } else {
            run.train.model.variant = Variant::C;
        }
    }
    run.train.model.validate()?;
    run.train.loss.validate(run.train.model.recur_steps)?;
    let tasks = load_tasks(&args.data)?;

    write_run_config(&args.out, &run)?;
    let model = Model::new(run.train.model)?;
    let mut store = model.init_params(run.seed);
    let mut metrics = train_offline(&model, &mut store, &tasks, &run.train, run.seed)?;
    let mut final_cfg = run.clone();
    if staged {
        let (model_d, stage2) =
            staged_c_to_d(&model, &mut store, &tasks, &run.train, args.stage2_steps, run.seed ^ 1)?;
        metrics.rows.extend(stage2.rows);
        final_cfg.train.model = model_d.cfg;
        write_run_config(&args.out, &final_cfg)?;
    }
    std::fs::write(args.out.join("metrics.csv"), metrics.to_csv()).map_err(Error::Io)?;
    let blob = toml::to_string_pretty(&final_cfg)?;
    store.save(&args.out.join("checkpoint.bin"), &blob)?;
    println!(
        "trained {} steps on {} tasks; final train accuracy {:.3}",
        metrics.rows.len(),
        tasks.len(),
        metrics.final_train_acc
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(RunConfig, Model, ParamStore)> {
    let (store, blob) = ParamStore::load(path)?;
    let run: RunConfig = toml::from_str(&blob)
        .map_err(|e| Error::Checkpoint(format!("bad config blob: {e}")))?;
    let model = Model::new(run.train.model)?;
    Ok((run, model, store))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (run, model, store) = load_checkpoint(&args.checkpoint)?;
    let tasks = load_tasks(&args.data)?;
    let ttt = match args.ttt {
        0 => None,
        1 => Some(TttStrategy::ttt1()),
        2 => Some(TttStrategy::ttt2()),
        3 => Some(TttStrategy::ttt3()),
        other => {
            anyhow::bail!(Error::ConfigViolation(format!("--ttt must be 0..=3, got {other}")))
        }
    };
    std::fs::create_dir_all(&args.out).map_err(Error::Io)?;
    let mut summary = String::from("seed,solved,total,pass_at_2\n");
    for seed in 0..args.seeds {
        let opts = EvalOptions {
            n_views: args.views,
            view_seed: seed,
            align: run.train.align,
            ttt,
        };
        let report = evaluate(&model, &store, &tasks, args.trained, &opts, &run.train, seed)?;
        std::fs::write(args.out.join(format!("report_seed{seed}.csv")), report.to_csv())
            .map_err(Error::Io)?;
        summary.push_str(&format!(
            "{seed},{},{},{:.4}\n",
            report.solved,
            report.total,
            report.pass_at_2()
        ));
        println!(
            "seed {seed}: pass@2 {:.3} ({}/{})",
            report.pass_at_2(),
            report.solved,
            report.total
        );
    }
    std::fs::write(args.out.join("summary.csv"), summary).map_err(Error::Io)?;
    Ok(())
}

fn cmd_viz(args: VizArgs) -> anyhow::Result<()> {
    let (_, model, store) = load_checkpoint(&args.checkpoint)?;
    let task = if let Some(p) = &args.task {
        let id = p.file_stem().unwrap().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(p).map_err(Error::Io)?;
        parse_task(&text, &id)?
    } else if let Some(name) = &args.synthetic {
        let fam = family_from_name(name, args.data_seed)?;
        synth_task(fam, args.data_seed, 3, 1)
    } else {
        anyhow::bail!(Error::ConfigViolation("either --task or --synthetic is required".into()))
    };
    let export = export_attention(&model, &store, &task, &args.out)?;
    println!("wrote {} files to {}", export.files.len(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out).map_err(Error::Io)?;
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let task = if args.family == "suite" {
            synth_suite(1, seed, 3, 1).pop().unwrap()
        } else {
            let fam = family_from_name(&args.family, seed)?;
            synth_task(fam, seed, 3, 1)
        };
        let path = args.out.join(format!("{}.json", task.task_id));
        std::fs::write(&path, serialize_task(&task)).map_err(Error::Io)?;
    }
    println!("wrote {} tasks to {}", args.count, args.out.display());
    Ok(())
}
