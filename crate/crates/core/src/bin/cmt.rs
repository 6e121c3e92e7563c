use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cmt_core::detector::{decode, predict, DecodeConfig, Detection};
use cmt_core::evaluation::{draw_detections, evaluate, evaluate_labeled, EvalResult};
use cmt_core::selfcheck::{render_table, run_selfcheck, SelfcheckOptions};
use cmt_core::synth_data::io::{load_dataset, manifest_hash, write_dataset, write_png};
use cmt_core::synth_data::{generate_dataset, Dataset, DatasetConfig, DomainParams, GenConfig};
use cmt_core::trainer::{
    ablate, noise_sweep, run_with, write_ablation_csv, write_noise_csv, BurnInCache, Checkpoint,
    MetricLog, RunSummary, TrainConfig,
};
use cmt_core::{CmtError, Result};

#[derive(Parser)]
#[command(
    name = "cmt",
    version,
    about = "Contrastive mean-teacher adaptation on a synthetic fog benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source/target train and eval splits.
    GenData(GenDataArgs),
    /// Burn-in plus adaptation; writes metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the result as JSON.
    Eval(EvalArgs),
    /// Baseline vs full method across pseudo-label noise fractions.
    SweepNoise(SweepArgs),
    /// Contrast-off baseline plus the class-based / multi-scale grid.
    Ablate(SweepArgs),
    /// Gradient checks and oracle comparisons.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training scenes per domain.
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    #[arg(long, default_value_t = 100)]
    eval_scenes: usize,
    #[arg(long, default_value_t = 0.5)]
    fog: f64,
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
    #[arg(long, default_value_t = 0.0)]
    brightness: f64,
    #[arg(long, default_value_t = 0.02)]
    noise_std: f64,
}

/// Config file plus flag overrides shared by training commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file with TrainConfig fields; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced desk profile instead of the defaults.
    #[arg(long, conflicts_with = "acceptance")]
    desk: bool,
    /// Start from the profile the acceptance suite trains with.
    #[arg(long)]
    acceptance: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    burn_in_iters: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    lambda_contrast: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None if self.desk => TrainConfig::desk(),
            None if self.acceptance => TrainConfig::acceptance(),
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.burn_in_iters {
            cfg.burn_in_iters = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = self.lambda_contrast {
            cfg.lambda_contrast = v;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    no_contrastive: bool,
    #[arg(long)]
    no_class_contrast: bool,
    #[arg(long)]
    single_scale: bool,
    #[arg(long)]
    no_cutout_exclusion: bool,
    /// Fraction of pseudo-labels whose class is redrawn each step.
    #[arg(long)]
    noise: Option<f64>,
    /// Also write a checkpoint at every evaluation.
    #[arg(long)]
    checkpoint_every_eval: bool,
    /// Write teacher detections on the target eval split as PNGs.
    #[arg(long)]
    dump_detections: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Target,
    Source,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "teacher")]
    model: Model,
    #[arg(long, value_enum, default_value = "target")]
    split: Split,
    /// Directory for PNGs with detections drawn on the evaluated images.
    #[arg(long)]
    dump_detections: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Noise fractions (sweep-noise only).
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
    fractions: Vec<f64>,
    /// Independent runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, hide = true)]
    perturb_roi_align: bool,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'static str,
    config: &'a TrainConfig,
    dataset: String,
    dataset_manifest_sha256: String,
    artifacts: Vec<String>,
    started_unix: u64,
    finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn exit_code(err: &CmtError) -> u8 {
    match err {
        CmtError::ConfigInvalid(_) => 2,
        CmtError::Io { .. } | CmtError::Format { .. } => 3,
        CmtError::Divergence { .. } => 4,
        _ => 1,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CmtError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CmtError::io(path, e))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(manifest).expect("manifest serializes"),
    )
}

fn dump(dir: &Path, images: &[cmt_core::numerics::Tensor], dets: &[Vec<Detection>]) -> Result<()> {
    create_dir(dir)?;
    for (i, (img, d)) in images.iter().zip(dets).enumerate() {
        write_png(&dir.join(format!("{i:04}.png")), &draw_detections(img, d))?;
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = DatasetConfig {
        seed: args.seed,
        train_scenes: args.scenes,
        eval_scenes: args.eval_scenes,
        generator: GenConfig {
            domain: DomainParams {
                fog_density: args.fog,
                blur_sigma: args.blur,
                brightness_shift: args.brightness,
                noise_std: args.noise_std,
            },
            ..GenConfig::default()
        },
    };
    cfg.generator.domain.validate()?;
    let ds = generate_dataset(&cfg)?;
    write_dataset(&ds, &args.out)?;
    println!("{}", manifest_hash(&args.out)?);
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let started = now();
    let mut cfg = args.config.resolve()?;
    cfg.contrastive_enabled &= !args.no_contrastive;
    cfg.class_based_contrast &= !args.no_class_contrast;
    cfg.multi_scale &= !args.single_scale;
    cfg.cutout_exclusion &= !args.no_cutout_exclusion;
    if let Some(f) = args.noise {
        cfg.noise_fraction = f;
    }
    cfg.validate()?;
    let data = load_dataset(&args.data)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml_string())?;

    let mut artifacts = vec![
        "config.toml".to_string(),
        "metrics.jsonl".into(),
        "burn_in.jsonl".into(),
    ];
    let mut on_eval =
        |state: &cmt_core::trainer::TrainState, e: &cmt_core::trainer::EvalRecord| -> Result<()> {
            eprintln!("iter {:>6}  teacher mAP50 {:.4}", e.iter, e.map50);
            if args.checkpoint_every_eval {
                let name = format!("checkpoint_{:06}.json", e.iter);
                Checkpoint {
                    config: cfg.clone(),
                    iter: state.iter,
                    student: state.student.clone(),
                    teacher: state.teacher.clone(),
                }
                .save(&args.out.join(&name))?;
                artifacts.push(name);
            }
            Ok(())
        };
    let out = run_with(&cfg, &data, &mut on_eval)?;
    out.log.write_jsonl(&args.out.join("metrics.jsonl"))?;
    let burn: String = out
        .burn_in
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    write_text(&args.out.join("burn_in.jsonl"), &burn)?;
    out.checkpoint(&cfg)
        .save(&args.out.join("checkpoint_final.json"))?;
    artifacts.push("checkpoint_final.json".into());
    if args.dump_detections {
        let dets = data
            .target_eval
            .images
            .iter()
            .map(|img| {
                Ok(decode(
                    &predict(img, &out.state.teacher, &cfg.detector)?,
                    &DecodeConfig::EVAL,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        dump(
            &args.out.join("detections"),
            &data.target_eval.images,
            &dets,
        )?;
        artifacts.push("detections/".into());
    }
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "train",
            config: &cfg,
            dataset: args.data.display().to_string(),
            dataset_manifest_sha256: manifest_hash(&args.data)?,
            artifacts,
            started_unix: started,
            finished_unix: now(),
        },
    )
}

fn eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let params = match args.model {
        Model::Teacher => &ckpt.teacher,
        Model::Student => &ckpt.student,
    };
    let det_cfg = &ckpt.config.detector;
    let result: EvalResult = match args.split {
        Split::Target => evaluate(params, det_cfg, &data.target_eval)?,
        Split::Source => evaluate_labeled(params, det_cfg, &data.source_eval)?,
    };
    if let Some(dir) = &args.dump_detections {
        let images = match args.split {
            Split::Target => &data.target_eval.images,
            Split::Source => &data.source_eval.images,
        };
        let dets = images
            .iter()
            .map(|img| Ok(decode(&predict(img, params, det_cfg)?, &DecodeConfig::EVAL)))
            .collect::<Result<Vec<_>>>()?;
        dump(dir, images, &dets)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&result).expect("result serializes")
    );
    Ok(())
}

fn write_runs(out: &Path, runs: &[RunSummary]) -> Result<Vec<String>> {
    let dir = out.join("runs");
    create_dir(&dir)?;
    let mut names = Vec::with_capacity(runs.len());
    for r in runs {
        let name = format!("runs/{}.jsonl", r.label);
        MetricLog::write_jsonl(&r.log, &out.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

fn sweep(args: SweepArgs, noise: bool) -> Result<()> {
    let started = now();
    let cfg = args.config.resolve()?;
    cfg.validate()?;
    if args.seeds.is_empty() {
        return Err(CmtError::ConfigInvalid(
            "--seeds must name at least one seed".into(),
        ));
    }
    let data: Dataset = load_dataset(&args.data)?;
    create_dir(&args.out)?;
    let cache = BurnInCache::new();
    let (csv_name, runs) = if noise {
        let (rows, runs) =
            noise_sweep(&cfg, &data, &args.fractions, &args.seeds, args.jobs, &cache)?;
        write_noise_csv(&args.out.join("noise_sweep.csv"), &args.seeds, &rows)?;
        ("noise_sweep.csv", runs)
    } else {
        let (rows, runs) = ablate(&cfg, &data, &args.seeds, args.jobs, &cache)?;
        write_ablation_csv(&args.out.join("ablation.csv"), &args.seeds, &rows)?;
        ("ablation.csv", runs)
    };
    for r in &runs {
        eprintln!(
            "{:<32} source-only {:.4}  final {:.4}",
            r.label, r.source_only_map, r.final_map
        );
    }
    let mut artifacts = vec![csv_name.to_string()];
    artifacts.extend(write_runs(&args.out, &runs)?);
    write_manifest(
        &args.out,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: if noise { "sweep-noise" } else { "ablate" },
            config: &cfg,
            dataset: args.data.display().to_string(),
            dataset_manifest_sha256: manifest_hash(&args.data)?,
            artifacts,
            started_unix: started,
            finished_unix: now(),
        },
    )?;
    println!("{}", args.out.join(csv_name).display());
    Ok(())
}

fn selfcheck(args: SelfcheckArgs) -> ExitCode {
    let results = run_selfcheck(SelfcheckOptions {
        perturb_roi_align: args.perturb_roi_align,
    });
    print!("{}", render_table(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failed: {}", failed.join(", "));
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepNoise(a) => sweep(a, true),
        Command::Ablate(a) => sweep(a, false),
        Command::Selfcheck(a) => return selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
