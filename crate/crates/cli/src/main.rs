#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use contra::dataset::{generate_synthetic, load_dataset, write_dataset, FeatureDataset, GenConfig, Split};
use contra::eval::{
    attention_summary, embed_split, evaluate, evaluate_embeddings, neighbour_similarity_analysis,
    rank_delta_by_word, write_attention_csv, write_neighbour_csv, write_rank_delta_csv, Direction, EvalOptions,
};
use contra::model::{checkpoint_dtype, load_checkpoint, ContextMode, Model};
use contra::trainer::{
    run_ablation, toy_gradcheck, train_to_dir, write_ablation_csv, GridSpec, ToyDims, TrainConfig, BEST_DIR,
    FINAL_DIR, LOG_FILE, REPORT_FILE,
};
use contra::{Error, Result, Scalar};
use manifest::{io_err, RunManifest};
use serde_json::Value;

const GRADCHECK_TOL: f64 = 1e-4;
const ABLATION_CSV: &str = "ablation.csv";

#[derive(Parser)]
#[command(name = "contra", version, about = "Context-window clip-sentence retrieval: data, training, evaluation")]
struct Cli {
    /// Worker threads; falls back to CONTRA_THREADS, then 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size model and schedule.
    Full,
    /// Small model sized for the default synthetic dataset.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        clips_per_video: Option<usize>,
        #[arg(long)]
        test_clips: Option<usize>,
        #[arg(long)]
        dv: Option<usize>,
        #[arg(long)]
        dw: Option<usize>,
        #[arg(long)]
        topics: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        optional_steps: Option<usize>,
        #[arg(long)]
        ambiguity: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its log, checkpoints and report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with (partial) training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        context: Option<ContextMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-path override such as `loss.lambda_uni=12`; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value_t = Dtype::F32)]
        dtype: Dtype,
    },
    /// Evaluate a checkpoint and print the retrieval report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = Direction::Both)]
        direction: Direction,
        #[arg(long, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        collapse_duplicate_captions: bool,
        /// Also write the report and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of a config grid and tabulate the results.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
    },
    /// Finite-difference check of every parameter of a toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = ToyDims::Small)]
        dims: ToyDims,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-hoc analyses written as CSV.
    Analyze {
        #[command(subcommand)]
        kind: Analysis,
    },
}

#[derive(clap::Args)]
struct AnalysisArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Subcommand)]
enum Analysis {
    /// Corpus-averaged centre attention per layer.
    Attention {
        #[command(flatten)]
        args: AnalysisArgs,
    },
    /// Per-word sentence-to-clip rank changes against a baseline checkpoint.
    Rankdelta {
        #[command(flatten)]
        args: AnalysisArgs,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Neighbouring-clip similarity deltas against a baseline checkpoint.
    Neighbours {
        #[command(flatten)]
        args: AnalysisArgs,
        #[arg(long)]
        baseline: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Input(_) | Error::Contract(_) | Error::Index { .. } => 2,
        Error::Io { .. } | Error::Load { .. } => 3,
        Error::Numeric(_) | Error::Degenerate(_) | Error::GraphConsumed => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("CONTRA_THREADS") {
            Ok(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("CONTRA_THREADS={s:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Generate {
            out,
            videos,
            clips_per_video,
            test_clips,
            dv,
            dw,
            topics,
            steps,
            optional_steps,
            ambiguity,
            noise,
            seed,
        } => {
            let d = GenConfig::default();
            let cfg = GenConfig {
                n_videos: videos.unwrap_or(d.n_videos),
                clips_per_video: clips_per_video.unwrap_or(d.clips_per_video),
                test_clips: test_clips.unwrap_or(d.test_clips),
                d_v: dv.unwrap_or(d.d_v),
                d_w: dw.unwrap_or(d.d_w),
                n_topics: topics.unwrap_or(d.n_topics),
                n_steps: steps.unwrap_or(d.n_steps),
                optional_steps: optional_steps.unwrap_or(d.optional_steps),
                ambiguity: ambiguity.unwrap_or(d.ambiguity),
                noise: noise.unwrap_or(d.noise),
                ..d
            };
            cmd_generate(&cfg, seed, &out, threads)
        }
        Command::Train { data, out, config, preset, m, context, seed, overrides, dtype } => {
            let dataset = load_dataset(&data)?;
            let mut cfg = resolve_config(preset, &dataset, config.as_deref(), &overrides)?;
            if let Some(m) = m {
                cfg.model.m = m;
            }
            if let Some(c) = context {
                cfg.model.context_mode = c;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_train(&dataset, &cfg, dtype, &data, config.as_deref(), &out, threads)
        }
        Command::Eval { data, checkpoint, direction, split, collapse_duplicate_captions, out } => {
            let opts = EvalOptions { split, direction, collapse_duplicate_captions, ..EvalOptions::default() };
            cmd_eval(&data, &checkpoint, &opts, out.as_deref(), threads)
        }
        Command::Ablate { data, grid, out, config, preset } => {
            let dataset = load_dataset(&data)?;
            let base = resolve_config(preset, &dataset, config.as_deref(), &[])?;
            cmd_ablate(&dataset, &base, &data, &grid, config.as_deref(), &out, threads)
        }
        Command::Gradcheck { seed, dims, out } => cmd_gradcheck(seed, dims, out.as_deref(), threads),
        Command::Analyze { kind } => cmd_analyze(kind, threads),
    }
}

fn cmd_generate(cfg: &GenConfig, seed: u64, out: &Path, threads: usize) -> Result<()> {
    let dataset = generate_synthetic(cfg, seed)?;
    write_dataset(&dataset, out)?;
    let mut m = RunManifest::new(serde_json::to_value(cfg).expect("config serializes"), Some(seed), threads);
    m.output(out);
    m.write(out)
}

/// Preset, then the dataset's feature dims, then the config file, then
/// dotted overrides. Flags are applied by the caller last.
fn resolve_config(
    preset: Preset,
    dataset: &FeatureDataset,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut cfg = match preset {
        Preset::Full => TrainConfig::default(),
        Preset::Desk => TrainConfig::desk_scale(),
    };
    cfg.model.d_v = dataset.d_v;
    cfg.model.d_w = dataset.d_w;
    let mut json = serde_json::to_value(&cfg).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut json, patch, "")?;
    }
    let parsed = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let cfg: TrainConfig = serde_json::from_value(json).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = cfg.with_overrides(&parsed)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `patch` onto `base`; keys absent from `base` are errors.
fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `key=value`, where the value is JSON if it parses as JSON and a string otherwise.
fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn cmd_train(
    dataset: &FeatureDataset,
    cfg: &TrainConfig,
    dtype: Dtype,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    threads: usize,
) -> Result<()> {
    let mut config_json = serde_json::to_value(cfg).expect("config serializes");
    config_json["dtype"] = Value::String(format!("{dtype:?}").to_lowercase());
    let mut m = RunManifest::new(config_json, Some(cfg.seed), threads);
    m.input(data)?;
    if let Some(c) = config {
        m.input(c)?;
    }
    let summary = match dtype {
        Dtype::F32 => train_to_dir::<f32>(dataset, cfg, out)?,
        Dtype::F64 => train_to_dir::<f64>(dataset, cfg, out)?,
    };
    for name in [LOG_FILE, REPORT_FILE, FINAL_DIR, BEST_DIR] {
        m.output(&out.join(name));
    }
    m.write(out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn load_any(dir: &Path) -> Result<ModelAny> {
    Ok(match checkpoint_dtype(dir)?.as_str() {
        "f64" => ModelAny::F64(load_checkpoint(dir)?),
        _ => ModelAny::F32(load_checkpoint(dir)?),
    })
}

/// A checkpoint loaded in the scalar type it was stored in.
enum ModelAny {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn cmd_eval(data: &Path, checkpoint: &Path, opts: &EvalOptions, out: Option<&Path>, threads: usize) -> Result<()> {
    let dataset = load_dataset(data)?;
    let report = match load_any(checkpoint)? {
        ModelAny::F32(model) => evaluate(&model, &dataset, opts)?,
        ModelAny::F64(model) => evaluate(&model, &dataset, opts)?,
    };
    report.check()?;
    let json = report.to_json();
    println!("{json}");
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let p = out.join(REPORT_FILE);
        fs::write(&p, &json).map_err(|e| io_err(&p, e))?;
        let cfg = serde_json::json!({
            "split": opts.split,
            "direction": opts.direction,
            "collapse_duplicate_captions": opts.collapse_duplicate_captions,
        });
        let mut m = RunManifest::new(cfg, None, threads);
        m.input(data)?;
        m.input(checkpoint)?;
        m.output(&p);
        m.write(out)?;
    }
    Ok(())
}

fn cmd_ablate(
    dataset: &FeatureDataset,
    base: &TrainConfig,
    data: &Path,
    grid_path: &Path,
    config: Option<&Path>,
    out: &Path,
    threads: usize,
) -> Result<()> {
    let text = fs::read_to_string(grid_path).map_err(|e| io_err(grid_path, e))?;
    let grid: GridSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", grid_path.display())))?;
    grid.validate()?;
    let cells = run_ablation(dataset, base, &grid)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let p = out.join(ABLATION_CSV);
    let file = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
    write_ablation_csv(&grid, &cells, file)?;
    for c in &cells {
        if let Err(e) = &c.outcome {
            eprintln!("cell {} seed {}: {e}", c.cell, c.seed);
        }
    }
    let cfg = serde_json::json!({ "base": base, "grid": grid });
    let mut m = RunManifest::new(cfg, None, threads);
    m.input(data)?;
    m.input(grid_path)?;
    if let Some(c) = config {
        m.input(c)?;
    }
    m.output(&p);
    m.write(out)
}

fn cmd_gradcheck(seed: u64, dims: ToyDims, out: Option<&Path>, threads: usize) -> Result<()> {
    let report = toy_gradcheck(seed, dims)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let p = out.join("gradcheck.json");
        fs::write(&p, &json).map_err(|e| io_err(&p, e))?;
        let mut m = RunManifest::new(serde_json::json!({ "dims": dims.to_string() }), Some(seed), threads);
        m.output(&p);
        m.write(out)?;
    }
    if !(report.max_rel_err < GRADCHECK_TOL) {
        return Err(Error::Numeric(format!(
            "max relative error {:e} at {}[{}] is not below {GRADCHECK_TOL:e}",
            report.max_rel_err, report.worst_param, report.worst_index
        )));
    }
    Ok(())
}

fn cmd_analyze(kind: Analysis, threads: usize) -> Result<()> {
    let (args, baseline, name) = match &kind {
        Analysis::Attention { args } => (args, None, "attention"),
        Analysis::Rankdelta { args, baseline } => (args, Some(baseline.as_path()), "rankdelta"),
        Analysis::Neighbours { args, baseline } => (args, Some(baseline.as_path()), "neighbours"),
    };
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let file = match load_any(&args.checkpoint)? {
        ModelAny::F32(model) => analyze::<f32>(&kind, &model, baseline, &dataset, args)?,
        ModelAny::F64(model) => analyze::<f64>(&kind, &model, baseline, &dataset, args)?,
    };
    let cfg = serde_json::json!({ "analysis": name, "split": args.split });
    let mut m = RunManifest::new(cfg, None, threads);
    m.input(&args.data)?;
    m.input(&args.checkpoint)?;
    if let Some(b) = baseline {
        m.input(b)?;
    }
    m.output(&file);
    m.write(&args.out)
}

fn analyze<T: Scalar>(
    kind: &Analysis,
    model: &Model<T>,
    baseline: Option<&Path>,
    dataset: &FeatureDataset,
    args: &AnalysisArgs,
) -> Result<PathBuf> {
    let create = |name: &str| -> Result<(PathBuf, fs::File)> {
        let p = args.out.join(name);
        let f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        Ok((p, f))
    };
    let base = baseline.map(load_checkpoint::<T>).transpose()?;
    match kind {
        Analysis::Attention { .. } => {
            let s = attention_summary(model, dataset, args.split, model.config.clip_radius())?;
            let (p, f) = create("attention.csv")?;
            write_attention_csv(&s, f)?;
            Ok(p)
        }
        Analysis::Rankdelta { .. } => {
            let base = base.expect("baseline required");
            let opts = EvalOptions { split: args.split, direction: Direction::S2c, ..EvalOptions::default() };
            let emb = embed_split(model, dataset, args.split, opts.chunk)?;
            let ranks = |r: contra::eval::RetrievalReport| r.s2c.expect("s2c requested").ranks;
            let ctx = ranks(evaluate_embeddings(&emb, &opts)?);
            let noctx = ranks(evaluate(&base, dataset, &opts)?);
            let captions: Vec<&str> = emb.captions.iter().map(String::as_str).collect();
            let rows = rank_delta_by_word(&ctx, &noctx, &captions)?;
            let (p, f) = create("rank_delta.csv")?;
            write_rank_delta_csv(&rows, f)?;
            Ok(p)
        }
        Analysis::Neighbours { .. } => {
            let base = base.expect("baseline required");
            let a = neighbour_similarity_analysis(model, &base, dataset, args.split)?;
            let (p, f) = create("neighbours.csv")?;
            write_neighbour_csv(&a, f)?;
            Ok(p)
        }
    }
}
