use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ficklenet::bench::{self, BenchOptions, BenchRow, BenchShape, RowOutcome};
use ficklenet::cam::{InferenceParams, LocalizationMap};
use ficklenet::config::ExperimentConfig;
use ficklenet::export;
use ficklenet::fickle::{DropoutMaskSet, SelectionMode};
use ficklenet::pipeline::{self, SweepParam};
use ficklenet::seed::{self, Stream};
use ficklenet::synthetic::{self, score_seeds, SyntheticSample};
use ficklenet::training::{self, Checkpoint, TrainState};
use ficklenet::{Error, Result};
use serde_json::json;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Stochastic hidden-unit selection for weakly supervised localization.
#[derive(Parser, Debug)]
#[command(name = "ficklenet", version)]
struct Cli {
    /// Root seed for every random draw; overrides the config's `seeds.experiment`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the classifier on a generated dataset.
    Train(TrainArgs),
    /// Compute localization maps and seed maps from a checkpoint.
    Infer(InferArgs),
    /// Time the per-window and expanded implementations.
    Bench(BenchArgs),
    /// Seed metrics as one inference parameter varies.
    Sweep(SweepArgs),
    /// Write a synthetic dataset to disk.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of generated training samples.
    #[arg(long)]
    train_size: Option<usize>,
    /// Train from a dataset directory written by `gen-data` instead.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct InferenceOverrides {
    /// Number of stochastic passes N.
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    /// Dropout rate used at inference.
    #[arg(long)]
    rate: Option<f64>,
    /// Selection mode: general, stochastic or deterministic.
    #[arg(long)]
    mode: Option<SelectionMode>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory written by `gen-data`; the held-out split of the
    /// checkpoint's config is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Only the first LIMIT images.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    overrides: InferenceOverrides,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Shape `channels,size,kernel`; repeatable. Defaults to the built-in matrix.
    #[arg(long = "shape", value_parser = parse_shape)]
    shapes: Vec<BenchShape>,
    /// Dropout rate for the replayed masks.
    #[arg(long, default_value_t = 0.9)]
    rate: f64,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    /// Rows whose expanded footprint exceeds this many MiB are skipped.
    #[arg(long, default_value_t = 1536)]
    memory_budget_mib: usize,
    /// CSV report path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory receiving the replayed mask set of every row.
    #[arg(long)]
    masks_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parameter to vary: p, N or theta.
    #[arg(long)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: InferenceOverrides,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `train` or `eval`.
    #[arg(long, default_value = "train")]
    split: String,
    /// Number of samples; defaults to the config's split size.
    #[arg(long)]
    n: Option<usize>,
}

fn parse_shape(s: &str) -> std::result::Result<BenchShape, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        &[channels, size, kernel] => Ok(BenchShape::new(channels, size, kernel, 0.9)),
        _ => Err("expected channels,size,kernel".into()),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds.experiment = s;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    training::load_checkpoint(std::io::BufReader::new(File::open(path)?))
}

fn inference_params(cfg: &ExperimentConfig, o: &InferenceOverrides) -> Result<InferenceParams> {
    let mut c = cfg.clone();
    if let Some(n) = o.passes {
        c.inference.n_passes = n;
    }
    if let Some(t) = o.theta {
        c.inference.theta = t;
    }
    if let Some(p) = o.rate {
        c.inference.dropout_rate = Some(p);
    }
    if let Some(m) = o.mode {
        c.inference.mode = m;
    }
    c.validate()?;
    Ok(c.inference_params())
}

/// The images to run on and their ids.
fn inference_images(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    limit: Option<usize>,
) -> Result<Vec<(String, SyntheticSample)>> {
    let samples = match data {
        Some(dir) => synthetic::load_dataset(dir, cfg.dataset.generator.num_classes)?,
        None => pipeline::evaluation_set(cfg)?,
    };
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    if n == 0 {
        return Err(Error::InvalidArgument("no images to process".into()));
    }
    Ok(samples.into_iter().take(n).enumerate().map(|(i, s)| (format!("{i:05}"), s)).collect())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref(), seed)?;
    if let Some(e) = args.epochs {
        cfg.optimizer.epochs = e;
    }
    if let Some(n) = args.train_size {
        cfg.dataset.train_size = n;
    }
    cfg.validate()?;
    let samples = match &args.data {
        Some(dir) => synthetic::load_dataset(dir, cfg.dataset.generator.num_classes)?,
        None => pipeline::training_set(&cfg)?,
    };
    log::info!("training on {} samples for {} epochs", samples.len(), cfg.optimizer.epochs);
    let state: TrainState = training::train_classifier(&samples, &cfg)?;
    fs::create_dir_all(&args.out)?;
    training::save_checkpoint(BufWriter::new(File::create(args.out.join("checkpoint.fkck"))?), &state, &cfg)?;
    training::write_log_csv(&args.out.join("train_log.csv"), &state.history)?;
    fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    let first = state.history.first().map(|r| r.loss);
    let last = state.history.last().map(|r| r.loss);
    match (first, last) {
        (Some(a), Some(b)) => println!("trained {} steps; loss {a:.5} -> {b:.5}", state.step),
        _ => println!("no steps taken; wrote the initial model"),
    }
    Ok(())
}

fn mean_map(maps: &[LocalizationMap], class: usize) -> Option<LocalizationMap> {
    let mine: Vec<&LocalizationMap> = maps.iter().filter(|m| m.class_id == class).collect();
    let first = mine.first()?;
    let mut scores = first.scores.map(|_| 0.0);
    for m in &mine {
        scores.add_assign(&m.scores).ok()?;
    }
    let n = mine.len() as f64;
    Some(LocalizationMap {
        class_id: class,
        scores: scores.map(|v| v / n),
        pass_seed: first.pass_seed,
        normalized: false,
    })
}

fn cmd_infer(args: &InferArgs, seed: Option<u64>) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = seed {
        cfg.seeds.experiment = s;
    }
    let params = inference_params(&cfg, &args.overrides)?;
    let images = inference_images(&cfg, args.data.as_deref(), args.limit)?;
    fs::create_dir_all(&args.out)?;
    let base = seed::derive(cfg.seeds.experiment, Stream::Inference);
    let classes = ck.model.num_classes();
    let mut pooled = synthetic::SeedScores::empty(classes);
    let mut per_image = Vec::new();
    for (j, (id, sample)) in images.iter().enumerate() {
        let out = pipeline::infer_sample(&ck.model, sample, &params, pipeline::image_seed(base, j))?;
        export::write_seed_pgm(&args.out.join(format!("{id}_seeds.pgm")), &out.seed_map)?;
        export::write_seed_ppm(&args.out.join(format!("{id}_seeds.ppm")), &out.seed_map)?;
        for c in sample.present_classes() {
            if let Some(m) = mean_map(&out.maps, c) {
                export::write_map_pgm(&args.out.join(format!("{id}_class{c}_mean.pgm")), &m)?;
                export::write_map_csv(&args.out.join(format!("{id}_class{c}_mean.csv")), &m)?;
            }
        }
        let s = score_seeds(&out.seed_map, &sample.gt_mask, classes)?;
        pooled.add(&s);
        per_image.push(json!({
            "id": id,
            "present_classes": sample.present_classes(),
            "precision": s.foreground.precision(),
            "recall": s.foreground.recall(),
            "iou": s.foreground.iou(),
            "foreground_area": s.foreground_area,
        }));
    }
    let metrics = json!({
        "passes": params.n_passes,
        "theta": params.thresholds.theta,
        "theta_bg": params.thresholds.background,
        "rate": params.rate,
        "mode": params.mode.to_string(),
        "seed": cfg.seeds.experiment,
        "images": images.len(),
        "precision": pooled.foreground.precision(),
        "precision_defined": pooled.foreground.precision_defined(),
        "recall": pooled.foreground.recall(),
        "iou": pooled.foreground.iou(),
        "mean_iou": pooled.mean_iou(),
        "foreground_area": pooled.foreground_area,
        "per_image": per_image,
    });
    let mut f = BufWriter::new(File::create(args.out.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut f, &metrics).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f)?;
    println!(
        "{} images, N={}: precision {:.4} recall {:.4} iou {:.4}",
        images.len(),
        params.n_passes,
        pooled.foreground.precision(),
        pooled.foreground.recall(),
        pooled.foreground.iou()
    );
    Ok(())
}

fn fmt_secs(t: f64) -> String {
    format!("{:.3}ms", t * 1e3)
}

fn print_row(row: &BenchRow) {
    match &row.outcome {
        RowOutcome::Timed { naive, expanded } => println!(
            "{:<32} {:>10} {:>10} {:>10} {:>10} {:>7.2}x {:>7.2}x {:>6.2} {:>9.1e}",
            row.shape.to_string(),
            fmt_secs(naive.forward.median),
            fmt_secs(expanded.forward.median),
            fmt_secs(naive.forward_backward.median),
            fmt_secs(expanded.forward_backward.median),
            row.speedup_forward().unwrap_or(f64::NAN),
            row.speedup_forward_backward().unwrap_or(f64::NAN),
            row.memory_ratio().unwrap_or(f64::NAN),
            row.max_diff.unwrap_or(f64::NAN),
        ),
        RowOutcome::EquivalenceFailure => println!(
            "{:<32} EQUIVALENCE FAILURE: max difference {:e} exceeds {:e}; row not timed",
            row.shape.to_string(),
            row.max_diff.unwrap_or(f64::NAN),
            bench::EQUIVALENCE_TOL
        ),
        RowOutcome::Skipped(why) => println!("{:<32} skipped: {why}", row.shape.to_string()),
    }
}

fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "channels",
        "height",
        "width",
        "kernel",
        "classes",
        "rate",
        "status",
        "max_diff",
        "naive_forward_s",
        "expanded_forward_s",
        "naive_forward_backward_s",
        "expanded_forward_backward_s",
        "naive_bytes",
        "expanded_bytes",
        "speedup_forward",
        "speedup_forward_backward",
        "memory_ratio",
    ])?;
    for r in rows {
        let s = &r.shape;
        let mut rec = vec![
            s.channels.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.kernel.to_string(),
            s.classes.to_string(),
            s.rate.to_string(),
        ];
        let diff = r.max_diff.map_or(String::new(), |d| format!("{d:e}"));
        match &r.outcome {
            RowOutcome::Timed { naive, expanded } => rec.extend([
                "timed".into(),
                diff,
                naive.forward.median.to_string(),
                expanded.forward.median.to_string(),
                naive.forward_backward.median.to_string(),
                expanded.forward_backward.median.to_string(),
                naive.bytes.to_string(),
                expanded.bytes.to_string(),
                format!("{:.4}", r.speedup_forward().unwrap_or(f64::NAN)),
                format!("{:.4}", r.speedup_forward_backward().unwrap_or(f64::NAN)),
                format!("{:.4}", r.memory_ratio().unwrap_or(f64::NAN)),
            ]),
            RowOutcome::EquivalenceFailure => {
                rec.extend(["equivalence_failure".into(), diff]);
                rec.extend(std::iter::repeat_n(String::new(), 9));
            }
            RowOutcome::Skipped(_) => {
                rec.extend(["skipped".into(), diff]);
                rec.extend(std::iter::repeat_n(String::new(), 9));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: Option<u64>) -> Result<()> {
    let shapes: Vec<BenchShape> = if args.shapes.is_empty() {
        bench::default_matrix()
    } else {
        args.shapes.clone()
    };
    let shapes: Vec<BenchShape> = shapes.into_iter().map(|s| BenchShape { rate: args.rate, ..s }).collect();
    let opts = BenchOptions {
        repetitions: args.repetitions,
        warmups: args.warmups,
        seed: seed.unwrap_or(0),
        memory_budget: args.memory_budget_mib << 20,
    };
    if let Some(dir) = &args.masks_out {
        fs::create_dir_all(dir)?;
        for s in &shapes {
            let masks = DropoutMaskSet::sample(s.height, s.width, s.kernel, s.rate, opts.seed)?;
            let name = format!("masks_k{}_h{}_s{}.bin", s.channels, s.height, s.kernel);
            masks.write_to(BufWriter::new(File::create(dir.join(name))?))?;
        }
    }
    println!("machine: {}", bench::machine_info());
    println!(
        "median of {} runs after {} warmups; memory is tape+gradient bytes after one forward+backward",
        opts.repetitions, opts.warmups
    );
    println!(
        "{:<32} {:>10} {:>10} {:>10} {:>10} {:>8} {:>8} {:>6} {:>9}",
        "shape", "naive fwd", "exp fwd", "naive f+b", "exp f+b", "fwd x", "f+b x", "mem", "max diff"
    );
    let mut rows = Vec::with_capacity(shapes.len());
    let mut failed = false;
    for s in &shapes {
        let row = bench::bench_shape(s, &opts)?;
        failed |= matches!(row.outcome, RowOutcome::EquivalenceFailure);
        print_row(&row);
        rows.push(row);
    }
    println!();
    println!("GPU reference (k=512, h=w=41, s=9), for context only:");
    println!("  training   naive 20 s/iter   expanded 1.3 s/iter   (15.4x)");
    println!("  CAM        naive 2.98 s/img  expanded 0.21 s/img   (14.2x)");
    println!("  memory     naive 8.4 GB      expanded 10.1 GB");
    if let Some(path) = &args.csv {
        write_bench_csv(path, &rows)?;
    }
    if failed {
        return Err(Error::Numerical("naive and expanded paths disagree; see the report".into()));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, seed: Option<u64>) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = seed {
        cfg.seeds.experiment = s;
    }
    let params = inference_params(&cfg, &args.overrides)?;
    let samples: Vec<SyntheticSample> = inference_images(&cfg, args.data.as_deref(), args.limit)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let rows = pipeline::sweep(
        &ck.model,
        &samples,
        &params,
        args.param,
        &args.values,
        args.repeats,
        cfg.seeds.experiment,
    )?;
    pipeline::write_sweep_csv(BufWriter::new(File::create(&args.out)?), args.param, &rows)?;
    for r in &rows {
        println!(
            "{}={}: precision {:.4}±{:.4} recall {:.4}±{:.4} area {:.4}",
            args.param.name(),
            r.value,
            r.precision.mean,
            r.precision.std,
            r.recall.mean,
            r.recall.std,
            r.foreground_area.mean
        );
    }
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), seed)?;
    cfg.validate()?;
    let (stream, default_n) = match args.split.as_str() {
        "train" => (Stream::TrainData, cfg.dataset.train_size),
        "eval" => (Stream::EvalData, cfg.dataset.eval_size),
        other => return Err(Error::InvalidArgument(format!("unknown split `{other}`; use train or eval"))),
    };
    let n = args.n.unwrap_or(default_n);
    let samples = synthetic::generate_split(&cfg.dataset.generator, n, cfg.seeds.experiment, stream)?;
    synthetic::save_dataset(&args.out, &samples)?;
    println!("wrote {n} samples to {}", args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Infer(a) => cmd_infer(a, cli.seed),
        Command::Bench(a) => cmd_bench(a, cli.seed),
        Command::Sweep(a) => cmd_sweep(a, cli.seed),
        Command::GenData(a) => cmd_gen_data(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
