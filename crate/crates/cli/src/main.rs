use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use clusterformer::bench::{self, Sweep, TimingOptions};
use clusterformer::checkpoint::{load_checkpoint, save_checkpoint};
use clusterformer::data::{load_dataset, Dataset};
use clusterformer::gradcheck::{self, Scope};
use clusterformer::model::{init_params, param_count, Model, ModelConfig};
use clusterformer::oracle::GradReport;
use clusterformer::ppm;
use clusterformer::train::{self, evaluate, metrics_csv, TrainOptions, METRICS_HEADER};
use clusterformer::visualize::{final_stage_labels, write_label_map};
use clusterformer::{OpKind, Precision, Real, Tensor};

/// Recurrent-clustering image encoder: training, evaluation, benchmarks,
/// gradient checks and assignment maps.
#[derive(Parser)]
#[command(name = "clusterformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Report top-1 (and top-5) accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Measure cost of recurrent clustering vs. self-attention.
    Bench(BenchArgs),
    /// Render the final-stage cluster assignment of one image.
    Visualize(VisualizeArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model config file (flat key=value lines over the desk-scale defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (data generation, init, batch order).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "single")]
    precision: Precision,
}

impl ModelArgs {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ModelConfig::parse_over(ModelConfig::tiny(), &text).with_context(|| format!("in {}", path.display()))?
            }
            None => ModelConfig::tiny(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        config.warn_clamped_k();
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory or `synthetic[:per_class=N,noise=X,…]`.
    #[arg(long)]
    data: String,
    /// Held-out dataset; synthetic specs use seed + 1.
    #[arg(long)]
    val_data: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: String,
    /// Seed for synthetic data.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single")]
    precision: Precision,
    /// Directory whose eval.csv receives one appended row.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label written in the split column of eval.csv.
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    /// `mech=rca,self_attention;hw=256,512;k=8;d=16;t=3` (unlisted keys keep defaults).
    #[arg(long, default_value = "")]
    sweep: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "single")]
    precision: Precision,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Trained checkpoint; without it the model is freshly initialized.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input PGM/PPM with the model's image size.
    #[arg(long)]
    image: PathBuf,
    /// Output P6 file.
    #[arg(long)]
    out: PathBuf,
    /// Pixels per token cell (default: the token stride, so output matches the input size).
    #[arg(long)]
    cell: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    scope: Scope,
    /// Directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip the sign of one op's backward rule (mutation testing).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn synthetic_seed(source: &str, seed: u64) -> u64 {
    if source.starts_with("synthetic") {
        seed
    } else {
        0
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = args.model.model_config()?;
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: config.seed,
        ..TrainOptions::default()
    };
    opts.validate()?;
    let data = load_dataset(&args.data, synthetic_seed(&args.data, config.seed), config.image_size, config.in_channels)?;
    let val = args
        .val_data
        .as_deref()
        .map(|v| load_dataset(v, synthetic_seed(v, config.seed.wrapping_add(1)), config.image_size, config.in_channels))
        .transpose()?;
    check_classes(&data, &config)?;
    if let Some(v) = &val {
        check_classes(v, &config)?;
    }
    info!(
        "training on {} samples ({} classes), {} epochs, batch {}, lr {}",
        data.len(),
        data.num_classes(),
        opts.epochs,
        opts.batch_size,
        opts.lr
    );
    match args.model.precision {
        Precision::Single => train_with::<f32>(args, &config, &opts, &data, val.as_ref()),
        Precision::Double => train_with::<f64>(args, &config, &opts, &data, val.as_ref()),
    }
}

fn check_classes(data: &Dataset, config: &ModelConfig) -> Result<()> {
    if data.num_classes() > config.num_classes {
        bail!(
            "dataset has {} classes but the model config has num_classes={}",
            data.num_classes(),
            config.num_classes
        );
    }
    Ok(())
}

fn train_with<F: Real>(
    args: &TrainArgs,
    config: &ModelConfig,
    opts: &TrainOptions,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<()> {
    let model: Model<F> = init_params(config, config.seed)?;
    info!("model has {} parameters", param_count(&model));

    create_dir(&args.out)?;
    write_file(&args.out.join("config.txt"), config.to_text())?;
    let metrics_path = args.out.join("metrics.csv");
    write_file(&metrics_path, format!("{METRICS_HEADER}\n"))?;
    let mut metrics = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    let mut write_err = None;
    let outcome = train::train(model, data, val, opts, |rows| {
        for r in rows {
            if let Err(e) = writeln!(metrics, "{}", r.csv_row()) {
                write_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    let outcome = outcome?;
    debug_assert_eq!(
        fs::read_to_string(&metrics_path).ok(),
        Some(metrics_csv(&outcome.metrics))
    );
    save_checkpoint(&outcome.model, args.out.join("model.cfk"))?;
    save_checkpoint(&outcome.best, args.out.join("best.cfk"))?;
    match (outcome.best_epoch, outcome.metrics.last()) {
        (Some(best), Some(last)) => info!("final {}: {}; best epoch {best}", last.split, last.report),
        _ => info!("no epochs run; checkpoints hold the initialization"),
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match args.precision {
        Precision::Single => eval_with::<f32>(args),
        Precision::Double => eval_with::<f64>(args),
    }
}

fn eval_with<F: Real>(args: &EvalArgs) -> Result<()> {
    let model: Model<F> = load_checkpoint(&args.checkpoint)?;
    let c = &model.config;
    let data = load_dataset(&args.data, synthetic_seed(&args.data, args.seed), c.image_size, c.in_channels)?;
    check_classes(&data, c)?;
    let report = evaluate(&model, &data.images_as::<F>(), &data.labels)?;
    println!("{} {report}", args.split);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let path = dir.join("eval.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "split,samples,loss,top1,top5")?;
        }
        let top5 = report.top5.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            f,
            "{},{},{:.6},{:.6},{}",
            args.split, report.samples, report.loss, report.top1, top5
        )?;
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let sweep = Sweep::parse(&args.sweep)?;
    let opts = TimingOptions {
        runs: args.runs,
        seed: args.seed,
        ..TimingOptions::default()
    };
    if opts.runs < 5 {
        bail!("--runs must be at least 5");
    }
    create_dir(&args.out)?;
    let mut samples = Vec::new();
    for point in sweep.points() {
        let sample = match args.precision {
            Precision::Single => bench::measure_cost::<f32>(point, &opts)?,
            Precision::Double => bench::measure_cost::<f64>(point, &opts)?,
        };
        info!("{}", sample.csv_row());
        if sample.unstable() {
            warn!("unstable timing (IQR > 20% of median) for {}", sample.csv_row());
        }
        samples.push(sample);
    }
    let csv_path = args.out.join("bench.csv");
    write_file(&csv_path, bench::to_csv(&samples))?;
    // Summaries are fitted on the CSV as written, so they can be recomputed from it.
    let text = fs::read_to_string(&csv_path)?;
    let parsed = bench::parse_csv(&text)?;
    let fits = bench::summarize(&parsed, &sweep.varying_axes());
    let mut summary = String::new();
    for fit in &fits {
        summary.push_str(&format!("{fit}\n"));
    }
    print!("{text}{summary}");
    write_file(&args.out.join("summary.txt"), summary)?;
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    match args.model.precision {
        Precision::Single => visualize_with::<f32>(args),
        Precision::Double => visualize_with::<f64>(args),
    }
}

fn visualize_with<F: Real>(args: &VisualizeArgs) -> Result<()> {
    let model: Model<F> = match &args.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let config = args.model.model_config()?;
            init_params(&config, config.seed)?
        }
    };
    let c = &model.config;
    let img = ppm::read_image(&args.image)?;
    if img.width != c.image_size || img.height != c.image_size {
        bail!(
            "{}: image is {}x{}, model expects {}x{}",
            args.image.display(),
            img.width,
            img.height,
            c.image_size,
            c.image_size
        );
    }
    let img = img.with_channels(c.in_channels)?;
    let tensor = Tensor::<f64>::new(&[c.image_size, c.image_size, c.in_channels], img.data)?.cast::<F>();
    let map = final_stage_labels(&model, &tensor)?;
    let stride = c.patch_size << (c.num_stages() - 1);
    let cell = args.cell.unwrap_or(stride);
    write_label_map(&args.out, &map, cell)?;
    println!(
        "grid {}x{} k={} distinct={} -> {}",
        map.rows,
        map.cols,
        map.k,
        map.distinct(),
        args.out.display()
    );
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let fault = args
        .inject_fault
        .as_deref()
        .map(|name| {
            OpKind::from_name(name).with_context(|| {
                let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown op '{name}' (known: {})", known.join(", "))
            })
        })
        .transpose()?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    let reports = gradcheck::run(args.scope, fault)?;
    let mut csv = format!("{}\n", GradReport::CSV_HEADER);
    for r in &reports {
        println!("{r}");
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(dir) = &args.out {
        write_file(&dir.join("gradcheck.csv"), csv)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Visualize(a) => cmd_visualize(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
