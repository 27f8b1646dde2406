//! `ssdrec` command line: `prepare`, `train`, `evaluate`, `bench` and
//! `check-bench`.
//!
//! Run directory layout written by `train` and `evaluate`:
//!
//! ```text
//! <out>/config.toml            resolved configuration, reusable with --config
//! <out>/checkpoints/best.ckpt  weights of the best validation epoch
//! <out>/reports/train.json     config, per-epoch records, best validation metrics
//! <out>/reports/epochs.tsv     epoch, loss, seconds, validation NDCG
//! <out>/reports/<mode>.json    metrics from `evaluate` (and test metrics after training)
//! <out>/reports/<mode>.tsv
//! <out>/logs/<command>.log
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training or evaluation error.

pub mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ssdrec::bench::{fit_slopes, measure_scaling, parse_tsv, BenchConfig, BenchKernel, SlopeFit};
use ssdrec::checkpoint::load_checkpoint;
use ssdrec::data::{k_core_filter, leave_one_out_split, load_dataset, load_interactions, save_dataset, InputFormat, SplitMode};
use ssdrec::model::ModelParams;
use ssdrec::train::{evaluate, train, MetricReport, TrainReport};
use ssdrec::{Error, Tensor};

use crate::config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoints/best.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "ssdrec",
    version,
    about = "Padding-free sequential recommendation with bidirectional SSD layers",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split a raw interaction log into a dataset archive.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(RunArgs),
    /// Score a checkpoint on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Time the sequence mixers over a grid of lengths and state sizes.
    Bench(BenchArgs),
    /// Re-fit and print the slopes of a benchmark TSV file.
    CheckBench(CheckArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Raw log: MovieLens `::` dump or delimited text with a header.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; receives `dataset.bin` and `stats.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    #[arg(long, value_parser = parse_format, default_value = "auto")]
    pub format: InputFormat,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset archive, or a directory holding `dataset.bin`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub state_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Ranking cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data: self.data.clone(),
            out: self.out.clone(),
            seed: self.seed,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            beta: self.beta,
            rho: self.rho,
            max_len: self.max_len,
            layers: self.layers,
            dim: self.dim,
            state_size: self.state_size,
            dropout: self.dropout,
            ks: self.k.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Defaults to `<out>/config.toml` when that file exists.
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_parser = parse_mode, default_value = "test")]
    pub mode: SplitMode,
    /// Defaults to `<out>/checkpoints/best.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Receives `bench.tsv` and `bench.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_kernel,
          default_value = "ssd_chunked,ssd_naive,attention_baseline")]
    pub kernels: Vec<BenchKernel>,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
    pub lengths: Vec<usize>,
    /// State sizes `N`; the attention width follows `N`.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub state_size: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub chunk_len: usize,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// TSV written by `bench`.
    pub file: PathBuf,
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    match s {
        "auto" => Ok(InputFormat::Auto),
        "delimited" | "csv" | "tsv" => Ok(InputFormat::Delimited),
        "movielens" => Ok(InputFormat::MovieLens),
        other => Err(format!("unknown format '{other}' (auto, delimited, movielens)")),
    }
}

fn parse_mode(s: &str) -> Result<SplitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<BenchKernel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) | Error::EmptyDataset | Error::Split { .. } => EXIT_DATA,
        _ => EXIT_TRAINING,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> ssdrec::Result<()> {
    match command {
        Command::Prepare(a) => prepare(&a),
        Command::Train(a) => train_command(&a),
        Command::Evaluate(a) => evaluate_command(&a),
        Command::Bench(a) => bench(&a),
        Command::CheckBench(a) => check_bench(&a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> ssdrec::Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &str) -> ssdrec::Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> ssdrec::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// Copies log records to stderr and to `<dir>/logs/<name>.log`.
struct Tee {
    file: File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}

fn init_logging(dir: &Path, name: &str) -> ssdrec::Result<()> {
    let logs = dir.join("logs");
    create_dir(&logs)?;
    let path = logs.join(format!("{name}.log"));
    let file = File::create(&path).map_err(io_err(&path))?;
    // a second command in the same process keeps the first logger
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee { file })))
        .try_init();
    Ok(())
}

fn prepare(a: &PrepareArgs) -> ssdrec::Result<()> {
    init_logging(&a.out, "prepare")?;
    let loaded = load_interactions(&a.data, a.format)?;
    if loaded.skipped() > 0 {
        log::warn!(
            "{}: skipped {} malformed line(s), first at line {}",
            a.data.display(),
            loaded.skipped(),
            loaded.skipped_lines[0]
        );
    }
    let raw = loaded.records.len();
    let core = k_core_filter(loaded.records, a.k_core)?;
    log::info!("{}-core filter kept {} of {raw} interactions", a.k_core, core.len());
    let splits = leave_one_out_split(&core)?;
    save_dataset(&a.out.join(DATASET_FILE), &splits)?;
    let stats = splits.stats();
    write_file(&a.out.join("stats.tsv"), &format!("{stats}\n"))?;
    println!("{stats}");
    Ok(())
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DATASET_FILE)
    } else {
        data.to_path_buf()
    }
}

fn metric_tsv(cfg: &RunConfig, m: &MetricReport) -> String {
    let echo = serde_json::to_string(cfg).unwrap_or_default();
    format!("# config {echo}\n{}\n{}\n", m.tsv_header(), m.tsv_row())
}

#[derive(Serialize)]
struct TrainDocument<'a> {
    config: &'a RunConfig,
    report: &'a TrainReport,
    test: &'a MetricReport,
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    config: &'a RunConfig,
    checkpoint: &'a Path,
    mode: SplitMode,
    metrics: &'a MetricReport,
}

fn train_command(a: &RunArgs) -> ssdrec::Result<()> {
    let cfg = RunConfig::resolve(a.config.as_deref(), &a.overrides())?;
    let out = cfg.out()?.to_path_buf();
    let data = dataset_path(cfg.data()?);
    init_logging(&out, "train")?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;

    let splits = load_dataset(&data)?;
    let stats = splits.stats();
    log::info!("{}: {} users, {} items", data.display(), stats.users, stats.items);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params = ModelParams::<Tensor<f32>>::init(&cfg.model, splits.num_items(), &mut rng)?;
    log::info!("{} parameters", params.parameter_count());

    let ckpt = out.join(CHECKPOINT_FILE);
    create_dir(ckpt.parent().unwrap())?;
    let start = Instant::now();
    let report = train(&mut params, &splits, &cfg.model, &cfg.train, &cfg.eval, Some(&ckpt))?;
    log::info!(
        "best epoch {} of {} in {:.1} s",
        report.best_epoch,
        report.epochs.len(),
        start.elapsed().as_secs_f64()
    );
    let test = evaluate(&params, &splits, &cfg.model, &cfg.eval, SplitMode::Test)?;

    let reports = out.join("reports");
    write_json(
        &reports.join("train.json"),
        &TrainDocument {
            config: &cfg,
            report: &report,
            test: &test,
        },
    )?;
    let mut epochs = format!("# config {}\nepoch\tloss\tseconds\tvalid_ndcg\n", serde_json::to_string(&cfg).unwrap_or_default());
    for e in &report.epochs {
        epochs.push_str(&format!("{}\t{:.6}\t{:.3}\t{:.6}\n", e.epoch, e.loss, e.seconds, e.valid_ndcg));
    }
    write_file(&reports.join("epochs.tsv"), &epochs)?;
    if let Some(best) = &report.best_valid {
        write_file(&reports.join("valid.tsv"), &metric_tsv(&cfg, best))?;
    }
    write_file(&reports.join("test.tsv"), &metric_tsv(&cfg, &test))?;
    println!("{}\n{}", test.tsv_header(), test.tsv_row());
    Ok(())
}

fn evaluate_command(a: &EvaluateArgs) -> ssdrec::Result<()> {
    let echo = a.run.out.as_ref().map(|o| o.join("config.toml")).filter(|p| p.is_file());
    let file = a.run.config.clone().or(echo);
    let cfg = RunConfig::resolve(file.as_deref(), &a.run.overrides())?;
    let out = cfg.out()?.to_path_buf();
    let data = dataset_path(cfg.data()?);
    init_logging(&out, "evaluate")?;

    let splits = load_dataset(&data)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let mut params = ModelParams::<Tensor<f32>>::init(&cfg.model, splits.num_items(), &mut ChaCha8Rng::seed_from_u64(0))?;
    params.load_named(load_checkpoint(&ckpt)?)?;
    let metrics = evaluate(&params, &splits, &cfg.model, &cfg.eval, a.mode)?;

    let reports = out.join("reports");
    write_json(
        &reports.join(format!("{}.json", a.mode)),
        &EvalDocument {
            config: &cfg,
            checkpoint: &ckpt,
            mode: a.mode,
            metrics: &metrics,
        },
    )?;
    write_file(&reports.join(format!("{}.tsv", a.mode)), &metric_tsv(&cfg, &metrics))?;
    println!("{}\n{}", metrics.tsv_header(), metrics.tsv_row());
    Ok(())
}

fn print_fits(fits: &[SlopeFit]) {
    for f in fits {
        println!(
            "{}\tN={}\tslope={:.3}\tresidual={:.3}\tpoints={}",
            f.kernel, f.state, f.slope, f.residual, f.points
        );
    }
}

fn bench(a: &BenchArgs) -> ssdrec::Result<()> {
    init_logging(&a.out, "bench")?;
    let cfg = BenchConfig {
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
        heads: a.heads,
        head_dim: a.head_dim,
        chunk_len: a.chunk_len,
    };
    let report = measure_scaling(&a.kernels, &a.lengths, &a.state_size, &cfg)?;
    for s in &report.skipped {
        log::info!("skipped {s}");
    }
    write_file(&a.out.join("bench.tsv"), &report.to_tsv())?;
    write_file(&a.out.join("bench.json"), &(report.to_json()? + "\n"))?;
    print_fits(&report.fits);
    Ok(())
}

fn check_bench(a: &CheckArgs) -> ssdrec::Result<()> {
    let text = fs::read_to_string(&a.file).map_err(io_err(&a.file))?;
    let points = parse_tsv(&text).map_err(|e| Error::Format(format!("{}: {e}", a.file.display())))?;
    if points.is_empty() {
        return Err(Error::Format(format!("{}: no benchmark rows", a.file.display())));
    }
    let flagged = points.iter().filter(|p| p.flagged).count();
    println!("{} points, {flagged} flagged as below timer resolution", points.len());
    print_fits(&fit_slopes(&points));
    Ok(())
}
