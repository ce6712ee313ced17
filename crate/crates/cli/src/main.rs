//! Command-line front end: dataset masking, training, evaluation, ablations,
//! lambda sweeps, and embedding export.
//!
//! Exit codes are stable: 0 success, 2 configuration error, 3 training
//! failure, 4 data or label error.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use mvclust::dataset::{generate_mask, load_dataset, save_dataset, MaskSpec};
use mvclust::error::Error as CoreError;
use mvclust::eval::MetricsRecord;
use mvclust::train::{
    evaluate_output, train, train_and_evaluate, Pipeline, TrainConfig, TrainHistory, TrainOutput,
    Variant, ALL_VARIANTS,
};
use mvclust::{Dataset64, Model64};

const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_DATA: u8 = 4;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn training(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_TRAINING,
            message: message.into(),
        }
    }
}

/// Classify a core error at the data-loading boundary.
fn data_err(e: CoreError) -> CliError {
    CliError::data(e.to_string())
}

/// Classify a core error raised while training.
fn train_err(e: CoreError) -> CliError {
    match e {
        CoreError::MissingLabels | CoreError::MissingClusterCount => CliError::data(e.to_string()),
        CoreError::InvalidParam(_) => CliError::config(e.to_string()),
        other => CliError::training(other.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "mvclust",
    about = "Incomplete multi-view clustering pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inject synthetic missingness into a complete dataset directory.
    Mask(MaskArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a finished run against a dataset.
    Eval(EvalArgs),
    /// Train and score all seven model variants.
    Ablate(TrainArgs),
    /// Cross product of the lambda grid and seeds.
    Sweep(TrainArgs),
    /// Export the view-common embedding of a finished run as CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct MaskArgs {
    /// Input dataset directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Fraction of (sample, view) cells to remove.
    #[arg(long)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Output CSV path; defaults to `<run>/embeddings.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mask(args) => cmd_mask(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Export(args) => cmd_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(CliError::config)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.variant {
        cfg.variant = v
            .parse::<Variant>()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    cfg.train_config()
        .validate()
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset64, PathBuf), CliError> {
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::config("no dataset directory: set `data` or pass --data"))?;
    let ds = load_dataset::<f64>(&path).map_err(data_err)?;
    Ok((ds, path))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::config("no output directory: set `out` or pass --out"))?;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn cmd_mask(args: MaskArgs) -> Result<(), CliError> {
    let ds = load_dataset::<f64>(&args.input).map_err(data_err)?;
    let spec = MaskSpec {
        missing_rate: args.eta,
        seed: args.seed,
        scheme: Default::default(),
    };
    let mask = generate_mask(ds.n_samples(), ds.n_views(), &spec)
        .map_err(|e| CliError::config(e.to_string()))?;
    let masked = ds.with_mask(mask).map_err(data_err)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", args.out.display())))?;
    save_dataset(&masked, &args.out).map_err(data_err)?;
    // Complete data still gets an explicit (all-ones) mask file so the
    // output is self-describing.
    if args.eta == 0.0 {
        let ones: Vec<String> = (0..masked.n_samples())
            .map(|_| vec!["1"; masked.n_views()].join(","))
            .collect();
        let path = args.out.join("mask.csv");
        fs::write(&path, ones.join("\n") + "\n")
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    }
    let snapshot = serde_json::json!({"eta": args.eta, "seed": args.seed, "scheme": "uniform_row_constrained"});
    let snap_path = args.out.join("mask_config.json");
    fs::write(&snap_path, snapshot.to_string() + "\n")
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", snap_path.display())))?;
    println!("masked dataset written to {}", args.out.display());
    Ok(())
}

fn write_metrics(path: &Path, records: &[&MetricsRecord]) -> Result<(), CliError> {
    let mut body = String::from(MetricsRecord::CSV_HEADER);
    body.push('\n');
    for r in records {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    fs::write(path, body)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

/// Rows of (epoch, metrics, loss) for runs that evaluated on a schedule.
fn write_plot_csv(path: &Path, history: &TrainHistory) -> Result<(), CliError> {
    let mut body = String::from("epoch,acc,nmi,ari,fscore,loss\n");
    for r in &history.records {
        if let Some(m) = &r.metrics {
            body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, m.acc, m.nmi, m.ari, m.fscore, r.total
            ));
        }
    }
    fs::write(path, body)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn run_one(
    ds: &Dataset64,
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(TrainOutput<f64>, Option<MetricsRecord>), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
    let mut cfg = cfg.clone();
    if cfg.checkpoint_period > 0 {
        cfg.checkpoint_dir = Some(dir.to_path_buf());
    }
    let out = train(ds, &cfg).map_err(train_err)?;
    out.model.save(&dir.join("model.bin")).map_err(train_err)?;
    out.history
        .write_csv(&dir.join("history.csv"))
        .map_err(train_err)?;
    let record = if ds.labels().is_some() {
        let record = evaluate_output(ds, &cfg, &out).map_err(train_err)?;
        write_metrics(&dir.join("metrics.csv"), &[&record])?;
        Some(record)
    } else {
        None
    };
    Ok((out, record))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&args)?;
    let (ds, _) = load_data(&cfg)?;
    let dir = out_dir(&cfg)?;
    cfg.save(&dir.join("config.json"))
        .map_err(CliError::config)?;
    let (_, record) = run_one(&ds, &cfg.train_config(), &dir)?;
    if let Some(record) = record {
        println!("{}", MetricsRecord::CSV_HEADER);
        println!("{}", record.csv_row());
    } else {
        println!(
            "run complete (no labels; metrics skipped): {}",
            dir.display()
        );
    }
    Ok(())
}

fn load_run(run: &Path) -> Result<(RunConfig, Model64), CliError> {
    let cfg = RunConfig::load(&run.join("config.json")).map_err(CliError::config)?;
    let model = Model64::load(&run.join("model.bin")).map_err(data_err)?;
    Ok((cfg, model))
}

/// Recompute the final representation of a stored run on a dataset.
fn recompute_embedding(
    cfg: &RunConfig,
    model: &Model64,
    ds: &Dataset64,
) -> Result<TrainOutput<f64>, CliError> {
    let pipeline = Pipeline::new(ds, cfg.k).map_err(train_err)?;
    let fusion = if cfg.variant == Variant::WoMff {
        mvclust::network::FusionRule::UnmaskedZeroFill
    } else {
        mvclust::network::FusionRule::Masked
    };
    let pass = match pipeline.forward(model, fusion, true) {
        Ok(pass) => pass,
        Err(CoreError::DegenerateProjection { .. }) => {
            pipeline.forward(model, fusion, false).map_err(train_err)?
        }
        Err(e) => return Err(train_err(e)),
    };
    Ok(TrainOutput {
        model: model.clone(),
        history: TrainHistory::default(),
        embedding: pass.f,
        indicator: pass.y,
    })
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, model) = load_run(&args.run)?;
    if let Some(data) = args.data {
        cfg.data = Some(data);
    }
    let (ds, _) = load_data(&cfg)?;
    if ds.labels().is_none() {
        return Err(CliError::data(
            "dataset has no labels; clustering metrics are undefined",
        ));
    }
    let out = recompute_embedding(&cfg, &model, &ds)?;
    let record = evaluate_output(&ds, &cfg.train_config(), &out).map_err(train_err)?;
    let path = args.run.join("metrics.csv");
    write_metrics(&path, &[&record])?;
    println!("{}", MetricsRecord::CSV_HEADER);
    println!("{}", record.csv_row());
    Ok(())
}

fn worker_count() -> usize {
    std::env::var("MVCLUST_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run independent cells on a fixed-size worker pool, preserving cell order.
fn run_cells<Job, Out>(jobs: Vec<Job>, run: impl Fn(&Job) -> Out + Sync) -> Vec<Out>
where
    Job: Sync,
    Out: Send,
{
    let workers = worker_count().min(jobs.len().max(1));
    if workers <= 1 {
        return jobs.iter().map(&run).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Out>> = (0..jobs.len()).map(|_| None).collect();
    let slot_refs: Vec<std::sync::Mutex<&mut Option<Out>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = run(&jobs[i]);
                **slot_refs[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("cell completed"))
        .collect()
}

fn cmd_ablate(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args)?;
    if cfg.eval_period == 0 {
        // Ablations ship plot data; sample metrics on a coarse schedule.
        cfg.eval_period = (cfg.epochs / 30).max(1);
    }
    let (ds, _) = load_data(&cfg)?;
    if ds.labels().is_none() {
        return Err(CliError::data("ablation requires labels"));
    }
    let dir = out_dir(&cfg)?;
    cfg.save(&dir.join("config.json"))
        .map_err(CliError::config)?;

    let jobs: Vec<Variant> = ALL_VARIANTS.to_vec();
    let results = run_cells(jobs, |variant| {
        let mut cell_cfg = cfg.train_config();
        cell_cfg.variant = *variant;
        train_and_evaluate(&ds, &cell_cfg).map(|(out, record)| (*variant, out, record))
    });

    let mut records = Vec::new();
    for result in results {
        let (variant, out, record) = result.map_err(train_err)?;
        let sub = dir.join(variant.name());
        fs::create_dir_all(&sub)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", sub.display())))?;
        out.history
            .write_csv(&sub.join("history.csv"))
            .map_err(train_err)?;
        write_plot_csv(&sub.join("plot.csv"), &out.history)?;
        out.model.save(&sub.join("model.bin")).map_err(train_err)?;
        records.push(record);
    }
    let refs: Vec<&MetricsRecord> = records.iter().collect();
    write_metrics(&dir.join("ablation.csv"), &refs)?;
    println!("{}", MetricsRecord::CSV_HEADER);
    for r in &records {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn cmd_sweep(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args)?;
    if cfg.eval_period == 0 {
        cfg.eval_period = (cfg.epochs / 30).max(1);
    }
    if cfg.lambdas.is_empty() || cfg.sweep_seeds.is_empty() {
        return Err(CliError::config(
            "sweep needs non-empty `lambdas` and `sweep_seeds`",
        ));
    }
    let (ds, _) = load_data(&cfg)?;
    if ds.labels().is_none() {
        return Err(CliError::data("sweep requires labels"));
    }
    let dir = out_dir(&cfg)?;
    cfg.save(&dir.join("config.json"))
        .map_err(CliError::config)?;

    let jobs: Vec<(f64, u64)> = cfg
        .lambdas
        .iter()
        .flat_map(|&l| cfg.sweep_seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results = run_cells(jobs, |&(lambda, seed)| {
        let mut cell_cfg = cfg.train_config();
        cell_cfg.lambda = lambda;
        cell_cfg.seed = seed;
        train_and_evaluate(&ds, &cell_cfg).map(|(out, record)| (lambda, seed, out, record))
    });

    let mut records = Vec::new();
    for result in results {
        let (lambda, seed, out, record) = result.map_err(train_err)?;
        let sub = dir.join(format!("lambda_{lambda}_seed_{seed}"));
        fs::create_dir_all(&sub)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", sub.display())))?;
        out.history
            .write_csv(&sub.join("history.csv"))
            .map_err(train_err)?;
        write_plot_csv(&sub.join("plot.csv"), &out.history)?;
        records.push(record);
    }
    let refs: Vec<&MetricsRecord> = records.iter().collect();
    write_metrics(&dir.join("sweep.csv"), &refs)?;

    // Per-lambda means across seeds.
    let mut body = String::from("lambda,acc,nmi,ari,fscore\n");
    for &lambda in &cfg.lambdas {
        let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.lambda == lambda).collect();
        let k = group.len() as f64;
        let mean = |f: fn(&MetricsRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / k;
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            lambda,
            mean(|r| r.acc),
            mean(|r| r.nmi),
            mean(|r| r.ari),
            mean(|r| r.fscore)
        ));
    }
    let means_path = dir.join("sweep_means.csv");
    fs::write(&means_path, body)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", means_path.display())))?;
    println!(
        "sweep complete: {} cells -> {}",
        records.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let (cfg, model) = load_run(&args.run)?;
    let (ds, _) = load_data(&cfg)?;
    let out = recompute_embedding(&cfg, &model, &ds)?;
    let f = &out.embedding;
    let path = args.out.unwrap_or_else(|| args.run.join("embeddings.csv"));
    let mut body = String::new();
    let header: Vec<String> = (0..f.ncols()).map(|j| format!("f{j}")).collect();
    body.push_str(&header.join(","));
    if ds.labels().is_some() {
        body.push_str(",label");
    }
    body.push('\n');
    for (i, row) in f.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        body.push_str(&cells.join(","));
        if let Some(labels) = ds.labels() {
            body.push_str(&format!(",{}", labels[i]));
        }
        body.push('\n');
    }
    fs::write(&path, body)
        .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    println!("embedding written to {}", path.display());
    Ok(())
}
