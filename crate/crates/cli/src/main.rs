use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pruneverify::attack::{robustness, select_benchmark, BenchmarkSet};
use pruneverify::data::{load_split, Dataset, DatasetName, Split};
use pruneverify::experiment::{
    self, data_dir_or_default, run_queries, targeted_queries, untargeted_queries, Engine, ExperimentConfig,
};
use pruneverify::pruning::{prune_neurons, prune_weights, PruneReport};
use pruneverify::training::{self, accuracy, Regularizer};
use pruneverify::verify::{self, export_milp, CompleteOptions, MilpVariant, Query, QueryMode};
use pruneverify::{serialize, Network, Vector};

#[derive(Parser)]
#[command(name = "pruneverify", version, about = "Train, prune, fuse, attack and verify fully-connected ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from scratch.
    Train(TrainArgs),
    /// Prune a trained network and fine-tune it.
    Prune(PruneArgs),
    /// Fold batch normalization into the preceding linear layers.
    Fuse(FuseArgs),
    /// Measure FGSM robustness and select a benchmark set.
    Attack(AttackArgs),
    /// Verify every benchmark query against one network.
    Verify(VerifyArgs),
    /// Write the MILP encoding of one query in LP format.
    ExportMilp(ExportArgs),
    /// Run the whole four-variant experiment.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding <dataset>/ IDX files [env: PRUNEVERIFY_DATA_DIR]
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
    dataset: DatasetArg,
}

impl DataArgs {
    fn load(&self, split: Split) -> Result<Dataset> {
        let dir = data_dir_or_default(self.data_dir.clone());
        load_split(&dir, self.dataset.into(), split).with_context(|| format!("loading data from {}", dir.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Fmnist,
}

impl From<DatasetArg> for DatasetName {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Mnist => DatasetName::Mnist,
            DatasetArg::Fmnist => DatasetName::Fmnist,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config; dataset, architecture and hyperparameters are read from it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the batch-norm scale penalty of the configured parameter set.
    #[arg(long)]
    sparse: bool,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PruneModeArg {
    Np,
    Wp,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long, value_enum)]
    mode: PruneModeArg,
    /// Sparsity rate; defaults to the configured parameter set.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_finetune: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Networks to attack; the benchmark agrees across all of them.
    #[arg(long = "net", required = true)]
    nets: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = pruneverify::attack::BENCHMARK_SIZE)]
    benchmark_size: usize,
    /// Where to write the benchmark set.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Incomplete,
    Complete,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = EngineArg::Complete)]
    engine: EngineArg,
    /// Per-query budget in seconds.
    #[arg(long, default_value_t = 600.0)]
    timeout: f64,
    /// Overrides the radius stored in the benchmark.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Targeted protocol instead of untargeted queries.
    #[arg(long)]
    targeted: bool,
    /// Let the complete engine try cheap attacks first.
    #[arg(long)]
    falsify: bool,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MilpVariantArg {
    Feasibility,
    MinEpsilon,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    net: PathBuf,
    /// Test-set index of the query image.
    #[arg(long)]
    image: usize,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Target class; defaults to the runner-up logit at the image.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_enum, default_value_t = MilpVariantArg::Feasibility)]
    variant: MilpVariantArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-query budget in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_net(path: &Path) -> Result<Network> {
    serialize::load(path).with_context(|| format!("reading network {}", path.display()))
}

fn train_split(config: &ExperimentConfig, data_dir: Option<PathBuf>) -> Result<Dataset> {
    let dir = data_dir_or_default(data_dir);
    let ds = load_split(&dir, config.dataset, Split::Train).with_context(|| format!("loading data from {}", dir.display()))?;
    Ok(match config.train_subset {
        Some(n) => ds.head(n),
        None => ds,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let ds = train_split(&config, args.data_dir)?;
    let hp = &config.hyperparams;
    let reg = if args.sparse {
        Regularizer::L2PlusGammaL1 { l2: hp.weight_decay, gamma: config.prune_config().lambda_gamma }
    } else {
        Regularizer::L2(hp.weight_decay)
    };
    let init = experiment::initial_network(config.architecture, config.seed)?;
    let (net, report) = training::train(init, &ds, hp, reg)?;
    serialize::save(&net, &args.out)?;
    if let Some(log) = &args.log {
        report.write_csv(log)?;
    }
    println!(
        "trained {} epochs, final loss {:.6}",
        report.epochs_run,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let net = load_net(&args.net)?;
    let prune = config.prune_config();
    let (label, rho) = match args.mode {
        PruneModeArg::Np => ("NP", args.rho.unwrap_or(prune.rho_np)),
        PruneModeArg::Wp => ("WP", args.rho.unwrap_or(prune.rho_wp)),
    };
    if !(0.0..1.0).contains(&rho) {
        bail!("rho must lie in [0, 1), got {rho}");
    }
    let (pruned, mask) = match args.mode {
        PruneModeArg::Np => (prune_neurons(&net, rho)?.0, None),
        PruneModeArg::Wp => {
            let (p, m) = prune_weights(&net, rho)?;
            (p, Some(m))
        }
    };
    let out = if args.no_finetune {
        pruned
    } else {
        let ds = train_split(&config, args.data_dir)?;
        training::fine_tune(pruned, &ds, &config.finetune_hyperparams(), mask.as_ref())?.0
    };
    serialize::save(&out, &args.out)?;
    println!("{}", PruneReport::CSV_HEADER);
    println!("{}", PruneReport::new(label, rho, &net, &out).csv_line());
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let fused = load_net(&args.net)?.fuse_batchnorm()?;
    serialize::save(&fused, &args.out)?;
    Ok(())
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    if !(args.epsilon >= 0.0) {
        bail!("epsilon must be nonnegative");
    }
    let test = args.data.load(Split::Test)?;
    let nets = args.nets.iter().map(|p| load_net(p)).collect::<Result<Vec<_>>>()?;
    println!("network,accuracy,robustness");
    for (path, net) in args.nets.iter().zip(&nets) {
        let acc = accuracy(net, &test)?;
        let rob = robustness(net, &test, args.epsilon, args.samples.min(test.len()), args.seed)?;
        println!("{},{acc:.4},{rob:.4}", path.display());
    }
    if let Some(out) = &args.out {
        let refs: Vec<&Network> = nets.iter().collect();
        let bench = select_benchmark(&refs, &test, args.epsilon, args.benchmark_size, args.seed)?;
        bench.save(out)?;
        eprintln!("benchmark: {} found, {} not found", bench.found.len(), bench.notfound.len());
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    if !(args.timeout > 0.0) {
        bail!("timeout must be positive");
    }
    let net = load_net(&args.net)?;
    let net = if net.has_batchnorm() { net.fuse_batchnorm()? } else { net };
    let mut bench = BenchmarkSet::load(&args.bench).with_context(|| format!("reading {}", args.bench.display()))?;
    if let Some(eps) = args.epsilon {
        bench.epsilon = eps;
    }
    let test = args.data.load(Split::Test)?;
    let queries = if args.targeted {
        targeted_queries(&bench, &test, net.output_dim())?
    } else {
        untargeted_queries(&bench, &test)?
    };
    let engine = match args.engine {
        EngineArg::Incomplete => Engine::Incomplete,
        EngineArg::Complete => Engine::Complete,
    };
    let options = CompleteOptions {
        falsify: args.falsify,
        ..CompleteOptions::with_timeout(Duration::from_secs_f64(args.timeout))
    };
    let (_, rows) = run_queries(&net, &queries, engine, &options)?;
    match &args.out {
        Some(path) => {
            if path.exists() {
                std::fs::remove_file(path).with_context(|| format!("replacing {}", path.display()))?;
            }
            verify::append_csv(path, &rows)?;
        }
        None => {
            println!("{}", verify::CSV_HEADER);
            for r in rows {
                println!("{r}");
            }
        }
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let net = load_net(&args.net)?;
    let net = if net.has_batchnorm() { net.fuse_batchnorm()? } else { net };
    let test = args.data.load(Split::Test)?;
    if args.image >= test.len() {
        bail!("image index {} out of range ({} test images)", args.image, test.len());
    }
    let x = test.image(args.image);
    let label = test.labels[args.image];
    let target = match args.target {
        Some(t) => t,
        None => {
            let y = net.forward(x)?;
            (0..y.len())
                .filter(|&c| c != label)
                .max_by(|&a, &b| y[a].total_cmp(&y[b]).then(b.cmp(&a)))
                .context("network has a single output")?
        }
    };
    let query = Query::new(Vector::from(x.to_vec()), args.epsilon, label, QueryMode::Targeted(target))?;
    let variant = match args.variant {
        MilpVariantArg::Feasibility => MilpVariant::Feasibility,
        MilpVariantArg::MinEpsilon => MilpVariant::MinEpsilon,
    };
    let stats = export_milp(&net, &query, variant, &args.out)?;
    println!(
        "label {label}, target {target}: {} variables, {} constraints, {} binaries",
        stats.variables, stats.constraints, stats.binaries
    );
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(t) = args.timeout {
        config.per_query_timeout = t;
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    config.validate()?;
    let data_dir = data_dir_or_default(args.data_dir);
    let report = experiment::run_experiment(&config, &data_dir, &args.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Verify(a) => cmd_verify(a),
        Command::ExportMilp(a) => cmd_export(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    // clap prints usage and exits with status 2 on bad flags
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
    }
}
