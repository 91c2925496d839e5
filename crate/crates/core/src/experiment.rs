//! The four-variant pipeline: train, prune, fuse, attack, verify, report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{robustness, select_benchmark, BenchmarkSet};
use crate::data::{load_split, Dataset, DatasetName, Split};
use crate::error::{Error, Result};
use crate::network::{Architecture, Network};
use crate::pruning::{self, ParamSet, PruneConfig, PruneReport};
use crate::training::{self, accuracy, HyperParams, Regularizer};
use crate::verify::{self, certify_incomplete, verify_complete, CompleteOptions, Query, QueryMode, Verdict, VerifyResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Sparse,
    #[serde(rename = "WP")]
    Wp,
    #[serde(rename = "NP")]
    Np,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Sparse, Variant::Wp, Variant::Np];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Sparse => "Sparse",
            Variant::Wp => "WP",
            Variant::Np => "NP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub architecture: Architecture,
    pub param_set: ParamSet,
    /// Replaces the preset rates when present.
    pub prune: Option<PruneConfig>,
    pub hyperparams: HyperParams,
    /// Epoch cap for fine-tuning after pruning; defaults to the training cap.
    pub finetune_epochs: Option<usize>,
    /// Train on the first `n` training images only.
    pub train_subset: Option<usize>,
    pub epsilon: f64,
    pub per_query_timeout: f64,
    pub benchmark_size: usize,
    pub robustness_samples: usize,
    /// Variants handed to the complete verifier.
    pub complete_variants: Vec<Variant>,
    /// Also run the targeted protocol (one query per found image, every
    /// other class for not-found images).
    pub targeted: bool,
    /// Let the complete engine try cheap attacks before and during search.
    pub falsify: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Mnist,
            architecture: Architecture::Net1,
            param_set: ParamSet::Set1,
            prune: None,
            hyperparams: HyperParams::default(),
            finetune_epochs: None,
            train_subset: None,
            epsilon: 0.1,
            per_query_timeout: 600.0,
            benchmark_size: crate::attack::BENCHMARK_SIZE,
            robustness_samples: 1000,
            complete_variants: Variant::ALL.to_vec(),
            targeted: false,
            falsify: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn prune_config(&self) -> PruneConfig {
        self.prune.unwrap_or_else(|| self.param_set.config(self.architecture))
    }

    pub fn finetune_hyperparams(&self) -> HyperParams {
        HyperParams {
            max_epochs: self.finetune_epochs.unwrap_or(self.hyperparams.max_epochs),
            ..self.hyperparams.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.per_query_timeout > 0.0) {
            return Err(Error::Config("per_query_timeout must be positive".into()));
        }
        self.hyperparams.validate()?;
        self.prune_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: 0,
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// All four trained variants, before fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct Variants {
    pub baseline: Network,
    pub sparse: Network,
    pub wp: Network,
    pub np: Network,
    pub prune_reports: Vec<PruneReport>,
}

impl Variants {
    pub fn get(&self, v: Variant) -> &Network {
        match v {
            Variant::Baseline => &self.baseline,
            Variant::Sparse => &self.sparse,
            Variant::Wp => &self.wp,
            Variant::Np => &self.np,
        }
    }
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage { stage: name, source: Box::new(e) }
}

/// Trains Baseline and Sparse from one initialization and derives WP from
/// Baseline and NP from Sparse.
pub fn build_variants(config: &ExperimentConfig, train: &Dataset) -> Result<Variants> {
    let hp = &config.hyperparams;
    let ft = config.finetune_hyperparams();
    let prune = config.prune_config();
    let init = Network::initialize(config.architecture.widths(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;

    tracing::info!("training baseline");
    let baseline = training::train(init.clone(), train, hp, Regularizer::L2(hp.weight_decay))
        .map_err(stage("baseline"))?
        .0;
    tracing::info!("sparse training");
    let sparse = pruning::sparse_train(init, train, &prune, hp).map_err(stage("sparse"))?;

    tracing::info!("weight pruning");
    let (wp_pruned, mask) = pruning::prune_weights(&baseline, prune.rho_wp).map_err(stage("wp"))?;
    let wp = training::fine_tune(wp_pruned, train, &ft, Some(&mask)).map_err(stage("wp"))?.0;
    tracing::info!("neuron pruning");
    let (np_pruned, _) = pruning::prune_neurons(&sparse, prune.rho_np).map_err(stage("np"))?;
    let np = training::fine_tune(np_pruned, train, &ft, None).map_err(stage("np"))?.0;

    let prune_reports = vec![
        PruneReport::new("WP", prune.rho_wp, &baseline, &wp),
        PruneReport::new("NP", prune.rho_np, &sparse, &np),
    ];
    Ok(Variants { baseline, sparse, wp, np, prune_reports })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub queries: usize,
    pub solved: usize,
    pub safe: usize,
    pub adversarial: usize,
    pub timeouts: usize,
    pub mean_time_s: f64,
}

impl EngineSummary {
    pub fn from_results(results: &[VerifyResult]) -> Self {
        let mut s = Self { queries: results.len(), ..Self::default() };
        let mut total = Duration::ZERO;
        for r in results {
            total += r.stats.elapsed;
            match r.verdict {
                Verdict::Safe => s.safe += 1,
                Verdict::Adversarial { .. } => s.adversarial += 1,
                Verdict::Timeout => s.timeouts += 1,
                Verdict::Unknown => {}
            }
        }
        s.solved = s.safe + s.adversarial;
        if !results.is_empty() {
            s.mean_time_s = total.as_secs_f64() / results.len() as f64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub accuracy: f64,
    pub robustness: f64,
    pub hidden_neurons: usize,
    pub nonzero_weights: usize,
    pub incomplete: EngineSummary,
    pub complete: Option<EngineSummary>,
    pub targeted: Option<EngineSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: DatasetName,
    pub architecture: Architecture,
    pub param_set: ParamSet,
    pub epsilon: f64,
    pub benchmark: BenchmarkSet,
    pub rows: Vec<VariantRow>,
}

impl ExperimentReport {
    pub const CSV_HEADER: &'static str = "variant,accuracy,robustness,hidden_neurons,nonzero_weights,\
incomplete_certified,incomplete_mean_s,complete_solved,complete_safe,complete_adversarial,complete_timeouts,complete_mean_s";

    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let c = r.complete.unwrap_or_default();
            let solved = r.complete.map_or(String::new(), |c| c.solved.to_string());
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{},{},{},{:.4},{},{},{},{},{:.4}",
                r.variant.name(),
                r.accuracy,
                r.robustness,
                r.hidden_neurons,
                r.nonzero_weights,
                r.incomplete.safe,
                r.incomplete.mean_time_s,
                solved,
                c.safe,
                c.adversarial,
                c.timeouts,
                c.mean_time_s
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "# {} / {} / {} (epsilon {})\n\nBenchmark: {} images ({} attackable, {} not).\n\n",
            self.architecture.name(),
            self.dataset.as_str(),
            self.param_set.name(),
            self.epsilon,
            self.benchmark.len(),
            self.benchmark.found.len(),
            self.benchmark.notfound.len()
        );
        out.push_str("| Network | Accuracy | Robustness | # HL Neurons | # Weights |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.3} | {:.3} | {} | {} |",
                r.variant.name(),
                r.accuracy,
                r.robustness,
                r.hidden_neurons,
                r.nonzero_weights
            );
        }
        out.push_str("\n| Network | Complete solved | Complete mean time (s) | Incomplete certified | Incomplete mean time (s) |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let (solved, time) = match r.complete {
                Some(c) => (format!("{}/{}", c.solved, c.queries), format!("{:.2}", c.mean_time_s)),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "| {} | {} | {} | {}/{} | {:.3} |",
                r.variant.name(),
                solved,
                time,
                r.incomplete.safe,
                r.incomplete.queries,
                r.incomplete.mean_time_s
            );
        }
        out
    }
}

/// Untargeted queries for every benchmark image.
pub fn untargeted_queries(bench: &BenchmarkSet, test: &Dataset) -> Result<Vec<(String, Query)>> {
    let mut out = Vec::new();
    let images = bench
        .found
        .iter()
        .map(|f| (f.index, f.label))
        .chain(bench.notfound.iter().map(|n| (n.index, n.label)));
    for (index, label) in images {
        let q = Query::new(test.image(index).to_vec().into(), bench.epsilon, label, QueryMode::Untargeted)?;
        out.push((format!("img{index}"), q));
    }
    Ok(out)
}

/// Targeted protocol: the attack's class for each found image, and every
/// other class for the first not-found image.
pub fn targeted_queries(bench: &BenchmarkSet, test: &Dataset, classes: usize) -> Result<Vec<(String, Query)>> {
    let mut out = Vec::new();
    for f in &bench.found {
        let q = Query::new(test.image(f.index).to_vec().into(), bench.epsilon, f.label, QueryMode::Targeted(f.target))?;
        out.push((format!("img{}_t{}", f.index, f.target), q));
    }
    for n in bench.notfound.iter().take(1) {
        for k in (0..classes).filter(|&k| k != n.label) {
            let q = Query::new(test.image(n.index).to_vec().into(), bench.epsilon, n.label, QueryMode::Targeted(k))?;
            out.push((format!("img{}_t{}", n.index, k), q));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Engine {
    Incomplete,
    Complete,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Incomplete => "incomplete",
            Engine::Complete => "complete",
        }
    }
}

/// Runs every query through one engine; returns results and CSV rows.
pub fn run_queries(
    net: &Network,
    queries: &[(String, Query)],
    engine: Engine,
    options: &CompleteOptions,
) -> Result<(Vec<VerifyResult>, Vec<String>)> {
    let mut results = Vec::with_capacity(queries.len());
    let mut rows = Vec::with_capacity(queries.len());
    for (id, q) in queries {
        let r = match engine {
            Engine::Incomplete => certify_incomplete(net, q)?,
            Engine::Complete => verify_complete(net, q, options)?,
        };
        tracing::debug!(query = %id, verdict = r.verdict.name(), ms = r.stats.elapsed.as_millis() as u64, "verified");
        rows.push(verify::csv_row(id, q, &r));
        results.push(r);
    }
    Ok((results, rows))
}

pub fn data_dir_or_default(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("PRUNEVERIFY_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full protocol; artifacts go to `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut train = load_split(data_dir, config.dataset, Split::Train).map_err(stage("data"))?;
    if let Some(n) = config.train_subset {
        train = train.head(n);
    }
    let test = load_split(data_dir, config.dataset, Split::Test).map_err(stage("data"))?;

    let variants = build_variants(config, &train)?;
    let mut prune_csv = format!("{}\n", PruneReport::CSV_HEADER);
    for r in &variants.prune_reports {
        prune_csv.push_str(&r.csv_line());
        prune_csv.push('\n');
    }
    write(&out_dir.join("prune.csv"), &prune_csv)?;

    let mut fused = Vec::with_capacity(4);
    for v in Variant::ALL {
        let net = variants.get(v);
        let tag = v.name().to_ascii_lowercase();
        crate::serialize::save(net, out_dir.join(format!("{tag}.json")))?;
        let f = net.fuse_batchnorm().map_err(stage("fuse"))?;
        crate::serialize::save(&f, out_dir.join(format!("{tag}_fused.json")))?;
        fused.push(f);
    }

    let refs: Vec<&Network> = fused.iter().collect();
    let bench = select_benchmark(&refs, &test, config.epsilon, config.benchmark_size, config.seed)
        .map_err(stage("benchmark"))?;
    bench.save(out_dir.join("benchmark.json"))?;

    let untargeted = untargeted_queries(&bench, &test)?;
    let targeted = if config.targeted {
        targeted_queries(&bench, &test, fused[0].output_dim())?
    } else {
        Vec::new()
    };
    let options = CompleteOptions {
        falsify: config.falsify,
        ..CompleteOptions::with_timeout(Duration::from_secs_f64(config.per_query_timeout))
    };
    let verify_csv = out_dir.join("verification.csv");
    if verify_csv.exists() {
        std::fs::remove_file(&verify_csv).map_err(|e| Error::io(&verify_csv, e))?;
    }

    let mut rows = Vec::with_capacity(4);
    for (v, net) in Variant::ALL.into_iter().zip(&fused) {
        tracing::info!(variant = v.name(), "measuring");
        let counts = net.param_counts();
        let acc = accuracy(net, &test).map_err(stage("accuracy"))?;
        let rob = robustness(net, &test, config.epsilon, config.robustness_samples.min(test.len()), config.seed)
            .map_err(stage("robustness"))?;
        let tag = |engine: &str, rows: Vec<String>| -> Vec<String> {
            rows.into_iter().map(|r| format!("{}/{engine}/{r}", v.name())).collect()
        };
        let (inc, inc_rows) =
            run_queries(net, &untargeted, Engine::Incomplete, &options).map_err(stage("incomplete verification"))?;
        verify::append_csv(&verify_csv, &tag("incomplete", inc_rows))?;
        let complete = if config.complete_variants.contains(&v) {
            let (res, res_rows) =
                run_queries(net, &untargeted, Engine::Complete, &options).map_err(stage("complete verification"))?;
            verify::append_csv(&verify_csv, &tag("complete", res_rows))?;
            Some(EngineSummary::from_results(&res))
        } else {
            None
        };
        let targeted_summary = if config.targeted && config.complete_variants.contains(&v) {
            let (res, res_rows) =
                run_queries(net, &targeted, Engine::Complete, &options).map_err(stage("targeted verification"))?;
            verify::append_csv(&verify_csv, &tag("targeted", res_rows))?;
            Some(EngineSummary::from_results(&res))
        } else {
            None
        };
        rows.push(VariantRow {
            variant: v,
            accuracy: acc,
            robustness: rob,
            hidden_neurons: counts.hidden_neurons,
            nonzero_weights: counts.nonzero_weights,
            incomplete: EngineSummary::from_results(&inc),
            complete,
            targeted: targeted_summary,
        });
    }
    let report = ExperimentReport {
        dataset: config.dataset,
        architecture: config.architecture,
        param_set: config.param_set,
        epsilon: config.epsilon,
        benchmark: bench,
        rows,
    };
    write(&out_dir.join("report.csv"), &report.to_csv())?;
    write(&out_dir.join("report.md"), &report.to_markdown())?;
    write(
        &out_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}

/// Convenience used by the CLI to seed a training run from a config file.
pub fn initial_network(arch: Architecture, seed: u64) -> Result<Network> {
    Network::initialize(arch.widths(), &mut ChaCha8Rng::seed_from_u64(seed))
}
