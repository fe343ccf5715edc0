use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use dense_core::annotate::{
    annotate_all, AnnotationCache, Annotator, LlmClient, LlmEndpointConfig, OracleConfig,
};
use dense_core::bench::{
    accuracy, compare_queries, gen_sbm, run_pipeline, sweep, verify_convergence,
    ConvergenceConfig, ExperimentConfig, SbmConfig, SupervisionMode, SweepAxis,
};
use dense_core::gnn::{argmax, Gcn, GcnParams};
use dense_core::graph::{
    load_edge_list, load_embeddings, load_node_table, save_edge_list, save_embeddings,
    save_node_table, NormalizedAdjacency,
};
use dense_core::jsonl;
use dense_core::sampling::{sample_bundles, Bundle, Criterion, SamplingConfig};
use dense_core::supervise::{train, verify_theorem1, verify_theorem2, BoundInstance};

#[derive(Parser)]
#[command(name = "dense", version, about = "Zero-shot node classification from bundle-level labels")]
struct Cli {
    /// Base seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML experiment config; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-partition benchmark.
    GenSynth(GenSynth),
    /// Draw bundles from a graph.
    SampleBundles(SampleArgs),
    /// Label bundles with the oracle or an LLM endpoint.
    Annotate(AnnotateArgs),
    /// Train a GCN on labeled bundles.
    Train(TrainArgs),
    /// Accuracy of saved parameters against ground truth.
    Eval(EvalArgs),
    /// Run the experiment described by --config over its replicate seeds.
    Pipeline(PipelineArgs),
    /// Run the pipeline once per value of one axis.
    Sweep(SweepArgs),
    /// Compare bundle queries with per-node queries under the oracle.
    CompareQueries,
    /// Numerical checks of the objective's analytic claims.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenSynth {
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.10)]
    p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Allow p_out > p_in.
    #[arg(long)]
    heterophilic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Topological,
    Semantic,
    Random,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "topological")]
    criterion: CriterionArg,
    #[arg(long, default_value_t = 5)]
    bundle_size: usize,
    #[arg(long, default_value_t = 100)]
    num_bundles: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotatorArg {
    Oracle,
    Llm,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    bundles: PathBuf,
    /// Node records (`{"id", "text", "label"}` per line).
    #[arg(long)]
    nodes: PathBuf,
    /// One class name per line.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    annotator: AnnotatorArg,
    /// Oracle flip probability.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Dataset description placed at the top of each prompt.
    #[arg(long, default_value = "")]
    description: String,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Response cache; defaults to `<out>/llm_cache.jsonl`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Labeled bundles.
    #[arg(long)]
    bundles: PathBuf,
    /// Class names, one per line.
    #[arg(long)]
    classes: PathBuf,
    /// Node records with ground truth, for reporting accuracy.
    #[arg(long)]
    nodes: Option<PathBuf>,
    #[arg(long, conflicts_with = "eta_auto")]
    eta: Option<f64>,
    #[arg(long)]
    eta_auto: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    refine_every: Option<usize>,
    #[arg(long)]
    floor: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    RandomSampling,
    IndividualQuery,
    ROnly,
    BeOnly,
    Individual,
    NoRefine,
}

impl From<ModeArg> for SupervisionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SupervisionMode::Full,
            ModeArg::RandomSampling => SupervisionMode::RandomSampling,
            ModeArg::IndividualQuery => SupervisionMode::IndividualQuery,
            ModeArg::ROnly => SupervisionMode::ROnly,
            ModeArg::BeOnly => SupervisionMode::BeOnly,
            ModeArg::Individual => SupervisionMode::Individual,
            ModeArg::NoRefine => SupervisionMode::NoRefine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    BundleSize,
    NumBundles,
    NoiseRate,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    theorem: u8,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Bundle size for the first two checks.
    #[arg(long)]
    bundle_size: Option<usize>,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Enable refinement in the convergence check.
    #[arg(long)]
    refine: bool,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn gcn_from(graph: &Path, embeddings: &Path) -> Result<Gcn> {
    let g = load_edge_list(graph)?;
    let x = load_embeddings(embeddings)?;
    Ok(Gcn::new(NormalizedAdjacency::new(&g), &x)?)
}

fn gen_synth(cli: &Cli, a: &GenSynth) -> Result<()> {
    let cfg = SbmConfig {
        n: a.n,
        num_classes: a.classes,
        p_in: a.p_in,
        p_out: a.p_out,
        dim: a.dim,
        separation: a.separation,
        sigma: a.sigma,
        seed: cli.seed.unwrap_or(0),
        heterophilic: a.heterophilic,
    };
    let ds = gen_sbm(&cfg)?;
    save_edge_list(&ds.graph, &cli.out.join("graph.txt"))?;
    save_embeddings(&ds.embeddings, &cli.out.join("embeddings.txt"))?;
    save_node_table(&ds.table, cfg.n, &cli.out.join("nodes.jsonl"))?;
    fs::write(cli.out.join("classes.txt"), ds.table.class_names.join("\n") + "\n")?;
    write_json(&cli.out.join("sbm.json"), &cfg)?;
    println!(
        "{} nodes, {} edges, homophily {:.3}",
        cfg.n,
        ds.graph.edge_count(),
        ds.graph.homophily(ds.labels().expect("labeled"))
    );
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let graph = load_edge_list(&a.graph)?;
    let x = a.embeddings.as_deref().map(load_embeddings).transpose()?;
    let cfg = SamplingConfig {
        criterion: match a.criterion {
            CriterionArg::Topological => Criterion::Topological,
            CriterionArg::Semantic => Criterion::Semantic,
            CriterionArg::Random => Criterion::Random,
        },
        bundle_size: a.bundle_size,
        num_bundles: a.num_bundles,
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    let bundles = sample_bundles(&graph, x.as_ref(), &cfg)?;
    jsonl::write(&cli.out.join("bundles.jsonl"), &bundles)?;
    println!("{} bundles of size {}", bundles.len(), cfg.bundle_size);
    Ok(())
}

fn annotate(cli: &Cli, a: &AnnotateArgs) -> Result<()> {
    let classes = read_lines(&a.classes)?;
    let table = load_node_table(&a.nodes, &classes)?;
    let mut bundles: Vec<Bundle> = jsonl::read(&a.bundles)?;
    let summary = match a.annotator {
        AnnotatorArg::Oracle => {
            let labels = table
                .labels
                .as_deref()
                .context("the oracle needs labels in the node file")?;
            annotate_all(
                &mut bundles,
                &Annotator::Oracle {
                    labels,
                    class_names: &classes,
                    config: OracleConfig {
                        noise_rate: a.noise,
                        seed: cli.seed.unwrap_or(0),
                    },
                },
            )?
        }
        AnnotatorArg::Llm => {
            let mut endpoint = LlmEndpointConfig::default();
            if let Some(u) = &a.base_url {
                endpoint.base_url = u.clone();
            }
            if let Some(m) = &a.model {
                endpoint.model = m.clone();
            }
            let client = LlmClient::from_env(endpoint)?;
            let cache_path = a
                .cache
                .clone()
                .unwrap_or_else(|| cli.out.join("llm_cache.jsonl"));
            let cache = AnnotationCache::open(&cache_path)?;
            annotate_all(
                &mut bundles,
                &Annotator::Llm {
                    client: &client,
                    table: &table,
                    dataset_description: &a.description,
                    cache: &cache,
                },
            )?
        }
    };
    jsonl::write(&cli.out.join("labeled_bundles.jsonl"), &bundles)?;
    jsonl::write(&cli.out.join("annotations.jsonl"), &summary.records)?;
    println!("{} labeled, {} failed", summary.labeled, summary.failed);
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let base = load_config(cli)?;
    let mut cfg = base.train;
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    if let Some(eta) = a.eta {
        cfg.learning_rate = eta;
    }
    cfg.eta_auto |= a.eta_auto;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.warmup_epochs = a.warmup.unwrap_or(cfg.warmup_epochs);
    cfg.refine_every = a.refine_every.unwrap_or(cfg.refine_every);
    cfg.bundle_floor = a.floor.unwrap_or(cfg.bundle_floor);
    cfg.hidden_dim = a.hidden.unwrap_or(cfg.hidden_dim);
    cfg.refinement &= !a.no_refine;

    let classes = read_lines(&a.classes)?;
    let gcn = gcn_from(&a.graph, &a.embeddings)?;
    let mut bundles: Vec<Bundle> = jsonl::read(&a.bundles)?;
    let table = a
        .nodes
        .as_deref()
        .map(|p| load_node_table(p, &classes))
        .transpose()?;
    let labels = table.as_ref().and_then(|t| t.labels.as_deref());
    let (params, report) = train(&gcn, &mut bundles, classes.len(), &cfg, labels)?;

    params.save(&cli.out.join("params"), cfg.seed)?;
    report.write_jsonl(&cli.out.join("train_report.jsonl"))?;
    jsonl::write(&cli.out.join("refined_bundles.jsonl"), &bundles)?;
    let s = &report.summary;
    println!(
        "{} epochs, eta {:.3e}, loss {:.6}, |grad| {:.3e}, {} evictions",
        s.epochs_run, s.eta, s.final_loss, s.final_grad_norm, s.refinement_events
    );
    if let Some(acc) = s.final_accuracy {
        println!("accuracy {acc:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    id: usize,
    predicted: String,
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let classes = read_lines(&a.classes)?;
    let gcn = gcn_from(&a.graph, &a.embeddings)?;
    let (params, _) = GcnParams::load(&a.params)?;
    let z = gcn.logits(&params)?;
    let preds: Vec<Prediction> = z
        .rows()
        .into_iter()
        .enumerate()
        .map(|(id, row)| Prediction {
            id,
            predicted: classes[argmax(row)].clone(),
        })
        .collect();
    jsonl::write(&cli.out.join("predictions.jsonl"), &preds)?;
    let table = load_node_table(&a.nodes, &classes)?;
    match table.labels.as_deref() {
        Some(labels) => println!("accuracy {:.4}", accuracy(&params, &gcn, labels)?),
        None => println!("no ground truth; wrote predictions only"),
    }
    Ok(())
}

fn pipeline(cli: &Cli, a: &PipelineArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    let report = run_pipeline(&cfg)?;
    jsonl::write(&cli.out.join("replicates.jsonl"), &report.replicates)?;
    write_json(&cli.out.join("pipeline.json"), &report)?;
    for r in &report.replicates {
        println!(
            "seed {:>4}  accuracy {}  labeled {}/{}",
            r.seed,
            r.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            r.labeled,
            r.queries
        );
    }
    if let (Some(m), Some(s)) = (report.mean_accuracy, report.std_accuracy) {
        println!("{}: {m:.4} ± {s:.4}", cfg.mode.name());
    }
    Ok(())
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    let ints = || -> Result<Vec<usize>> {
        a.values
            .iter()
            .map(|v| v.trim().parse().with_context(|| format!("bad value {v:?}")))
            .collect()
    };
    let axis = match a.axis {
        AxisArg::BundleSize => SweepAxis::BundleSize(ints()?),
        AxisArg::NumBundles => SweepAxis::NumBundles(ints()?),
        AxisArg::NoiseRate => SweepAxis::NoiseRate(
            a.values
                .iter()
                .map(|v| v.trim().parse().with_context(|| format!("bad value {v:?}")))
                .collect::<Result<_>>()?,
        ),
    };
    let table = sweep(&cfg, &axis)?;
    jsonl::write(&cli.out.join("sweep.jsonl"), &table.rows)?;
    println!("{:>12} {:>8} {:>8}", table.axis, "mean", "std");
    for r in &table.rows {
        println!("{:>12} {:>8.4} {:>8.4}", r.value, r.mean, r.std);
    }
    Ok(())
}

fn compare(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let rows = compare_queries(&cfg)?;
    jsonl::write(&cli.out.join("query_comparison.jsonl"), &rows)?;
    println!("{:>10} {:>10} {:>10} {:>10}", "query", "agreement", "acc mean", "acc std");
    for r in &rows {
        println!(
            "{:>10} {:>10.4} {:>10.4} {:>10.4}",
            r.query, r.label_agreement, r.accuracy_mean, r.accuracy_std
        );
    }
    Ok(())
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let passed = match a.theorem {
        1 => {
            let r = verify_theorem1(a.trials, a.classes, a.bundle_size.unwrap_or(5), seed)?;
            write_json(&cli.out.join("verify_outlier_tolerance.json"), &r)?;
            println!(
                "{} of {} kept trials pass ({} draws), worst margin {:.3e}",
                r.passed, r.kept, r.draws, r.worst_margin
            );
            r.pass_fraction == 1.0
        }
        2 => {
            let inst = BoundInstance {
                bundle_size: a.bundle_size.unwrap_or(BoundInstance::default().bundle_size),
                ..Default::default()
            };
            let r = verify_theorem2(&inst, seed)?;
            write_json(&cli.out.join("verify_gradient_bounds.json"), &r)?;
            for p in &r.points {
                println!(
                    "{:>10}  |grad| {:.4} <= {:.4} {}  |hess| {:.4} <= {:.4} {}",
                    p.point,
                    p.grad_inf,
                    p.grad_bound,
                    if p.grad_ok { "ok" } else { "VIOLATED" },
                    p.hess_max,
                    p.hess_bound,
                    if p.hess_ok { "ok" } else { "VIOLATED" },
                );
            }
            println!(
                "Lipschitz probe {:.4} vs constant {:.4}",
                r.lipschitz_observed, r.smoothness_constant
            );
            r.passed
        }
        _ => {
            let r = verify_convergence(&ConvergenceConfig {
                refinement: a.refine,
                seed,
                ..Default::default()
            })?;
            write_json(&cli.out.join("verify_convergence.json"), &r)?;
            println!(
                "eta {:.3e}, {} epochs, |grad| {:.3e} -> {:.3e}, max step increase {:.3e}",
                r.eta, r.epochs_run, r.initial_grad_norm, r.final_grad_norm, r.max_step_increase
            );
            r.monotone && r.converged
        }
    };
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if !passed {
        bail!("check failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    info!("writing to {}", cli.out.display());

    match &cli.command {
        Command::GenSynth(a) => gen_synth(&cli, a),
        Command::SampleBundles(a) => sample(&cli, a),
        Command::Annotate(a) => annotate(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Pipeline(a) => pipeline(&cli, a),
        Command::Sweep(a) => sweep_cmd(&cli, a),
        Command::CompareQueries => compare(&cli),
        Command::Verify(a) => verify(&cli, a),
    }
}
