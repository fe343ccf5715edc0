use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sbm::{gen_sbm, Dataset, SbmConfig};
use crate::annotate::{
    annotate_all, annotate_oracle_node, mode_label, AnnotationCache, Annotator, LlmClient,
    LlmEndpointConfig, OracleConfig,
};
use crate::error::{Error, Result};
use crate::gnn::Gcn;
use crate::graph::{load_edge_list, load_embeddings, load_node_table, NormalizedAdjacency};
use crate::sampling::{sample_bundles, Bundle, Criterion, SamplingConfig};
use crate::supervise::{train, Objective, TrainConfig};

/// Supervision variants. `Full` is the complete method; the others each
/// remove or replace one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    #[default]
    #[serde(alias = "bundle")]
    Full,
    /// V1: members drawn uniformly instead of by proximity.
    #[serde(alias = "v1")]
    RandomSampling,
    /// V2: each node is queried on its own and trained with per-node CE.
    #[serde(alias = "v2")]
    IndividualQuery,
    /// V3: ranking loss only.
    #[serde(alias = "v3")]
    ROnly,
    /// V4: bundle entropy only.
    #[serde(alias = "v4")]
    BeOnly,
    /// V5: per-member cross-entropy against the bundle label, plus ranking.
    #[serde(alias = "v5")]
    Individual,
    /// V6: refinement disabled.
    #[serde(alias = "v6")]
    NoRefine,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 7] = [
        SupervisionMode::Full,
        SupervisionMode::RandomSampling,
        SupervisionMode::IndividualQuery,
        SupervisionMode::ROnly,
        SupervisionMode::BeOnly,
        SupervisionMode::Individual,
        SupervisionMode::NoRefine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SupervisionMode::Full => "full",
            SupervisionMode::RandomSampling => "random_sampling",
            SupervisionMode::IndividualQuery => "individual_query",
            SupervisionMode::ROnly => "r_only",
            SupervisionMode::BeOnly => "be_only",
            SupervisionMode::Individual => "individual",
            SupervisionMode::NoRefine => "no_refine",
        }
    }

    fn objective(self) -> Objective {
        let (bundle_entropy, ranking, individual_entropy) = match self {
            SupervisionMode::ROnly => (false, true, false),
            SupervisionMode::BeOnly | SupervisionMode::IndividualQuery => (true, false, false),
            SupervisionMode::Individual => (false, true, true),
            _ => (true, true, false),
        };
        Objective {
            bundle_entropy,
            ranking,
            individual_entropy,
        }
    }

    fn refines(self) -> bool {
        !matches!(
            self,
            SupervisionMode::NoRefine | SupervisionMode::IndividualQuery
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Sbm(SbmConfig),
    Files {
        edges: PathBuf,
        nodes: PathBuf,
        embeddings: PathBuf,
        class_names: Vec<String>,
        #[serde(default)]
        description: String,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Sbm(SbmConfig::standard())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Sbm(cfg) => gen_sbm(cfg),
            DatasetSource::Files {
                edges,
                nodes,
                embeddings,
                class_names,
                description,
            } => {
                let graph = load_edge_list(edges)?;
                let table = load_node_table(nodes, class_names)?;
                let embeddings = load_embeddings(embeddings)?;
                if embeddings.rows() != graph.n() {
                    return Err(Error::Shape(format!(
                        "{} embedding rows for {} nodes",
                        embeddings.rows(),
                        graph.n()
                    )));
                }
                Ok(Dataset {
                    graph,
                    embeddings,
                    table,
                    description: description.clone(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotatorConfig {
    /// The oracle seed is replaced by each replicate seed.
    Oracle(OracleConfig),
    Llm {
        #[serde(flatten)]
        endpoint: LlmEndpointConfig,
        #[serde(default)]
        cache: Option<PathBuf>,
    },
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig::Oracle(OracleConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub sampling: SamplingConfig,
    pub annotator: AnnotatorConfig,
    pub train: TrainConfig,
    pub mode: SupervisionMode,
    /// Each seed drives sampling, annotation noise and initialization.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            sampling: SamplingConfig::default(),
            annotator: AnnotatorConfig::default(),
            train: TrainConfig::default(),
            mode: SupervisionMode::Full,
            seeds: (0..10).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("no replicate seeds".into()));
        }
        self.sampling.validate()?;
        self.train.validate()?;
        match &self.annotator {
            AnnotatorConfig::Oracle(o) => o.validate(),
            AnnotatorConfig::Llm { endpoint, .. } => endpoint.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub queries: usize,
    pub labeled: usize,
    pub failed: usize,
    /// Share of labels equal to the true bundle mode (or true node label for
    /// individual queries).
    pub label_agreement: Option<f64>,
    pub refinement_events: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: SupervisionMode,
    pub replicates: Vec<ReplicateResult>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

impl PipelineReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.replicates.iter().filter_map(|r| r.accuracy).collect()
    }

    pub fn mean_label_agreement(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .replicates
            .iter()
            .filter_map(|r| r.label_agreement)
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

/// Mean and sample standard deviation. A single value has zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Standard deviation pooled over equally sized groups.
pub fn pooled_std(stds: &[f64]) -> f64 {
    (stds.iter().map(|s| s * s).sum::<f64>() / stds.len() as f64).sqrt()
}

struct Prepared {
    dataset: Dataset,
    gcn: Gcn,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let gcn = Gcn::new(NormalizedAdjacency::new(&dataset.graph), &dataset.embeddings)?;
    Ok(Prepared { dataset, gcn })
}

/// Distinct members in first-appearance order, one singleton bundle each.
fn singletons(bundles: &[Bundle]) -> Vec<Bundle> {
    let mut seen = std::collections::HashSet::new();
    bundles
        .iter()
        .flat_map(|b| b.members.iter().copied())
        .filter(|&m| seen.insert(m))
        .enumerate()
        .map(|(id, node)| Bundle::new(id, node, vec![node]))
        .collect()
}

struct Annotated {
    queries: usize,
    labeled: usize,
    failed: usize,
}

fn annotate(
    bundles: &mut [Bundle],
    ds: &Dataset,
    annotator: &AnnotatorConfig,
    individual: bool,
    seed: u64,
    llm: Option<&(LlmClient, AnnotationCache)>,
) -> Result<Annotated> {
    match annotator {
        AnnotatorConfig::Oracle(o) => {
            let labels = ds.labels().ok_or_else(|| {
                Error::Config("the oracle annotator needs ground-truth labels".into())
            })?;
            let config = OracleConfig { seed, ..*o };
            if individual {
                config.validate()?;
                for b in bundles.iter_mut() {
                    b.label = Some(annotate_oracle_node(b.core, labels, ds.num_classes(), &config));
                }
                Ok(Annotated {
                    queries: bundles.len(),
                    labeled: bundles.len(),
                    failed: 0,
                })
            } else {
                let s = annotate_all(
                    bundles,
                    &Annotator::Oracle {
                        labels,
                        class_names: &ds.table.class_names,
                        config,
                    },
                )?;
                Ok(Annotated {
                    queries: bundles.len(),
                    labeled: s.labeled,
                    failed: s.failed,
                })
            }
        }
        AnnotatorConfig::Llm { .. } => {
            let (client, cache) = llm.expect("client built for llm annotator");
            let s = annotate_all(
                bundles,
                &Annotator::Llm {
                    client,
                    table: &ds.table,
                    dataset_description: &ds.description,
                    cache,
                },
            )?;
            Ok(Annotated {
                queries: bundles.len(),
                labeled: s.labeled,
                failed: s.failed,
            })
        }
    }
}

fn label_agreement(bundles: &[Bundle], labels: Option<&[usize]>, c: usize) -> Option<f64> {
    let labels = labels?;
    let labeled: Vec<&Bundle> = bundles.iter().filter(|b| b.label.is_some()).collect();
    if labeled.is_empty() {
        return None;
    }
    let hits = labeled
        .iter()
        .filter(|b| b.label == Some(mode_label(&b.members, labels, c)))
        .count();
    Some(hits as f64 / labeled.len() as f64)
}

fn run_replicate(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    seed: u64,
    llm: Option<&(LlmClient, AnnotationCache)>,
) -> Result<ReplicateResult> {
    let ds = &prep.dataset;
    let mode = cfg.mode;
    let mut sampling = SamplingConfig {
        seed,
        ..cfg.sampling.clone()
    };
    if mode == SupervisionMode::RandomSampling {
        sampling.criterion = Criterion::Random;
    }
    let mut bundles = sample_bundles(&ds.graph, Some(&ds.embeddings), &sampling)?;
    let individual = mode == SupervisionMode::IndividualQuery;
    if individual {
        bundles = singletons(&bundles);
    }
    let ann = annotate(&mut bundles, ds, &cfg.annotator, individual, seed, llm)?;
    if ann.failed > 0 {
        warn!("seed {seed}: {} of {} annotations failed", ann.failed, ann.queries);
    }
    let agreement = label_agreement(&bundles, ds.labels(), ds.num_classes());
    if ann.labeled == 0 {
        return Err(Error::Invalid(format!("seed {seed}: no bundle was labeled")));
    }

    let train_cfg = TrainConfig {
        seed,
        objective: mode.objective(),
        refinement: cfg.train.refinement && mode.refines(),
        ..cfg.train.clone()
    };
    let (_, report) = train(
        &prep.gcn,
        &mut bundles,
        ds.num_classes(),
        &train_cfg,
        ds.labels(),
    )?;
    let s = &report.summary;
    Ok(ReplicateResult {
        seed,
        accuracy: s.final_accuracy,
        queries: ann.queries,
        labeled: ann.labeled,
        failed: ann.failed,
        label_agreement: agreement,
        refinement_events: s.refinement_events,
        epochs_run: s.epochs_run,
        final_loss: s.final_loss,
        final_grad_norm: s.final_grad_norm,
    })
}

fn run_prepared(prep: &Prepared, cfg: &ExperimentConfig) -> Result<PipelineReport> {
    let replicates = match &cfg.annotator {
        AnnotatorConfig::Oracle(_) => cfg
            .seeds
            .par_iter()
            .map(|&s| run_replicate(prep, cfg, s, None))
            .collect::<Result<Vec<_>>>()?,
        // Remote queries are already parallel within a replicate.
        AnnotatorConfig::Llm { endpoint, cache } => {
            let client = LlmClient::from_env(endpoint.clone())?;
            let cache = match cache {
                Some(p) => AnnotationCache::open(p)?,
                None => AnnotationCache::in_memory(),
            };
            let llm = (client, cache);
            cfg.seeds
                .iter()
                .map(|&s| run_replicate(prep, cfg, s, Some(&llm)))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let accs: Vec<f64> = replicates.iter().filter_map(|r| r.accuracy).collect();
    let (mean, std) = if accs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&accs);
        (Some(m), Some(s))
    };
    if let Some(m) = mean {
        info!("{}: mean accuracy {m:.4} over {} seeds", cfg.mode.name(), accs.len());
    }
    Ok(PipelineReport {
        mode: cfg.mode,
        replicates,
        mean_accuracy: mean,
        std_accuracy: std,
    })
}

/// Sampling, annotation, training and evaluation for every replicate seed.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineReport> {
    run_prepared(&prepare(cfg)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    BundleSize(Vec<usize>),
    NumBundles(Vec<usize>),
    NoiseRate(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::BundleSize(_) => "bundle_size",
            SweepAxis::NumBundles(_) => "num_bundles",
            SweepAxis::NoiseRate(_) => "noise_rate",
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepAxis::BundleSize(v) | SweepAxis::NumBundles(v) => v.len(),
            SweepAxis::NoiseRate(v) => v.len(),
        }
    }

    fn point(&self, base: &ExperimentConfig, i: usize) -> Result<(f64, ExperimentConfig)> {
        let mut cfg = base.clone();
        let value = match self {
            SweepAxis::BundleSize(v) => {
                cfg.sampling.bundle_size = v[i];
                v[i] as f64
            }
            SweepAxis::NumBundles(v) => {
                cfg.sampling.num_bundles = v[i];
                v[i] as f64
            }
            SweepAxis::NoiseRate(v) => {
                let AnnotatorConfig::Oracle(o) = &mut cfg.annotator else {
                    return Err(Error::Config("noise sweeps need the oracle annotator".into()));
                };
                o.noise_rate = v[i];
                v[i]
            }
        };
        cfg.validate()?;
        Ok((value, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

/// One pipeline run per axis value, all with the base config's seeds.
pub fn sweep(base: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepTable> {
    if axis.len() == 0 {
        return Err(Error::Config("sweep axis is empty".into()));
    }
    // Reject every bad value before spending time on the good ones.
    let points = (0..axis.len())
        .map(|i| axis.point(base, i))
        .collect::<Result<Vec<_>>>()?;
    let prep = prepare(base)?;
    let rows = points
        .iter()
        .map(|(value, cfg)| {
            let report = run_prepared(&prep, cfg)?;
            let accuracies = report.accuracies();
            if accuracies.is_empty() {
                return Err(Error::Config("sweeps need ground-truth labels".into()));
            }
            let (mean, std) = mean_std(&accuracies);
            Ok(SweepRow {
                value: *value,
                mean,
                std,
                accuracies,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        axis: axis.name().into(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryComparisonRow {
    pub query: String,
    pub label_agreement: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Bundle query against individual query under the same noisy oracle.
pub fn compare_queries(base: &ExperimentConfig) -> Result<Vec<QueryComparisonRow>> {
    if !matches!(base.annotator, AnnotatorConfig::Oracle(_)) {
        return Err(Error::Config("query comparison needs the oracle annotator".into()));
    }
    let prep = prepare(base)?;
    [
        ("bundle", SupervisionMode::Full),
        ("individual", SupervisionMode::IndividualQuery),
    ]
    .into_iter()
    .map(|(name, mode)| {
        let cfg = ExperimentConfig {
            mode,
            ..base.clone()
        };
        let report = run_prepared(&prep, &cfg)?;
        let missing = || Error::Config("query comparison needs ground-truth labels".into());
        Ok(QueryComparisonRow {
            query: name.into(),
            label_agreement: report.mean_label_agreement().ok_or_else(missing)?,
            accuracy_mean: report.mean_accuracy.ok_or_else(missing)?,
            accuracy_std: report.std_accuracy.ok_or_else(missing)?,
        })
    })
    .collect()
}
