use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EmbeddingMatrix, Graph, NodeTable};

/// Planted-partition graph with Gaussian class-conditional features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SbmConfig {
    pub n: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub dim: usize,
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Allow `p_out > p_in`.
    pub heterophilic: bool,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig::standard()
    }
}

impl SbmConfig {
    /// The benchmark used throughout the test suite.
    pub fn standard() -> Self {
        SbmConfig {
            n: 400,
            num_classes: 4,
            p_in: 0.10,
            p_out: 0.01,
            dim: 16,
            separation: 1.0,
            sigma: 1.0,
            seed: 0,
            heterophilic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_in) || !prob(self.p_out) {
            return Err(Error::Config("edge probabilities must lie in [0, 1]".into()));
        }
        if !self.heterophilic && self.p_out > self.p_in {
            return Err(Error::Config(format!(
                "p_out {} exceeds p_in {}; set heterophilic to allow it",
                self.p_out, self.p_in
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.n == 0 || self.n % self.num_classes != 0 {
            return Err(Error::Config(format!(
                "{} nodes cannot be split evenly into {} classes",
                self.n, self.num_classes
            )));
        }
        if self.dim < self.num_classes {
            return Err(Error::Config(format!(
                "dimension {} is smaller than the class count {}",
                self.dim, self.num_classes
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !self.separation.is_finite() {
            return Err(Error::Config("sigma must be non-negative and finite".into()));
        }
        Ok(())
    }
}

/// A graph with embeddings and ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub embeddings: EmbeddingMatrix,
    pub table: NodeTable,
    pub description: String,
}

impl Dataset {
    pub fn labels(&self) -> Option<&[usize]> {
        self.table.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.table.num_classes()
    }
}

/// Node `i` belongs to block `i / (n / C)`.
pub fn gen_sbm(cfg: &SbmConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = cfg.n / cfg.num_classes;
    let labels: Vec<usize> = (0..cfg.n).map(|i| i / block).collect();

    let mut edges = Vec::new();
    for i in 0..cfg.n {
        for j in (i + 1)..cfg.n {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_edges(cfg.n, edges)?;

    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut x = ndarray::Array2::zeros((cfg.n, cfg.dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        row[labels[i]] += cfg.separation;
    }

    let class_names = (0..cfg.num_classes).map(|c| format!("class {c}")).collect();
    let texts = (0..cfg.n)
        .map(|i| format!("Synthetic node {i} from a planted partition benchmark."))
        .collect();
    Ok(Dataset {
        graph,
        embeddings: EmbeddingMatrix::new(x)?,
        table: NodeTable::new(Some(texts), Some(labels), class_names)?,
        description: format!(
            "A synthetic graph with {} nodes in {} communities.",
            cfg.n, cfg.num_classes
        ),
    })
}
