//! Synthetic data, evaluation and experiment orchestration.

mod convergence;
mod experiment;
mod sbm;

pub use convergence::{verify_convergence, ConvergenceConfig, ConvergenceReport, MONOTONE_SLACK};
pub use experiment::{
    compare_queries, mean_std, pooled_std, run_pipeline, sweep, AnnotatorConfig, DatasetSource,
    ExperimentConfig, PipelineReport, QueryComparisonRow, ReplicateResult, SupervisionMode,
    SweepAxis, SweepRow, SweepTable,
};
pub use sbm::{gen_sbm, Dataset, SbmConfig};

use crate::error::Result;
use crate::gnn::{Gcn, GcnParams};

/// Share of nodes whose arg-max logit is the true class; ties go to the
/// smallest class index.
pub fn accuracy(params: &GcnParams, gcn: &Gcn, labels: &[usize]) -> Result<f64> {
    crate::supervise::accuracy_of(gcn, params, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EmbeddingMatrix, Graph, NormalizedAdjacency};
    use ndarray::Array2;

    fn gcn(n: usize) -> Gcn {
        let g = Graph::from_edges(n, (1..n).map(|i| (i - 1, i))).unwrap();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64 / 10.0);
        Gcn::new(NormalizedAdjacency::new(&g), &EmbeddingMatrix::new(x).unwrap()).unwrap()
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let acc = accuracy(&GcnParams::zeros(3, 2, 4), &gcn(8), &labels).unwrap();
        assert_eq!(acc, 0.25);
    }

    #[test]
    fn counts_matches() {
        let g = gcn(10);
        let params = GcnParams::init(3, 4, 2, 1);
        let z = g.logits(&params).unwrap();
        let pred: Vec<usize> = z.rows().into_iter().map(|r| crate::gnn::argmax(r)).collect();
        assert_eq!(accuracy(&params, &g, &pred).unwrap(), 1.0);
        let half: Vec<usize> = pred
            .iter()
            .enumerate()
            .map(|(i, &p)| if i < 5 { p } else { 1 - p })
            .collect();
        assert_eq!(accuracy(&params, &g, &half).unwrap(), 0.5);
        assert!(accuracy(&params, &g, &half[..9]).is_err());
    }
}
