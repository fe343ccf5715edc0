use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::curvature::{curvature_bound_fd, gradient_bound_fd};
use super::loss::{evaluate, Objective};
use super::refine::{refine, RefineEvent};
use crate::error::{Error, Result};
use crate::gnn::{argmax, Gcn, GcnParams};
use crate::jsonl;
use crate::sampling::Bundle;

/// Step size safety factor applied to the smoothness-derived learning rate.
pub const ETA_AUTO_FACTOR: f64 = 0.9;
/// Largest number of nodes used when estimating `Ĝ` and `M̂`.
pub const MAX_PROBE_NODES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub refine_every: usize,
    pub bundle_floor: usize,
    pub seed: u64,
    /// Derive the learning rate from the estimated smoothness constant.
    pub eta_auto: bool,
    pub hidden_dim: usize,
    pub refinement: bool,
    pub objective: Objective,
    /// Stop once `‖∇L‖₂` falls to this value.
    pub grad_tol: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 2000,
            warmup_epochs: 50,
            refine_every: 25,
            bundle_floor: 2,
            seed: 0,
            eta_auto: false,
            hidden_dim: 64,
            refinement: true,
            objective: Objective::FULL,
            grad_tol: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.bundle_floor < 2 {
            return Err(Error::Config("bundle floor must be at least 2".into()));
        }
        if self.refine_every < 1 {
            return Err(Error::Config("refine_every must be at least 1".into()));
        }
        if self.hidden_dim < 1 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        let o = self.objective;
        if !(o.bundle_entropy || o.ranking || o.individual_entropy) {
            return Err(Error::Config("objective has no terms".into()));
        }
        Ok(())
    }

    fn refines_at(&self, epoch: usize) -> bool {
        self.refinement
            && epoch > self.warmup_epochs
            && (epoch - self.warmup_epochs) % self.refine_every == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub be_mean: f64,
    pub rank_mean: f64,
    pub grad_norm: f64,
    /// `‖∇L_BE‖_∞`, present when the objective includes the bundle entropy.
    pub grad_be_inf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub eta: f64,
    pub num_params: usize,
    pub g_hat: Option<f64>,
    pub m_hat: Option<f64>,
    /// `L` and `‖∇L‖₂` at the parameters returned.
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_accuracy: Option<f64>,
    pub refinement_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub events: Vec<RefineEvent>,
    pub summary: TrainSummary,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Refinement(&'a RefineEvent),
    Summary(&'a TrainSummary),
}

impl TrainReport {
    /// Epochs whose forward pass saw bundles changed by the previous refinement.
    pub fn refinement_epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self.events.iter().map(|ev| ev.epoch).collect();
        e.dedup();
        e
    }

    /// Largest loss increase between consecutive epochs, skipping steps across
    /// which the bundles were refined.
    pub fn max_increase_between_refinements(&self) -> f64 {
        let refined = self.refinement_epochs();
        self.epochs
            .windows(2)
            .filter(|w| !refined.contains(&w[0].epoch))
            .map(|w| w[1].loss - w[0].loss)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// One JSON object per line: epochs, then refinement events, then the summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let lines: Vec<ReportLine<'_>> = self
            .epochs
            .iter()
            .map(ReportLine::Epoch)
            .chain(self.events.iter().map(ReportLine::Refinement))
            .chain(std::iter::once(ReportLine::Summary(&self.summary)))
            .collect();
        jsonl::write(path, &lines)
    }
}

/// Deterministic probe: the first distinct members of labeled bundles.
pub fn probe_nodes(bundles: &[Bundle]) -> Vec<usize> {
    let mut nodes = Vec::new();
    for b in bundles.iter().filter(|b| b.label.is_some()) {
        for &m in &b.members {
            if !nodes.contains(&m) {
                nodes.push(m);
                if nodes.len() == MAX_PROBE_NODES {
                    return nodes;
                }
            }
        }
    }
    nodes
}

/// `(η, Ĝ, M̂)` with `η = 0.9 · mean|B| / (n_d (M̂ + Ĝ²))`.
pub fn auto_learning_rate(
    gcn: &Gcn,
    params: &GcnParams,
    bundles: &[Bundle],
) -> Result<(f64, f64, f64)> {
    let probe = probe_nodes(bundles);
    if probe.is_empty() {
        return Err(Error::Invalid("no labeled bundles to probe".into()));
    }
    let g = gradient_bound_fd(gcn, params, &probe, 1e-6)?;
    let m = curvature_bound_fd(gcn, params, &probe, 1e-3)?;
    let labeled: Vec<&Bundle> = bundles.iter().filter(|b| b.label.is_some()).collect();
    let mean_size =
        labeled.iter().map(|b| b.members.len()).sum::<usize>() as f64 / labeled.len() as f64;
    let eta = ETA_AUTO_FACTOR * mean_size / (params.len() as f64 * (m + g * g));
    Ok((eta, g, m))
}

/// Fraction of nodes whose arg-max logit equals the label.
pub fn accuracy_of(gcn: &Gcn, params: &GcnParams, labels: &[usize]) -> Result<f64> {
    let z = gcn.logits(params)?;
    if labels.len() != z.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} nodes",
            labels.len(),
            z.nrows()
        )));
    }
    let hits = z
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Full-batch gradient descent on the bundle objective, with periodic
/// refinement. `bundles` is updated in place by refinement.
pub fn train(
    gcn: &Gcn,
    bundles: &mut [Bundle],
    num_classes: usize,
    cfg: &TrainConfig,
    labels: Option<&[usize]>,
) -> Result<(GcnParams, TrainReport)> {
    cfg.validate()?;
    let mut params = GcnParams::init(gcn.input_dim(), cfg.hidden_dim, num_classes, cfg.seed);

    let (eta, g_hat, m_hat) = if cfg.eta_auto {
        let (eta, g, m) = auto_learning_rate(gcn, &params, bundles)?;
        info!("auto learning rate {eta:.3e} (Ĝ = {g:.4}, M̂ = {m:.4})");
        (eta, Some(g), Some(m))
    } else {
        (cfg.learning_rate, None, None)
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut events = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let trace = gcn.forward(&params)?;
        let eval = evaluate(&trace.z, bundles, cfg.objective)?;
        if !eval.value.is_finite() {
            return Err(Error::NonFinite { epoch, eta });
        }
        let mut grad = gcn.backward(&params, &trace, &eval.dz_entropy)?;
        let grad_be_inf = cfg.objective.bundle_entropy.then(|| {
            if cfg.objective.individual_entropy {
                // Entropy gradient mixes both terms; isolate the bundle part.
                let be_only = evaluate(&trace.z, bundles, Objective {
                    bundle_entropy: true,
                    ranking: false,
                    individual_entropy: false,
                })
                .and_then(|e| gcn.backward(&params, &trace, &e.dz_entropy));
                be_only.map(|g| g.norm_inf()).unwrap_or(f64::NAN)
            } else {
                grad.norm_inf()
            }
        });
        if let Some(dz_rank) = &eval.dz_rank {
            grad.scaled_add(1.0, &gcn.backward(&params, &trace, dz_rank)?);
        }
        let grad_norm = grad.norm_l2();
        epochs.push(EpochRecord {
            epoch,
            loss: eval.value,
            be_mean: eval.be_mean,
            rank_mean: eval.rank_mean,
            grad_norm,
            grad_be_inf,
        });
        epochs_run = epoch;
        if cfg.grad_tol.is_some_and(|tol| grad_norm <= tol) {
            debug!("gradient tolerance reached at epoch {epoch}");
            break;
        }

        params.scaled_add(-eta, &grad);
        if !params.is_finite() {
            return Err(Error::NonFinite { epoch, eta });
        }

        if cfg.refines_at(epoch) {
            let ev = refine(&trace.p, bundles, cfg.bundle_floor, epoch);
            debug!("epoch {epoch}: {} evictions", ev.len());
            events.extend(ev);
        }
    }

    // Statistics at the returned parameters.
    let trace = gcn.forward(&params)?;
    let eval = evaluate(&trace.z, bundles, cfg.objective)?;
    if !eval.value.is_finite() {
        return Err(Error::NonFinite {
            epoch: epochs_run,
            eta,
        });
    }
    let final_grad = gcn.backward(&params, &trace, &eval.dz())?;
    let final_accuracy = labels
        .map(|l| accuracy_of(gcn, &params, l))
        .transpose()?;

    let summary = TrainSummary {
        epochs_run,
        eta,
        num_params: params.len(),
        g_hat,
        m_hat,
        final_loss: eval.value,
        final_grad_norm: final_grad.norm_l2(),
        final_accuracy,
        refinement_events: events.len(),
    };
    Ok((
        params,
        TrainReport {
            epochs,
            events,
            summary,
        },
    ))
}
