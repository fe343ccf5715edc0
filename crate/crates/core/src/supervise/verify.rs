//! Numerical checks of the outlier-tolerance inequality and of the bundle
//! entropy gradient/curvature bounds.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::curvature::{curvature_bound_fd, gradient_bound_fd};
use super::loss::{evaluate, Objective};
use crate::error::{Error, Result};
use crate::gnn::{argmax, softmax_row, Gcn, GcnParams};
use crate::graph::{EmbeddingMatrix, Graph, NormalizedAdjacency};
use crate::sampling::Bundle;

/// Slack allowed on either side of the tolerance inequality.
pub const TOLERANCE_SLACK: f64 = 1e-10;
/// Central-difference step for the score derivatives. Truncation error is
/// `O(h²)` and rounding error `O(ε/h)`, both well under the slack at this step.
pub const TOLERANCE_FD_STEP: f64 = 1e-5;

pub const GRAD_BOUND_SLACK: f64 = 1e-8;
pub const HESS_BOUND_SLACK: f64 = 1e-6;

const BE_ONLY: Objective = Objective {
    bundle_entropy: true,
    ranking: false,
    individual_entropy: false,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceTrial {
    pub label: usize,
    pub outlier_class: usize,
    pub g_be: f64,
    pub g_ie: f64,
    /// Closed forms `p(B)_{m'} / |B|` and `p_o[m'] / |B|`.
    pub g_be_closed: f64,
    pub g_ie_closed: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceReport {
    pub kept: usize,
    pub draws: usize,
    pub passed: usize,
    pub pass_fraction: f64,
    /// Largest `g_BE - g_IE` over kept trials.
    pub worst_margin: f64,
    pub max_fd_error: f64,
}

fn log_softmax(v: &Array1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + v.mapv(|x| (x - m).exp()).sum().ln();
    v.mapv(|x| x - lse)
}

/// `L_BE` as a function of the member score matrix (one row per member).
fn be_of_scores(scores: &Array2<f64>, label: usize) -> f64 {
    let mean = scores.mean_axis(ndarray::Axis(0)).expect("non-empty bundle");
    -log_softmax(&mean)[label]
}

/// `CE(softmax(ℓ_o), ŷ) / |B|`.
fn ie_of_scores(scores: &Array2<f64>, outlier: usize, label: usize) -> f64 {
    let row = scores.row(outlier).to_owned();
    -log_softmax(&row)[label] / scores.nrows() as f64
}

/// Evaluates one bundle of member scores. Returns `None` when the trial does
/// not meet the inequality's preconditions.
pub fn tolerance_trial(scores: &Array2<f64>, outlier: usize, label: usize) -> Option<ToleranceTrial> {
    let size = scores.nrows() as f64;
    let p_o = softmax_row(scores.row(outlier));
    let mean = scores.mean_axis(ndarray::Axis(0))?;
    let q = softmax_row(mean.view());
    let m = argmax(p_o.view());
    if m == label || p_o[m] < q[m] {
        return None;
    }
    let h = TOLERANCE_FD_STEP;
    let shifted = |delta: f64| {
        let mut s = scores.clone();
        s[[outlier, m]] += delta;
        s
    };
    let (plus, minus) = (shifted(h), shifted(-h));
    let g_be = (be_of_scores(&plus, label) - be_of_scores(&minus, label)) / (2.0 * h);
    let g_ie = (ie_of_scores(&plus, outlier, label) - ie_of_scores(&minus, outlier, label))
        / (2.0 * h);
    let passed = g_be >= -TOLERANCE_SLACK && g_be <= g_ie + TOLERANCE_SLACK;
    Some(ToleranceTrial {
        label,
        outlier_class: m,
        g_be,
        g_ie,
        g_be_closed: q[m] / size,
        g_ie_closed: p_o[m] / size,
        passed,
    })
}

/// Draws random bundles until `trials` of them satisfy the preconditions and
/// reports how many of those satisfy `0 ≤ g_BE ≤ g_IE`.
pub fn verify_theorem1(
    trials: usize,
    num_classes: usize,
    bundle_size: usize,
    seed: u64,
) -> Result<ToleranceReport> {
    if trials == 0 || num_classes < 2 || bundle_size < 2 {
        return Err(Error::Invalid(format!(
            "need trials >= 1, classes >= 2, bundle size >= 2; got {trials}, {num_classes}, {bundle_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 2.0).expect("valid std");
    let mut report = ToleranceReport {
        kept: 0,
        draws: 0,
        passed: 0,
        pass_fraction: 0.0,
        worst_margin: f64::NEG_INFINITY,
        max_fd_error: 0.0,
    };
    // A kept trial needs the outlier to favour a non-label class at least as
    // strongly as the bundle does, which random draws hit often.
    let budget = trials.saturating_mul(1000);
    while report.kept < trials {
        if report.draws >= budget {
            return Err(Error::SamplingExhausted {
                attempts: report.draws,
                succeeded: report.kept,
                requested: trials,
            });
        }
        report.draws += 1;
        let scores =
            Array2::from_shape_simple_fn((bundle_size, num_classes), || normal.sample(&mut rng));
        let label = rng.random_range(0..num_classes);
        let outlier = rng.random_range(0..bundle_size);
        let Some(t) = tolerance_trial(&scores, outlier, label) else {
            continue;
        };
        report.kept += 1;
        report.passed += usize::from(t.passed);
        report.worst_margin = report.worst_margin.max(t.g_be - t.g_ie);
        report.max_fd_error = report
            .max_fd_error
            .max((t.g_be - t.g_be_closed).abs())
            .max((t.g_ie - t.g_ie_closed).abs());
    }
    report.pass_fraction = report.passed as f64 / report.kept as f64;
    Ok(report)
}

/// Small single-bundle problem for the bound checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundInstance {
    pub nodes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub bundle_size: usize,
    pub edge_prob: f64,
    /// Random parameters are drawn uniformly from `[-scale, scale]`.
    pub param_scale: f64,
    pub random_points: usize,
    pub lipschitz_pairs: usize,
}

impl Default for BoundInstance {
    fn default() -> Self {
        BoundInstance {
            nodes: 8,
            input_dim: 4,
            hidden_dim: 4,
            num_classes: 3,
            bundle_size: 5,
            edge_prob: 0.4,
            param_scale: 1.0,
            random_points: 10,
            lipschitz_pairs: 20,
        }
    }
}

impl BoundInstance {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.nodes, self.input_dim, self.hidden_dim, self.num_classes];
        if dims.iter().any(|&v| v == 0 || v > 10) {
            return Err(Error::Config("instance dimensions must lie in 1..=10".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.bundle_size < 1 || self.bundle_size > self.nodes {
            return Err(Error::Config(format!(
                "bundle size {} outside 1..={}",
                self.bundle_size, self.nodes
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(Error::Config("edge probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    /// `"zero"` or `"random-k"`.
    pub point: String,
    pub g_hat: f64,
    pub m_hat: f64,
    pub grad_inf: f64,
    pub grad_bound: f64,
    pub hess_max: f64,
    pub hess_bound: f64,
    /// Confidence of the bundle label; the gradient can reach `2Ĝ(1 - q_y)`.
    pub q_label: f64,
    pub grad_ok: bool,
    pub hess_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bundle_size: usize,
    pub num_params: usize,
    pub points: Vec<BoundPoint>,
    /// `2 n_d (M̂ + Ĝ²) / |B|` with the largest estimates seen.
    pub smoothness_constant: f64,
    pub lipschitz_observed: f64,
    pub lipschitz_ok: bool,
    pub passed: bool,
}

struct Problem {
    gcn: Gcn,
    bundle: Bundle,
    members: Vec<usize>,
}

fn build_problem(inst: &BoundInstance, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let mut edges = Vec::new();
    for i in 0..inst.nodes {
        for j in (i + 1)..inst.nodes {
            if rng.random_bool(inst.edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let graph = Graph::from_edges(inst.nodes, edges)?;
    let x = Array2::from_shape_simple_fn((inst.nodes, inst.input_dim), || {
        rng.random_range(-1.0..1.0)
    });
    let gcn = Gcn::new(NormalizedAdjacency::new(&graph), &EmbeddingMatrix::new(x)?)?;
    let members: Vec<usize> = (0..inst.bundle_size).collect();
    let mut bundle = Bundle::new(0, 0, members.clone());
    bundle.label = Some(rng.random_range(0..inst.num_classes));
    Ok(Problem {
        gcn,
        bundle,
        members,
    })
}

fn be_gradient(pb: &Problem, params: &GcnParams) -> Result<(GcnParams, f64)> {
    let trace = pb.gcn.forward(params)?;
    let eval = evaluate(&trace.z, std::slice::from_ref(&pb.bundle), BE_ONLY)?;
    let grad = pb.gcn.backward(params, &trace, &eval.dz_entropy)?;
    let q = super::loss::bundle_distribution(&trace.z, &pb.members)?;
    Ok((grad, q[pb.bundle.label.expect("labeled")]))
}

/// Largest Hessian entry of `L_BE`, from central differences of the analytic
/// gradient.
fn be_hessian_max(pb: &Problem, params: &GcnParams, eps: f64) -> Result<f64> {
    let base = params.to_flat();
    let (d, h, c) = (params.input_dim(), params.hidden_dim(), params.num_classes());
    let mut best = 0.0f64;
    for j in 0..base.len() {
        let mut grads = Vec::with_capacity(2);
        for delta in [eps, -eps] {
            let mut flat = base.clone();
            flat[j] += delta;
            let p = GcnParams::from_flat(d, h, c, &flat)?;
            grads.push(be_gradient(pb, &p)?.0.to_flat());
        }
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            best = best.max(((a - b) / (2.0 * eps)).abs());
        }
    }
    Ok(best)
}

fn random_params(inst: &BoundInstance, rng: &mut ChaCha8Rng) -> GcnParams {
    let (d, h, c) = (inst.input_dim, inst.hidden_dim, inst.num_classes);
    let n = d * h + h + h * c + c;
    let s = inst.param_scale;
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-s..s)).collect();
    GcnParams::from_flat(d, h, c, &flat).expect("consistent length")
}

fn check_point(pb: &Problem, params: &GcnParams, point: String) -> Result<BoundPoint> {
    let size = pb.members.len() as f64;
    let g_hat = gradient_bound_fd(&pb.gcn, params, &pb.members, 1e-6)?;
    let m_hat = curvature_bound_fd(&pb.gcn, params, &pb.members, 1e-3)?;
    let (grad, q_label) = be_gradient(pb, params)?;
    let grad_inf = grad.norm_inf();
    let hess_max = be_hessian_max(pb, params, 1e-6)?;
    let grad_bound = 2.0 * g_hat / size;
    let hess_bound = 2.0 * (m_hat + g_hat * g_hat) / size;
    Ok(BoundPoint {
        point,
        g_hat,
        m_hat,
        grad_inf,
        grad_bound,
        hess_max,
        hess_bound,
        q_label,
        grad_ok: grad_inf <= grad_bound + GRAD_BOUND_SLACK,
        hess_ok: hess_max <= hess_bound + HESS_BOUND_SLACK,
    })
}

/// Checks `‖∇L_BE‖_∞ ≤ 2Ĝ/|B|` and `max|∇²L_BE| ≤ 2(M̂+Ĝ²)/|B|` at `θ = 0`
/// and at random parameter points, then probes the implied Lipschitz constant.
pub fn verify_theorem2(inst: &BoundInstance, seed: u64) -> Result<BoundReport> {
    inst.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pb = build_problem(inst, &mut rng)?;
    let (d, h, c) = (inst.input_dim, inst.hidden_dim, inst.num_classes);

    let mut points = vec![check_point(&pb, &GcnParams::zeros(d, h, c), "zero".into())?];
    for k in 0..inst.random_points {
        let params = random_params(inst, &mut rng);
        points.push(check_point(&pb, &params, format!("random-{k}"))?);
    }

    let g_max = points.iter().map(|p| p.g_hat).fold(0.0, f64::max);
    let m_max = points.iter().map(|p| p.m_hat).fold(0.0, f64::max);
    let n_d = d * h + h + h * c + c;
    let smoothness_constant = 2.0 * n_d as f64 * (m_max + g_max * g_max) / inst.bundle_size as f64;

    let mut lipschitz_observed = 0.0f64;
    for _ in 0..inst.lipschitz_pairs {
        let a = random_params(inst, &mut rng);
        let b = random_params(inst, &mut rng);
        let (ga, _) = be_gradient(&pb, &a)?;
        let (mut diff, _) = be_gradient(&pb, &b)?;
        diff.scaled_add(-1.0, &ga);
        let mut dtheta = b.clone();
        dtheta.scaled_add(-1.0, &a);
        lipschitz_observed = lipschitz_observed.max(diff.norm_l2() / dtheta.norm_l2());
    }

    let lipschitz_ok = lipschitz_observed <= smoothness_constant;
    let passed = lipschitz_ok && points.iter().all(|p| p.grad_ok && p.hess_ok);
    Ok(BoundReport {
        bundle_size: inst.bundle_size,
        num_params: n_d,
        points,
        smoothness_constant,
        lipschitz_observed,
        lipschitz_ok,
        passed,
    })
}
