//! Finite-difference estimates of the logit derivative bounds
//! `G = max |dz_ic / dθ_j|` and `M = max |d²z_ic / dθ_j dθ_k|`.

use ndarray::Array2;

use crate::error::Result;
use crate::gnn::{Gcn, GcnParams};

fn perturbed(base: &[f64], shape: (usize, usize, usize), j: usize, delta: f64) -> GcnParams {
    let mut flat = base.to_vec();
    flat[j] += delta;
    GcnParams::from_flat(shape.0, shape.1, shape.2, &flat).expect("same length")
}

fn shape(p: &GcnParams) -> (usize, usize, usize) {
    (p.input_dim(), p.hidden_dim(), p.num_classes())
}

fn node_logits(gcn: &Gcn, params: &GcnParams, nodes: &[usize]) -> Result<Vec<f64>> {
    let z = gcn.logits(params)?;
    Ok(nodes
        .iter()
        .flat_map(|&i| z.row(i).to_vec())
        .collect())
}

/// Central-difference Jacobian of the logits of `nodes`; rows are `(node, class)`
/// pairs in order, columns are flattened parameters.
pub fn logit_jacobian_fd(
    gcn: &Gcn,
    params: &GcnParams,
    nodes: &[usize],
    eps: f64,
) -> Result<Array2<f64>> {
    let base = params.to_flat();
    let sh = shape(params);
    let rows = nodes.len() * params.num_classes();
    let mut jac = Array2::zeros((rows, base.len()));
    for j in 0..base.len() {
        let plus = node_logits(gcn, &perturbed(&base, sh, j, eps), nodes)?;
        let minus = node_logits(gcn, &perturbed(&base, sh, j, -eps), nodes)?;
        for r in 0..rows {
            jac[[r, j]] = (plus[r] - minus[r]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// `Ĝ`: largest absolute first derivative of any logit of `nodes`.
pub fn gradient_bound_fd(gcn: &Gcn, params: &GcnParams, nodes: &[usize], eps: f64) -> Result<f64> {
    Ok(logit_jacobian_fd(gcn, params, nodes, eps)?
        .iter()
        .fold(0.0, |m, v| m.max(v.abs())))
}

/// `M̂` from central differences of the analytic logit gradients taken along
/// every second-layer parameter.
///
/// Inside a region where the ReLU pattern is fixed, the logits are affine in
/// each layer's parameters separately, so only the mixed first/second-layer
/// block of the Hessian can be non-zero; this routine measures that block.
/// Perturbing second-layer weights never changes the ReLU pattern.
pub fn curvature_bound_fd(
    gcn: &Gcn,
    params: &GcnParams,
    nodes: &[usize],
    eps: f64,
) -> Result<f64> {
    let base = params.to_flat();
    let sh = shape(params);
    let (d, h, c) = sh;
    let n = gcn.num_nodes();
    let first_layer2 = d * h + h;
    let mut best = 0.0f64;
    for j in first_layer2..base.len() {
        let offset = j - first_layer2;
        // Flattened w2 is row-major (h x c), followed by b2 (c).
        let class = if offset < h * c { offset % c } else { offset - h * c };
        let mut grads = Vec::with_capacity(2);
        for delta in [eps, -eps] {
            let p = perturbed(&base, sh, j, delta);
            let trace = gcn.forward(&p)?;
            let mut per_node = Vec::with_capacity(nodes.len());
            for &i in nodes {
                let mut dz = Array2::zeros((n, c));
                dz[[i, class]] = 1.0;
                per_node.push(gcn.backward(&p, &trace, &dz)?.to_flat());
            }
            grads.push(per_node);
        }
        for (gp, gm) in grads[0].iter().zip(&grads[1]) {
            for (a, b) in gp.iter().zip(gm) {
                best = best.max(((a - b) / (2.0 * eps)).abs());
            }
        }
    }
    Ok(best)
}

/// Brute-force `(Ĝ, M̂)` from forward passes only: central first differences
/// and the four-point mixed second difference over every parameter pair.
/// Intended for small models.
pub fn bounds_brute_force(
    gcn: &Gcn,
    params: &GcnParams,
    nodes: &[usize],
    eps1: f64,
    eps2: f64,
) -> Result<(f64, f64)> {
    let g = gradient_bound_fd(gcn, params, nodes, eps1)?;
    let base = params.to_flat();
    let sh = shape(params);
    let nd = base.len();
    let center = node_logits(gcn, params, nodes)?;
    let eval = |deltas: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut flat = base.clone();
        for &(j, dv) in deltas {
            flat[j] += dv;
        }
        node_logits(gcn, &GcnParams::from_flat(sh.0, sh.1, sh.2, &flat)?, nodes)
    };
    let mut m = 0.0f64;
    for j in 0..nd {
        let pp = eval(&[(j, eps2)])?;
        let mm = eval(&[(j, -eps2)])?;
        for r in 0..center.len() {
            let diag = (pp[r] - 2.0 * center[r] + mm[r]) / (eps2 * eps2);
            m = m.max(diag.abs());
        }
        for k in (j + 1)..nd {
            let a = eval(&[(j, eps2), (k, eps2)])?;
            let b = eval(&[(j, eps2), (k, -eps2)])?;
            let c = eval(&[(j, -eps2), (k, eps2)])?;
            let e = eval(&[(j, -eps2), (k, -eps2)])?;
            for r in 0..center.len() {
                let mixed = (a[r] - b[r] - c[r] + e[r]) / (4.0 * eps2 * eps2);
                m = m.max(mixed.abs());
            }
        }
    }
    Ok((g, m))
}
