use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::softmax_row;
use crate::sampling::Bundle;

/// Mean of the member logit rows, summed in ascending node order so the
/// result does not depend on member order.
pub fn mean_logits(z: &Array2<f64>, members: &[usize]) -> Result<Array1<f64>> {
    if members.is_empty() {
        return Err(Error::Invalid("empty bundle".into()));
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let mut acc = Array1::zeros(z.ncols());
    for m in sorted {
        if m >= z.nrows() {
            return Err(Error::Invalid(format!(
                "member {m} outside logits with {} rows",
                z.nrows()
            )));
        }
        acc += &z.row(m);
    }
    acc /= members.len() as f64;
    Ok(acc)
}

/// Bundle class distribution: softmax of the mean member logits.
pub fn bundle_distribution(z: &Array2<f64>, members: &[usize]) -> Result<Array1<f64>> {
    Ok(softmax_row(mean_logits(z, members)?.view()))
}

/// Cross-entropy of a bundle distribution against the bundle label.
pub fn loss_be(pb: ArrayView1<'_, f64>, label: usize) -> f64 {
    -pb[label].ln()
}

/// Ranking loss: zero when `label` attains the maximum, else `log(max / p[label])`.
pub fn loss_rank(pb: ArrayView1<'_, f64>, label: usize) -> f64 {
    let max = pb.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    (max.ln() - pb[label].ln()).max(0.0)
}

fn log_softmax(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

/// Which terms make up the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Objective {
    /// Bundle cross-entropy on the bundle distribution.
    pub bundle_entropy: bool,
    /// Ranking loss on the bundle distribution.
    pub ranking: bool,
    /// Per-member cross-entropy against the bundle label, scaled by 1/|B|.
    pub individual_entropy: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::FULL
    }
}

impl Objective {
    pub const FULL: Objective = Objective {
        bundle_entropy: true,
        ranking: true,
        individual_entropy: false,
    };
}

/// Objective value and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub be_mean: f64,
    pub rank_mean: f64,
    pub ie_mean: f64,
    pub labeled: usize,
    /// Gradient of the entropy terms (bundle and/or individual).
    pub dz_entropy: Array2<f64>,
    /// Gradient of the ranking term; `None` when it vanishes everywhere.
    pub dz_rank: Option<Array2<f64>>,
}

impl LossEval {
    pub fn dz(&self) -> Array2<f64> {
        match &self.dz_rank {
            Some(r) => &self.dz_entropy + r,
            None => self.dz_entropy.clone(),
        }
    }
}

/// Evaluates `objective` averaged over labeled bundles. Unlabeled bundles are skipped.
pub fn evaluate(z: &Array2<f64>, bundles: &[Bundle], objective: Objective) -> Result<LossEval> {
    let labeled: Vec<&Bundle> = bundles.iter().filter(|b| b.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Invalid("no labeled bundles to supervise with".into()));
    }
    let c = z.ncols();
    let count = labeled.len();
    let scale = 1.0 / count as f64;
    let mut dz_entropy = Array2::zeros(z.dim());
    let mut dz_rank: Option<Array2<f64>> = None;
    let (mut be_sum, mut rank_sum, mut ie_sum) = (0.0, 0.0, 0.0);

    for b in labeled {
        let y = b.label.expect("filtered");
        if y >= c {
            return Err(Error::Invalid(format!(
                "bundle {} label {y} out of range for {c} classes",
                b.id
            )));
        }
        let zbar = mean_logits(z, &b.members)?;
        let log_q = log_softmax(zbar.view());
        let member_w = scale / b.members.len() as f64;

        let be = -log_q[y];
        be_sum += be;
        if objective.bundle_entropy {
            let q = log_q.mapv(f64::exp);
            for &m in &b.members {
                let mut row = dz_entropy.row_mut(m);
                row.scaled_add(member_w, &q);
                row[y] -= member_w;
            }
        }

        // Strict argmax among the other classes, smallest index on ties.
        let mut top = 0;
        for k in 1..c {
            if zbar[k] > zbar[top] {
                top = k;
            }
        }
        let rank = if zbar[top] > zbar[y] {
            zbar[top] - zbar[y]
        } else {
            0.0
        };
        rank_sum += rank;
        if objective.ranking && rank > 0.0 {
            let grad = dz_rank.get_or_insert_with(|| Array2::zeros(z.dim()));
            for &m in &b.members {
                grad[[m, top]] += member_w;
                grad[[m, y]] -= member_w;
            }
        }

        let mut ie = 0.0;
        for &m in &b.members {
            let log_p = log_softmax(z.row(m));
            ie -= log_p[y];
            if objective.individual_entropy {
                let p = log_p.mapv(f64::exp);
                let mut row = dz_entropy.row_mut(m);
                row.scaled_add(member_w, &p);
                row[y] -= member_w;
            }
        }
        ie_sum += ie / b.members.len() as f64;
    }

    let (be_mean, rank_mean, ie_mean) = (be_sum * scale, rank_sum * scale, ie_sum * scale);
    let value = f64::from(u8::from(objective.bundle_entropy)) * be_mean
        + f64::from(u8::from(objective.ranking)) * rank_mean
        + f64::from(u8::from(objective.individual_entropy)) * ie_mean;
    Ok(LossEval {
        value,
        be_mean,
        rank_mean,
        ie_mean,
        labeled: count,
        dz_entropy,
        dz_rank,
    })
}

/// `L = mean over labeled bundles of (L_BE + L_R)` and `dL/dZ`.
pub fn total_loss_and_grad(z: &Array2<f64>, bundles: &[Bundle]) -> Result<(f64, Array2<f64>)> {
    let eval = evaluate(z, bundles, Objective::FULL)?;
    Ok((eval.value, eval.dz()))
}
