use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::sampling::{Bundle, Eviction};

/// Confidences closer than this are treated as a full tie and left alone.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineEvent {
    pub epoch: usize,
    pub bundle_id: usize,
    pub node: usize,
}

/// One eviction round: every member whose confidence in the bundle label
/// equals the bundle minimum is removed.
///
/// A bundle is skipped if eviction would leave fewer than `floor` members or
/// if all member confidences lie within [`TIE_TOLERANCE`] of each other.
pub fn refine(
    p: &Array2<f64>,
    bundles: &mut [Bundle],
    floor: usize,
    epoch: usize,
) -> Vec<RefineEvent> {
    let mut events = Vec::new();
    for bundle in bundles.iter_mut() {
        let Some(y) = bundle.label else { continue };
        let conf: Vec<f64> = bundle.members.iter().map(|&m| p[[m, y]]).collect();
        let lo = conf.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = conf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= TIE_TOLERANCE {
            continue;
        }
        let survivors = conf.iter().filter(|&&c| c > lo).count();
        if survivors < floor {
            continue;
        }
        let mut kept = Vec::with_capacity(survivors);
        for (&node, &c) in bundle.members.iter().zip(&conf) {
            if c > lo {
                kept.push(node);
            } else {
                bundle.evicted.push(Eviction { epoch, node });
                events.push(RefineEvent {
                    epoch,
                    bundle_id: bundle.id,
                    node,
                });
            }
        }
        bundle.members = kept;
    }
    events
}
