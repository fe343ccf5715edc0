//! Simulated annotator: reports the true mode class, flipped to a random
//! other class with probability `noise_rate`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Bundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        Ok(())
    }
}

// Bundle queries and per-node queries draw from disjoint stream ranges.
const NODE_STREAM_OFFSET: u64 = 1 << 40;

/// Most frequent label among `nodes`; ties go to the smallest class index.
pub fn mode_label(nodes: &[usize], labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &node in nodes {
        counts[labels[node]] += 1;
    }
    let mut best = 0;
    for (class, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = class;
        }
    }
    best
}

fn corrupt(truth: usize, num_classes: usize, noise_rate: f64, rng: &mut ChaCha8Rng) -> usize {
    if num_classes < 2 || noise_rate <= 0.0 {
        return truth;
    }
    if rng.random::<f64>() < noise_rate {
        let other = rng.random_range(0..num_classes - 1);
        if other >= truth {
            other + 1
        } else {
            other
        }
    } else {
        truth
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn annotate_oracle(
    bundle: &Bundle,
    labels: &[usize],
    num_classes: usize,
    cfg: &OracleConfig,
) -> usize {
    let truth = mode_label(&bundle.members, labels, num_classes);
    let mut rng = stream_rng(cfg.seed, bundle.id as u64);
    corrupt(truth, num_classes, cfg.noise_rate, &mut rng)
}

/// Individual query for one node, with the same noise model.
pub fn annotate_oracle_node(
    node: usize,
    labels: &[usize],
    num_classes: usize,
    cfg: &OracleConfig,
) -> usize {
    let mut rng = stream_rng(cfg.seed, NODE_STREAM_OFFSET + node as u64);
    corrupt(labels[node], num_classes, cfg.noise_rate, &mut rng)
}
