//! Bundle construction around randomly drawn core nodes.
//!
//! Topological bundles draw members from the smallest BFS ball around the
//! core that holds enough candidates; semantic bundles take the core's
//! nearest neighbours in embedding space.

use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EmbeddingMatrix, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub epoch: usize,
    pub node: usize,
}

/// A core node plus nearby members, optionally carrying its annotated mode label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub id: usize,
    pub core: usize,
    pub members: Vec<usize>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub evicted: Vec<Eviction>,
}

impl Bundle {
    pub fn new(id: usize, core: usize, members: Vec<usize>) -> Self {
        Bundle {
            id,
            core,
            members,
            label: None,
            evicted: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Topological,
    Semantic,
    /// Members drawn uniformly from the whole graph. Only used as an ablation.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub criterion: Criterion,
    pub bundle_size: usize,
    pub num_bundles: usize,
    pub seed: u64,
    pub max_resample_attempts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            criterion: Criterion::Topological,
            bundle_size: 5,
            num_bundles: 100,
            seed: 0,
            max_resample_attempts: 1000,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bundle_size < 2 {
            return Err(Error::Config(format!(
                "bundle size must be at least 2, got {}",
                self.bundle_size
            )));
        }
        if self.num_bundles < 1 {
            return Err(Error::Config("number of bundles must be at least 1".into()));
        }
        Ok(())
    }
}

/// Radius of the BFS ball used for a topological bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopSize {
    pub k: usize,
    /// The core's component ran out of nodes before reaching the target size.
    pub saturated: bool,
}

fn check_core(graph: &Graph, core: usize) -> Result<()> {
    if core >= graph.n() {
        return Err(Error::Invalid(format!(
            "core {core} out of range for graph with {} nodes",
            graph.n()
        )));
    }
    if graph.degree(core) == 0 {
        return Err(Error::IsolatedCore(core));
    }
    Ok(())
}

/// Smallest `k` whose `1..=k`-hop neighbourhood holds at least `bundle_size - 1` nodes.
pub fn adaptive_hop(graph: &Graph, core: usize, bundle_size: usize) -> Result<HopSize> {
    check_core(graph, core)?;
    let need = bundle_size.saturating_sub(1);
    let dist = graph.hop_distances(core)?;
    let mut per_level: Vec<usize> = Vec::new();
    for d in dist.into_iter().flatten().filter(|&d| d > 0) {
        if per_level.len() < d {
            per_level.resize(d, 0);
        }
        per_level[d - 1] += 1;
    }
    let mut cumulative = 0;
    for (level, count) in per_level.iter().enumerate() {
        cumulative += count;
        if cumulative >= need {
            return Ok(HopSize {
                k: level + 1,
                saturated: false,
            });
        }
    }
    Ok(HopSize {
        k: per_level.len(),
        saturated: true,
    })
}

fn neighbourhood(graph: &Graph, core: usize, k: usize) -> Vec<usize> {
    // BFS truncated at depth k; returned in ascending index order.
    let mut depth = vec![usize::MAX; graph.n()];
    depth[core] = 0;
    let mut queue = VecDeque::from([core]);
    let mut found = Vec::new();
    while let Some(u) = queue.pop_front() {
        if depth[u] == k {
            continue;
        }
        for &v in graph.neighbors(u) {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                found.push(v);
                queue.push_back(v);
            }
        }
    }
    found.sort_unstable();
    found
}

/// Core plus a uniform sample of `bundle_size - 1` nodes from its adaptive-hop ball.
pub fn sample_topological<R: Rng + ?Sized>(
    graph: &Graph,
    core: usize,
    bundle_size: usize,
    rng: &mut R,
) -> Result<Bundle> {
    let hop = adaptive_hop(graph, core, bundle_size)?;
    let pool = neighbourhood(graph, core, hop.k);
    let take = (bundle_size - 1).min(pool.len());
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    let mut members = Vec::with_capacity(take + 1);
    members.push(core);
    members.extend(picked);
    Ok(Bundle::new(0, core, members))
}

/// Core plus its `bundle_size - 1` nearest other nodes by Euclidean distance.
/// Ties go to the smaller node index.
pub fn sample_semantic(
    embeddings: &EmbeddingMatrix,
    core: usize,
    bundle_size: usize,
) -> Result<Bundle> {
    let x = embeddings.data();
    let n = x.nrows();
    if core >= n {
        return Err(Error::Invalid(format!(
            "core {core} out of range for {n} embeddings"
        )));
    }
    if n < bundle_size {
        return Err(Error::Invalid(format!(
            "cannot build a bundle of {bundle_size} from {n} nodes"
        )));
    }
    let anchor = x.row(core);
    let mut ranked: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != core)
        .map(|i| {
            let d2: f64 = x
                .row(i)
                .iter()
                .zip(anchor.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut members = vec![core];
    members.extend(ranked.iter().take(bundle_size - 1).map(|&(_, i)| i));
    Ok(Bundle::new(0, core, members))
}

/// Core plus uniformly random other nodes, ignoring proximity.
pub fn sample_random<R: Rng + ?Sized>(
    n: usize,
    core: usize,
    bundle_size: usize,
    rng: &mut R,
) -> Result<Bundle> {
    if n < bundle_size {
        return Err(Error::Invalid(format!(
            "cannot build a bundle of {bundle_size} from {n} nodes"
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, n - 1, bundle_size - 1)
        .into_iter()
        .map(|i| if i >= core { i + 1 } else { i })
        .collect();
    picked.sort_unstable();
    let mut members = vec![core];
    members.extend(picked);
    Ok(Bundle::new(0, core, members))
}

fn bundle_rng(seed: u64, bundle_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(bundle_id as u64 + 1);
    rng
}

/// Draws `num_bundles` bundles. Output depends only on the inputs and `cfg.seed`.
pub fn sample_bundles(
    graph: &Graph,
    embeddings: Option<&EmbeddingMatrix>,
    cfg: &SamplingConfig,
) -> Result<Vec<Bundle>> {
    cfg.validate()?;
    let n = graph.n();
    if n == 0 {
        return Err(Error::Invalid("graph has no nodes".into()));
    }
    if let Some(x) = embeddings {
        if x.rows() != n {
            return Err(Error::Shape(format!(
                "{} embedding rows for {n} nodes",
                x.rows()
            )));
        }
    }
    let semantic_x = match (cfg.criterion, embeddings) {
        (Criterion::Semantic, Some(x)) => Some(x),
        (Criterion::Semantic, None) => {
            return Err(Error::Config(
                "semantic sampling requires embeddings".into(),
            ))
        }
        _ => None,
    };

    let mut core_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: VecDeque<usize> = if cfg.num_bundles <= n {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut core_rng);
        order.into()
    } else {
        VecDeque::new()
    };
    let mut next_core = |rng: &mut ChaCha8Rng| queue.pop_front().unwrap_or_else(|| rng.random_range(0..n));

    let mut bundles = Vec::with_capacity(cfg.num_bundles);
    let mut redraws = 0;
    while bundles.len() < cfg.num_bundles {
        let id = bundles.len();
        let core = next_core(&mut core_rng);
        let mut rng = bundle_rng(cfg.seed, id);
        let built = match cfg.criterion {
            Criterion::Topological => sample_topological(graph, core, cfg.bundle_size, &mut rng),
            Criterion::Semantic => {
                sample_semantic(semantic_x.expect("checked above"), core, cfg.bundle_size)
            }
            Criterion::Random => sample_random(n, core, cfg.bundle_size, &mut rng),
        };
        match built {
            Ok(mut bundle) => {
                bundle.id = id;
                bundles.push(bundle);
            }
            Err(Error::IsolatedCore(_)) => {
                redraws += 1;
                if redraws > cfg.max_resample_attempts {
                    return Err(Error::SamplingExhausted {
                        attempts: cfg.max_resample_attempts,
                        succeeded: bundles.len(),
                        requested: cfg.num_bundles,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn star(leaves: usize) -> Graph {
        Graph::from_edges(leaves + 1, (1..=leaves).map(|l| (0, l))).unwrap()
    }

    fn path(n: usize) -> Graph {
        Graph::from_edges(n, (1..n).map(|i| (i - 1, i))).unwrap()
    }

    #[test]
    fn adaptive_hop_examples() {
        assert_eq!(
            adaptive_hop(&star(6), 0, 5).unwrap(),
            HopSize { k: 1, saturated: false }
        );
        assert_eq!(
            adaptive_hop(&path(5), 0, 5).unwrap(),
            HopSize { k: 4, saturated: false }
        );
        let pair = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert_eq!(
            adaptive_hop(&pair, 0, 5).unwrap(),
            HopSize { k: 1, saturated: true }
        );
    }

    #[test]
    fn adaptive_hop_isolated_core() {
        let g = Graph::from_edges(3, [(0, 1)]).unwrap();
        assert!(matches!(adaptive_hop(&g, 2, 3), Err(Error::IsolatedCore(2))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_topological(&g, 2, 3, &mut rng),
            Err(Error::IsolatedCore(2))
        ));
    }

    #[test]
    fn topological_forced_triangle() {
        let tri = Graph::from_edges(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = sample_topological(&tri, 0, 3, &mut rng).unwrap();
            assert_eq!(b.members, vec![0, 1, 2]);
        }
    }

    #[test]
    fn topological_saturated_component() {
        let g = Graph::from_edges(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_topological(&g, 0, 5, &mut rng).unwrap();
        assert_eq!(b.members, vec![0, 1, 2]);
    }

    #[test]
    fn topological_star_leaf_frequencies() {
        let g = star(6);
        let mut counts = [0usize; 7];
        let runs = 1000;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = sample_topological(&g, 0, 5, &mut rng).unwrap();
            assert_eq!(b.members.len(), 5);
            assert_eq!(b.members[0], 0);
            for &m in &b.members[1..] {
                counts[m] += 1;
            }
        }
        for &c in &counts[1..] {
            let freq = c as f64 / runs as f64;
            assert!((freq - 4.0 / 6.0).abs() <= 0.05, "leaf frequency {freq}");
        }
    }

    #[test]
    fn semantic_examples() {
        let x = EmbeddingMatrix::new(Array2::from_shape_vec((4, 1), vec![0., 1., 2., 10.]).unwrap())
            .unwrap();
        assert_eq!(sample_semantic(&x, 0, 3).unwrap().members, vec![0, 1, 2]);

        let tie = EmbeddingMatrix::new(Array2::from_shape_vec((3, 1), vec![0., -1., 1.]).unwrap())
            .unwrap();
        assert_eq!(sample_semantic(&tie, 0, 2).unwrap().members, vec![0, 1]);

        assert!(sample_semantic(&tie, 0, 4).is_err());
    }

    #[test]
    fn config_rejects_tiny_bundles() {
        let cfg = SamplingConfig {
            bundle_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sample_bundles_deterministic_with_replacement() {
        let g = path(50);
        let cfg = SamplingConfig {
            num_bundles: 100,
            seed: 11,
            ..Default::default()
        };
        let a = sample_bundles(&g, None, &cfg).unwrap();
        let b = sample_bundles(&g, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.iter().enumerate().all(|(i, b)| b.id == i));
    }

    #[test]
    fn sample_bundles_without_replacement_when_possible() {
        let g = path(50);
        let cfg = SamplingConfig {
            num_bundles: 50,
            seed: 3,
            ..Default::default()
        };
        let bundles = sample_bundles(&g, None, &cfg).unwrap();
        let mut cores: Vec<_> = bundles.iter().map(|b| b.core).collect();
        cores.sort_unstable();
        cores.dedup();
        assert_eq!(cores.len(), 50);
    }

    #[test]
    fn sample_bundles_all_isolated_fails() {
        let g = Graph::from_edges(10, []).unwrap();
        let cfg = SamplingConfig {
            num_bundles: 3,
            max_resample_attempts: 7,
            ..Default::default()
        };
        match sample_bundles(&g, None, &cfg) {
            Err(Error::SamplingExhausted { succeeded, attempts, .. }) => {
                assert_eq!(succeeded, 0);
                assert_eq!(attempts, 7);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn sample_bundles_skips_isolated_cores() {
        let g = Graph::from_edges(6, [(0, 1), (1, 2)]).unwrap();
        let cfg = SamplingConfig {
            bundle_size: 3,
            num_bundles: 6,
            seed: 5,
            ..Default::default()
        };
        let bundles = sample_bundles(&g, None, &cfg).unwrap();
        assert_eq!(bundles.len(), 6);
        assert!(bundles.iter().all(|b| b.core <= 2));
    }

    #[test]
    fn random_bundles_have_distinct_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for core in 0..10 {
            let b = sample_random(10, core, 5, &mut rng).unwrap();
            let mut m = b.members.clone();
            m.sort_unstable();
            m.dedup();
            assert_eq!(m.len(), 5);
            assert_eq!(b.members[0], core);
        }
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (2usize..30).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 1..80)
                .prop_map(move |pairs| Graph::from_edges(n, pairs).unwrap())
        })
    }

    proptest! {
        #[test]
        fn topological_members_within_hop(g in arb_graph(), seed in any::<u64>(), size in 2usize..8) {
            let core = (seed as usize) % g.n();
            prop_assume!(g.degree(core) > 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = sample_topological(&g, core, size, &mut rng).unwrap();
            let hop = adaptive_hop(&g, core, size).unwrap();
            let dist = g.hop_distances(core).unwrap();
            prop_assert!(b.members.len() >= 2);
            prop_assert_eq!(b.members[0], core);
            let mut uniq = b.members.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), b.members.len());
            for &m in &b.members[1..] {
                let d = dist[m].unwrap();
                prop_assert!(1 <= d && d <= hop.k);
            }
            if !hop.saturated {
                prop_assert_eq!(b.members.len(), size);
            }
        }

        #[test]
        fn adaptive_hop_monotone(g in arb_graph(), seed in any::<u64>()) {
            let core = (seed as usize) % g.n();
            prop_assume!(g.degree(core) > 0);
            let mut last = 0;
            for size in 2..12 {
                let k = adaptive_hop(&g, core, size).unwrap().k;
                prop_assert!(k >= last);
                last = k;
            }
        }

        #[test]
        fn semantic_no_closer_outsider(
            data in proptest::collection::vec(-5.0f64..5.0, 2 * 12),
            core in 0usize..12,
            size in 2usize..8,
        ) {
            let x = EmbeddingMatrix::new(Array2::from_shape_vec((12, 2), data).unwrap()).unwrap();
            let b = sample_semantic(&x, core, size).unwrap();
            let dist = |i: usize| {
                let (a, c) = (x.data().row(i), x.data().row(core));
                (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)
            };
            let worst_in = b.members[1..].iter().map(|&i| dist(i)).fold(0.0, f64::max);
            for i in (0..12).filter(|i| !b.members.contains(i)) {
                prop_assert!(dist(i) >= worst_in);
            }
        }
    }
}
