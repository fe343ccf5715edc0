//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use ndarray::{array, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{Reply, Stub};
use dense_core::annotate::{
    annotate_all, build_prompt, AnnotationCache, Annotator, LlmClient, LlmEndpointConfig,
    OracleConfig, REASK_SUFFIX,
};
use dense_core::bench::{
    pooled_std, run_pipeline, sweep, verify_convergence, AnnotatorConfig, ConvergenceConfig,
    ExperimentConfig, SupervisionMode, SweepAxis,
};
use dense_core::gnn::{softmax_row, Gcn, GcnParams};
use dense_core::graph::{EmbeddingMatrix, Graph, NodeTable, NormalizedAdjacency};
use dense_core::sampling::Bundle;
use dense_core::supervise::{
    bundle_distribution, loss_be, loss_rank, refine, total_loss_and_grad, verify_theorem1,
    verify_theorem2, BoundInstance,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Gcn, GcnParams, Vec<Bundle>) {
    let n = rng.random_range(5..=30);
    let d = rng.random_range(1..=8);
    let h = rng.random_range(1..=8);
    let c = rng.random_range(2..=5);
    let edges: Vec<(usize, usize)> = (0..2 * n)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .collect();
    let graph = Graph::from_edges(n, edges).unwrap();
    let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let gcn = Gcn::new(NormalizedAdjacency::new(&graph), &EmbeddingMatrix::new(x).unwrap()).unwrap();
    let flat: Vec<f64> = (0..d * h + h + h * c + c)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let params = GcnParams::from_flat(d, h, c, &flat).unwrap();
    let mut nodes: Vec<usize> = (0..n).collect();
    let bundles = (0..rng.random_range(2..=6))
        .map(|id| {
            nodes.shuffle(rng);
            let size = rng.random_range(1..=5.min(n));
            let mut b = Bundle::new(id, nodes[0], nodes[..size].to_vec());
            b.label = Some(rng.random_range(0..c));
            b
        })
        .collect();
    (gcn, params, bundles)
}

fn loss_at(gcn: &Gcn, params: &GcnParams, bundles: &[Bundle]) -> f64 {
    total_loss_and_grad(&gcn.logits(params).unwrap(), bundles).unwrap().0
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (gcn, params, bundles) = random_problem(&mut rng);
        let trace = gcn.forward(&params).unwrap();
        let (_, dz) = total_loss_and_grad(&trace.z, &bundles).unwrap();
        let analytic = gcn.backward(&params, &trace, &dz).unwrap().to_flat();
        let base = params.to_flat();
        let (d, h, c) = (params.input_dim(), params.hidden_dim(), params.num_classes());
        let at = |j: usize, delta: f64| {
            let mut f = base.clone();
            f[j] += delta;
            loss_at(&gcn, &GcnParams::from_flat(d, h, c, &f).unwrap(), &bundles)
        };
        let fd: Vec<f64> = (0..base.len())
            .map(|j| (at(j, eps) - at(j, -eps)) / (2.0 * eps))
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = analytic
            .iter()
            .zip(&fd)
            .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
        worst = worst.max(err / scale);
    }
    outcome(
        worst <= 1e-6,
        format!("max relative error {worst:.2e} over 20 instances (limit 1e-6)"),
    )
}

fn outlier_tolerance() -> Outcome {
    let r = verify_theorem1(10_000, 5, 5, 7).unwrap();
    outcome(
        r.kept >= 10_000 && r.pass_fraction == 1.0,
        format!(
            "{} of {} kept trials satisfy 0 <= g_BE <= g_IE (slack 1e-10), {} draws",
            r.passed, r.kept, r.draws
        ),
    )
}

fn gradient_bounds() -> Outcome {
    let inst = BoundInstance::default();
    let r = verify_theorem2(&inst, 0).unwrap();
    let grad_bad: Vec<&str> = r
        .points
        .iter()
        .filter(|p| !p.grad_ok)
        .map(|p| p.point.as_str())
        .collect();
    let hess_bad = r.points.iter().filter(|p| !p.hess_ok).count();
    let zero = &r.points[0];
    outcome(
        grad_bad.is_empty() && hess_bad == 0,
        format!(
            "|B|={}, C={}: gradient bound violated at {}/{} points, curvature bound at {}/{}; \
             at theta=0 |grad|_inf={:.4} vs 2G/|B|={:.4}; Lipschitz probe {:.3} <= {:.3}",
            inst.bundle_size,
            inst.num_classes,
            grad_bad.len(),
            r.points.len(),
            hess_bad,
            r.points.len(),
            zero.grad_inf,
            zero.grad_bound,
            r.lipschitz_observed,
            r.smoothness_constant,
        ),
    )
}

fn convergence() -> Outcome {
    let plain = verify_convergence(&ConvergenceConfig::default()).unwrap();
    let refined = verify_convergence(&ConvergenceConfig {
        refinement: true,
        ..Default::default()
    })
    .unwrap();
    outcome(
        plain.monotone && plain.converged && refined.monotone,
        format!(
            "eta={:.3e}: max step increase {:.2e}, |grad L|_2 {:.3e} after {} epochs (target 1e-3); \
             with refinement max increase between events {:.2e}",
            plain.eta,
            plain.max_step_increase,
            plain.final_grad_norm,
            plain.epochs_run,
            refined.max_step_increase,
        ),
    )
}

fn loss_unit_values() -> Outcome {
    let uniform = Array1::from_elem(4, 0.25);
    let be = loss_be(uniform.view(), 2);
    let pb = array![0.5, 0.3, 0.2];
    let r = loss_rank(pb.view(), 1);
    let fitted = [
        loss_rank(pb.view(), 0),
        loss_rank(array![0.4, 0.4, 0.2].view(), 1),
        loss_rank(array![0.4, 0.4, 0.2].view(), 0),
    ];
    let pass = (be - 4f64.ln()).abs() <= 1e-12
        && (r - (5.0f64 / 3.0).ln()).abs() <= 1e-12
        && fitted.iter().all(|&v| v == 0.0);
    outcome(
        pass,
        format!(
            "L_BE(uniform,4)-ln4={:.1e}, L_R-ln(5/3)={:.1e}, L_R at max={fitted:?}",
            be - 4f64.ln(),
            r - (5.0f64 / 3.0).ln()
        ),
    )
}

fn log_softmax(v: &Array1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + v.mapv(|x| (x - m).exp()).sum().ln();
    v.mapv(|x| x - lse)
}

fn distribution_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut permutation_exact = true;
    for _ in 0..1000 {
        let size = rng.random_range(1..=8);
        let c = rng.random_range(2..=6);
        let z = Array2::from_shape_simple_fn((size, c), || rng.random_range(-10.0..10.0));
        let mut mean_z = Array1::zeros(c);
        let mut mean_logp = Array1::zeros(c);
        for row in z.rows() {
            mean_z += &row;
            mean_logp += &log_softmax(&row.to_owned());
        }
        mean_z /= size as f64;
        mean_logp /= size as f64;
        let a = softmax_row(mean_z.view());
        let b = softmax_row(mean_logp.view());
        worst = worst.max((&a - &b).mapv(f64::abs).fold(0.0, |m, &v| m.max(v)));

        let mut members: Vec<usize> = (0..size).collect();
        let base = bundle_distribution(&z, &members).unwrap();
        members.shuffle(&mut rng);
        permutation_exact &= bundle_distribution(&z, &members).unwrap() == base;
    }
    outcome(
        permutation_exact && worst <= 1e-12,
        format!(
            "permutation exact: {permutation_exact}; max |softmax(mean log p) - softmax(mean z)| = {worst:.1e} over 1000 draws"
        ),
    )
}

fn refinement_contract() -> Outcome {
    let labeled = |members: Vec<usize>, y: usize| {
        let mut b = Bundle::new(0, members[0], members);
        b.label = Some(y);
        b
    };
    let mut ok = Vec::new();
    // Unique minimum.
    let p = array![[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]];
    let mut b = vec![labeled(vec![0, 1, 2], 0)];
    refine(&p, &mut b, 2, 1);
    ok.push(b[0].members == vec![0, 1]);
    // Tied minima both go.
    let p = array![[0.9, 0.1], [0.3, 0.7], [0.3, 0.7], [0.6, 0.4]];
    let mut b = vec![labeled(vec![0, 1, 2, 3], 0)];
    refine(&p, &mut b, 2, 1);
    ok.push(b[0].members == vec![0, 3]);
    // All tied.
    let p = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
    let mut b = vec![labeled(vec![0, 1, 2], 0)];
    ok.push(refine(&p, &mut b, 2, 1).is_empty() && b[0].members.len() == 3);
    // Floor.
    let p = array![[0.9, 0.1], [0.1, 0.9]];
    let mut b = vec![labeled(vec![0, 1], 0)];
    ok.push(refine(&p, &mut b, 2, 1).is_empty());
    // Determinism.
    let p = array![[0.3, 0.7], [0.6, 0.4], [0.2, 0.8], [0.9, 0.1], [0.25, 0.75]];
    let make = || vec![labeled(vec![0, 1, 2, 3, 4], 0), labeled(vec![4, 3, 1], 1)];
    let (mut x, mut y) = (make(), make());
    ok.push(refine(&p, &mut x, 2, 9) == refine(&p, &mut y, 2, 9) && x == y);
    outcome(
        ok.iter().all(|&v| v),
        format!("crafted cases (unique, tied, all-tie, floor, determinism): {ok:?}"),
    )
}

fn noisy(mode: SupervisionMode) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        annotator: AnnotatorConfig::Oracle(OracleConfig {
            noise_rate: 0.3,
            seed: 0,
        }),
        ..Default::default()
    }
}

fn directional_ablation() -> Outcome {
    let acc = |mode| run_pipeline(&noisy(mode)).unwrap();
    let full = acc(SupervisionMode::Full);
    let v5 = acc(SupervisionMode::Individual);
    let v1 = acc(SupervisionMode::RandomSampling);
    let (f, i, r) = (
        full.mean_accuracy.unwrap(),
        v5.mean_accuracy.unwrap(),
        v1.mean_accuracy.unwrap(),
    );
    outcome(
        f >= i && f >= r,
        format!(
            "rho=0.3, 10 seeds: full {f:.4}±{:.4}, V5 {i:.4}±{:.4}, V1 {r:.4}±{:.4}",
            full.std_accuracy.unwrap(),
            v5.std_accuracy.unwrap(),
            v1.std_accuracy.unwrap()
        ),
    )
}

fn bundle_count_sweep() -> Outcome {
    let t = sweep(&ExperimentConfig::default(), &SweepAxis::NumBundles(vec![25, 50, 100])).unwrap();
    let (lo, hi) = (&t.rows[0], &t.rows[2]);
    let pooled = pooled_std(&[lo.std, hi.std]);
    let cells: Vec<String> = t
        .rows
        .iter()
        .map(|r| format!("n_S={}: {:.4}±{:.4}", r.value, r.mean, r.std))
        .collect();
    outcome(
        hi.mean >= lo.mean - pooled,
        format!("{} (pooled std {pooled:.4})", cells.join(", ")),
    )
}

fn end_to_end() -> Outcome {
    let r = run_pipeline(&ExperimentConfig::default()).unwrap();
    let m = r.mean_accuracy.unwrap();
    outcome(
        m >= 0.85 && r.replicates.len() == 10,
        format!(
            "noiseless oracle, full method: mean accuracy {m:.4}±{:.4} over {} seeds (bar 0.85)",
            r.std_accuracy.unwrap(),
            r.replicates.len()
        ),
    )
}

fn llm_conformance() -> Outcome {
    let classes: Vec<String> = ["Databases", "Theory", "Rule Learning"].map(String::from).to_vec();
    let texts = ["joins", "b-trees", "flaky", "hopeless"].map(String::from).to_vec();
    let table = NodeTable::new(Some(texts), None, classes.clone()).unwrap();
    let stub = Stub::start(|user: &str| {
        let reask = user.contains(REASK_SUFFIX);
        if user.contains("hopeless") {
            Reply::Content("no idea".into())
        } else if user.contains("flaky") {
            Reply::Content(if reask { "Theory" } else { "maybe?" }.into())
        } else {
            Reply::Content("databases".into())
        }
    });
    let client = LlmClient::with_api_key(
        LlmEndpointConfig {
            base_url: stub.base_url.clone(),
            ..Default::default()
        },
        "key".into(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("cache.jsonl");
    let make = || {
        vec![
            Bundle::new(0, 0, vec![0, 1]),
            Bundle::new(1, 2, vec![2, 1]),
            Bundle::new(2, 3, vec![3, 0]),
        ]
    };
    let run = |cache: &AnnotationCache| {
        let mut bundles = make();
        let s = annotate_all(
            &mut bundles,
            &Annotator::Llm {
                client: &client,
                table: &table,
                dataset_description: "Papers.",
                cache,
            },
        )
        .unwrap();
        (bundles, s)
    };

    let (b1, s1) = run(&AnnotationCache::open(&cache_path).unwrap());
    let cold = stub.requests();
    let (b2, s2) = run(&AnnotationCache::open(&cache_path).unwrap());
    let warm = stub.requests() - cold;

    let r = &s1.records;
    let happy = r[0].label == Some(0) && r[0].attempts == 1;
    let retried = r[1].label == Some(1) && r[1].attempts == 2;
    let failed = r[2].label.is_none() && r[2].attempts == 3 && r[2].error.is_some();
    let prompt_hash = build_prompt(&make()[0], &table, "Papers.", 2000).unwrap().sha256;
    let keyed = r[0].prompt_sha256 == prompt_hash;
    let pass = happy
        && retried
        && failed
        && keyed
        && cold == 6
        && warm == 0
        && b1 == b2
        && s1.records == s2.records
        && b1[2].label.is_none();
    outcome(
        pass,
        format!(
            "happy {happy}, retry {retried}, failure marked {failed}, cache key {keyed}; \
             {cold} requests cold, {warm} on warm cache, records identical {}",
            s1.records == s2.records
        ),
    )
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("gradient correctness", Duration::from_secs(30), gradient_correctness),
        ("outlier tolerance inequality", Duration::from_secs(10), outlier_tolerance),
        ("bundle entropy gradient bounds", Duration::from_secs(60), gradient_bounds),
        ("gradient descent convergence", Duration::from_secs(300), convergence),
        ("loss unit values", Duration::MAX, loss_unit_values),
        ("bundle distribution invariances", Duration::MAX, distribution_invariances),
        ("refinement contract", Duration::MAX, refinement_contract),
        ("directional ablation", Duration::from_secs(600), directional_ablation),
        ("bundle count sweep", Duration::MAX, bundle_count_sweep),
        ("end-to-end accuracy", Duration::MAX, end_to_end),
        ("LLM client conformance", Duration::MAX, llm_conformance),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let budget = if *limit == Duration::MAX {
            String::new()
        } else {
            format!(", limit {}s", limit.as_secs())
        };
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s{budget}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
