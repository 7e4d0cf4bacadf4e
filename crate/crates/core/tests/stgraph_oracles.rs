use std::sync::Arc;

use dtm_core::mask::Mask;
use dtm_core::numerics::{grad_check, matmul, softmax, transpose, Tensor};
use dtm_core::stgraph::{
    self, build_graph, edge_weights, gcf, normalize, AdjacencyParams, GcnHead, GraphConfig,
    NodeLabels, StGraph, TemporalMode,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn odd(rng: &mut ChaCha8Rng, max: usize) -> usize {
    2 * rng.gen_range(0..=max / 2) + 1
}

/// Whether the window predicate puts `j` in the neighbourhood of `i`.
fn linked(cfg: &GraphConfig, g: &StGraph, i: usize, j: usize) -> bool {
    if i == j {
        return false;
    }
    let ((fi, ri, ci), (fj, rj, cj)) = (g.node_position(i), g.node_position(j));
    let within = |w: usize, h: usize| ri.abs_diff(rj) <= h / 2 && ci.abs_diff(cj) <= w / 2;
    if fi == fj {
        within(cfg.ws, cfg.hs)
    } else if fj == fi + 1 || (fi == fj + 1 && cfg.temporal_mode == TemporalMode::Bidirectional) {
        within(cfg.wt, cfg.ht)
    } else {
        false
    }
}

fn random_config(rng: &mut ChaCha8Rng, max_nodes: usize) -> GraphConfig {
    loop {
        let mut cfg = GraphConfig::new(
            rng.gen_range(0..=3),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        cfg.ws = odd(rng, 5);
        cfg.hs = odd(rng, 5);
        cfg.wt = odd(rng, 5);
        cfg.ht = odd(rng, 5);
        cfg.temporal_mode = if rng.gen_bool(0.5) {
            TemporalMode::Bidirectional
        } else {
            TemporalMode::DirectedNext
        };
        if cfg.node_count() <= max_nodes {
            return cfg;
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` formed densely from stored edge values.
fn dense_normalized(g: &StGraph, values: &[f64]) -> Vec<Vec<f64>> {
    let n = g.node_count();
    let mut a = vec![vec![0.0; n]; n];
    for ((i, j), v) in g.edges().zip(values) {
        a[i][j] = *v;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

fn dense_product(m: &[Vec<f64>], x: &Tensor) -> Tensor {
    let (n, d) = (x.dims()[0], x.dims()[1]);
    Tensor::from_fn(&[n, d], |idx| {
        let (i, c) = (idx / d, idx % d);
        (0..n).map(|j| m[i][j] * x.at(&[j, c])).sum()
    })
}

#[test]
fn edge_set_matches_brute_force_predicate() {
    let mut cfg = GraphConfig::new(2, 8, 8);
    cfg.temporal_mode = TemporalMode::DirectedNext;
    let g = build_graph(&cfg).unwrap();
    let n = g.node_count();
    let mut brute = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if linked(&cfg, &g, i, j) {
                brute.push((i, j));
            }
        }
    }
    assert_eq!(g.edges().collect::<Vec<_>>(), brute);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let cfg = random_config(&mut rng, 150);
        let g = build_graph(&cfg).unwrap();
        let count = (0..g.node_count())
            .flat_map(|i| (0..g.node_count()).map(move |j| (i, j)))
            .filter(|&(i, j)| linked(&cfg, &g, i, j))
            .count();
        assert_eq!(g.edge_count(), count, "{cfg:?}");
    }
}

#[test]
fn edge_weights_match_dense_similarity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = build_graph(&GraphConfig::new(1, 4, 3)).unwrap();
    let (n, d, r) = (g.node_count(), 5, 3);
    let x = random(&mut rng, &[n, d]);
    let params = AdjacencyParams {
        w1: random(&mut rng, &[r, d]),
        w2: random(&mut rng, &[r, d]),
    };
    let u = matmul(&x, &transpose(&params.w1).unwrap()).unwrap();
    let v = matmul(&x, &transpose(&params.w2).unwrap()).unwrap();
    let dense: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let dot: f64 = (0..r).map(|c| u.at(&[i, c]) * v.at(&[j, c])).sum();
                    1.0 / (1.0 + (-dot).exp())
                })
                .collect()
        })
        .collect();
    let weights = edge_weights(&g, &x, &params).unwrap();
    for ((i, j), w) in g.edges().zip(&weights) {
        assert!((w - dense[i][j]).abs() <= 1e-12);
        assert!(*w > 0.0 && *w < 1.0);
    }
}

#[test]
fn gcf_matches_dense_product_on_100_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..100 {
        let cfg = random_config(&mut rng, 200);
        let g = build_graph(&cfg).unwrap();
        let values: Vec<f64> = (0..g.edge_count())
            .map(|_| rng.gen_range(0.01..1.0))
            .collect();
        let x = random(&mut rng, &[g.node_count(), 3]);
        let sparse = gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap();
        let dense = dense_product(&dense_normalized(&g, &values), &x);
        assert!(
            sparse.max_abs_diff(&dense) <= 1e-10,
            "trial {trial}: {cfg:?}"
        );
    }
}

#[test]
fn node_form_matches_sparse_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = build_graph(&GraphConfig::new(2, 6, 5)).unwrap();
    let values: Vec<f64> = (0..g.edge_count())
        .map(|_| rng.gen_range(0.01..1.0))
        .collect();
    let x = random(&mut rng, &[g.node_count(), 4]);
    let norm = normalize(&g, &values).unwrap();
    let out = gcf(&g, &norm, &x).unwrap();
    let deg: Vec<f64> = (0..g.node_count())
        .map(|i| 1.0 + g.edge_range(i).map(|e| values[e]).sum::<f64>())
        .collect();
    for _ in 0..20 {
        let i = rng.gen_range(0..g.node_count());
        for c in 0..4 {
            let mut y = x.at(&[i, c]) / deg[i];
            for e in g.edge_range(i) {
                let j = g.col_indices()[e];
                y += values[e] / (deg[i] * deg[j]).sqrt() * x.at(&[j, c]);
            }
            assert!((y - out.at(&[i, c])).abs() <= 1e-12);
        }
    }
}

#[test]
fn degrees_recovered_from_normalized_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = build_graph(&GraphConfig::new(1, 5, 5)).unwrap();
    let values: Vec<f64> = (0..g.edge_count())
        .map(|_| rng.gen_range(0.01..1.0))
        .collect();
    let norm = normalize(&g, &values).unwrap();
    for i in 0..g.node_count() {
        assert!(norm.degrees[i] >= 1.0);
        // Â(i, j) · sqrt(D_i D_j) recovers A(i, j); the row sum plus one is D_i.
        let row: f64 = g
            .edge_range(i)
            .map(|e| {
                norm.edge_values[e] * (norm.degrees[i] * norm.degrees[g.col_indices()[e]]).sqrt()
            })
            .sum();
        assert!((1.0 + row - norm.degrees[i]).abs() <= 1e-12);
        assert!((norm.self_loops[i] * norm.degrees[i] - 1.0).abs() <= 1e-12);
    }
    assert!(norm.packed().iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn constant_column_preserved_on_regular_graph() {
    // A single frame on a ring would need wraparound; a 1x1 grid over two
    // frames in bidirectional mode is regular with every degree 1 + w.
    let mut cfg = GraphConfig::new(1, 1, 1);
    cfg.temporal_mode = TemporalMode::Bidirectional;
    let g = build_graph(&cfg).unwrap();
    let values = vec![0.7; g.edge_count()];
    let x = Tensor::from_fn(&[2, 2], |i| if i % 2 == 0 { 3.25 } else { i as f64 });
    let out = gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap();
    for i in 0..2 {
        assert!((out.at(&[i, 0]) - 3.25).abs() <= 1e-12);
    }
    let dense = dense_product(&dense_normalized(&g, &values), &x);
    assert!(out.max_abs_diff(&dense) <= 1e-12);
}

#[test]
fn classify_reproduces_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[7, 3]);
    let head = GcnHead {
        weights: random(&mut rng, &[3, 2]),
    };
    let probs = stgraph::gcn_classify(&x, &head).unwrap();
    assert_eq!(probs, softmax(&matmul(&x, &head.weights).unwrap()));
    let zero = stgraph::gcn_classify(
        &x,
        &GcnHead {
            weights: Tensor::zeros(&[3, 2]),
        },
    )
    .unwrap();
    assert!(zero.data().iter().all(|&p| p == 0.5));
}

#[test]
fn loss_sem_cases() {
    let cfg = GraphConfig::new(2, 2, 2);
    let m = Mask::from_fn(2, 2, |r, c| r == c);
    let labels = NodeLabels::from_memory_masks(&cfg, &[&m, &m]).unwrap();
    assert_eq!(labels.labeled_count(), 8);
    let uniform = Tensor::filled(&[12, 2], 0.5);
    let l = stgraph::loss_sem(&uniform, &labels).unwrap();
    assert!((l - 8.0 * 2f64.ln()).abs() < 1e-12);
    let perfect = Tensor::from_fn(&[12, 2], |i| {
        let node = i / 2;
        let label = if node < 8 { labels.labels[node] } else { 0 };
        if i % 2 == label {
            1.0
        } else {
            0.0
        }
    });
    assert!(stgraph::loss_sem(&perfect, &labels).unwrap() < 1e-9);
    assert_eq!(
        stgraph::loss_sem(&uniform, &labels).unwrap(),
        dtm_core::numerics::cross_entropy(&uniform, &labels.labels, &labels.selector).unwrap()
    );
}

#[test]
fn smoothing_pulls_clusters_together() {
    // Two 3x3-window blocks in one frame, far enough apart that no window
    // spans both: a 3x8 grid split into columns 0..3 and 5..8.
    let mut cfg = GraphConfig::new(0, 8, 3);
    cfg.ws = 5;
    cfg.hs = 5;
    let g = build_graph(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cluster = |i: usize| {
        let c = g.node_position(i).2;
        if c < 3 {
            Some(0)
        } else if c >= 5 {
            Some(1)
        } else {
            None
        }
    };
    let keep: Vec<usize> = (0..g.node_count())
        .filter(|&i| cluster(i).is_some())
        .collect();
    // Zero out edges touching the middle columns so the clusters are disconnected.
    let values: Vec<f64> = g
        .edges()
        .map(|(i, j)| match (cluster(i), cluster(j)) {
            (Some(a), Some(b)) if a == b => rng.gen_range(0.2..1.0),
            _ => 1e-300,
        })
        .collect();
    let x = random(&mut rng, &[g.node_count(), 4]);
    let out = gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap();
    let spread = |t: &Tensor| {
        let (mut total, mut pairs) = (0.0, 0);
        for (a, &i) in keep.iter().enumerate() {
            for &j in &keep[a + 1..] {
                if cluster(i) == cluster(j) {
                    total += (0..4)
                        .map(|c| (t.at(&[i, c]) - t.at(&[j, c])).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    pairs += 1;
                }
            }
        }
        total / pairs as f64
    };
    assert!(
        spread(&out) <= spread(&x),
        "{} > {}",
        spread(&out),
        spread(&x)
    );
}

#[test]
fn loss_sem_gradients_on_four_node_toys() {
    // One 2x1 frame of memory and a 2x1 query frame: four nodes.
    let cfg = GraphConfig::new(1, 2, 1);
    let graph = Arc::new(build_graph(&cfg).unwrap());
    let mask = Mask::from_fn(2, 1, |_, c| c == 1);
    let labels = NodeLabels::from_memory_masks(&cfg, &[&mask]).unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let params = [
            random(&mut rng, &[4, d]),
            random(&mut rng, &[d, d]),
            random(&mut rng, &[d, d]),
            random(&mut rng, &[d, 2]),
        ];
        let report = grad_check(&params, 1e-5, |g, v| {
            let w = stgraph::diff::edge_weights(g, &graph, v[0], v[1], v[2])?;
            let packed = stgraph::diff::normalize(g, &graph, w)?;
            let xgcf = stgraph::diff::gcf(g, &graph, packed, v[0])?;
            let probs = stgraph::diff::classify(g, xgcf, v[3])?;
            stgraph::diff::loss_sem(g, probs, &labels)
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-5,
            "seed {seed}: {}",
            report.max_rel_error
        );
    }
}

#[test]
fn recorded_pipeline_matches_pure_functions() {
    let cfg = GraphConfig::new(1, 3, 2);
    let graph = Arc::new(build_graph(&cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x0 = random(&mut rng, &[graph.node_count(), 4]);
    let params = AdjacencyParams {
        w1: random(&mut rng, &[4, 4]),
        w2: random(&mut rng, &[4, 4]),
    };
    let values = edge_weights(&graph, &x0, &params).unwrap();
    let pure = gcf(&graph, &normalize(&graph, &values).unwrap(), &x0).unwrap();

    let mut g = dtm_core::numerics::DiffGraph::new();
    let x = g.param(x0.clone());
    let (w1, w2) = (g.param(params.w1.clone()), g.param(params.w2.clone()));
    let w = stgraph::diff::edge_weights(&mut g, &graph, x, w1, w2).unwrap();
    let packed = stgraph::diff::normalize(&mut g, &graph, w).unwrap();
    let xgcf = stgraph::diff::gcf(&mut g, &graph, packed, x).unwrap();
    assert!(g.value(xgcf).max_abs_diff(&pure) <= 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn stored_edges_respect_the_sparsity_bound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = random_config(&mut rng, 400);
        cfg.temporal_mode = TemporalMode::DirectedNext;
        let g = build_graph(&cfg).unwrap();
        prop_assert!(g.edge_count() <= cfg.node_count() * (cfg.ws * cfg.hs + cfg.wt * cfg.ht));
        cfg.temporal_mode = TemporalMode::Bidirectional;
        let g = build_graph(&cfg).unwrap();
        prop_assert!(g.edge_count() <= cfg.edge_bound());
        for i in 0..g.node_count() {
            prop_assert!(g.row(i).windows(2).all(|w| w[0] < w[1]));
            prop_assert!(!g.row(i).contains(&i));
        }
    }

    #[test]
    fn edge_weights_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = build_graph(&GraphConfig::new(1, 3, 3)).unwrap();
        let x = random(&mut rng, &[g.node_count(), 3]).map(|v| v * scale);
        let params = AdjacencyParams { w1: random(&mut rng, &[3, 3]), w2: random(&mut rng, &[3, 3]) };
        for w in edge_weights(&g, &x, &params).unwrap() {
            prop_assert!(w > 0.0 && w < 1.0);
        }
    }
}
