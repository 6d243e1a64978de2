mod common;

use std::rc::Rc;

use cgnn_core::autodiff::{Tape, Tensor};
use cgnn_core::graph::{knn_graph, knn_graph_brute_force, knn_graph_points, EdgeList};
use cgnn_core::model::{cgnn_forward, edge_conv, EdgeFeature, EdgeLayer};
use cgnn_core::rng::Rng;
use cgnn_core::types::Condition;
use common::*;
use proptest::prelude::*;

#[test]
fn edge_conv_matches_naive_loops() {
    let mut rng = Rng::new(11);
    let (n, d, w, k) = (10, 3, 4, 3);
    let x = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
    let ws = random_tensor(&mut rng, &[d, w], -1.0, 1.0);
    let wn = random_tensor(&mut rng, &[d, w], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[w], -0.5, 0.5);
    let row = |t: &Tensor<f64>, i: usize, width: usize| t.data()[i * width..(i + 1) * width].to_vec();
    let points: Vec<[f64; 3]> = (0..n).map(|i| row(&x, i, d).try_into().unwrap()).collect();
    let graph = knn_oracle(&points, k);

    for form in [EdgeFeature::Centered, EdgeFeature::Literal] {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let layer = EdgeLayer { w_self: tape.constant(ws.clone()), w_nbr: tape.constant(wn.clone()), bias: tape.constant(b.clone()) };
        let (out, _) = edge_conv(&mut tape, xv, k, layer, form).unwrap();
        let got = tape.value(out).data().to_vec();

        for i in 0..n {
            let xi = row(&x, i, d);
            for c in 0..w {
                let mut acc = 0.0;
                for &j in &graph[i] {
                    let xj = row(&x, j, d);
                    let mut z = b.data()[c];
                    for r in 0..d {
                        let e = match form {
                            EdgeFeature::Centered => xj[r] - xi[r],
                            EdgeFeature::Literal => xj[r],
                        };
                        z += ws.data()[r * w + c] * xi[r] + wn.data()[r * w + c] * e;
                    }
                    acc += z.max(0.0);
                }
                let want = acc / graph[i].len() as f64;
                assert!((got[i * w + c] - want).abs() < 1e-6, "{form:?} node {i} channel {c}");
            }
        }
    }
}

#[test]
fn aggregation_ignores_edge_order() {
    let mut rng = Rng::new(5);
    let points = random_cloud(&mut rng, 30, 10.0).into_points();
    let edges = knn_graph_points(&points, 4).unwrap();
    let mut order: Vec<usize> = (0..edges.len()).collect();
    rng.shuffle(&mut order);
    let shuffled = edges.reordered(&order);
    let own = random_tensor(&mut rng, &[30, 5], -1.0, 1.0);
    let nbr = random_tensor(&mut rng, &[30, 5], -1.0, 1.0);
    let bias = random_tensor(&mut rng, &[5], -0.5, 0.5);

    let run = |e: &EdgeList| {
        let mut tape = Tape::new();
        let (o, q, b) = (tape.param(own.clone()), tape.param(nbr.clone()), tape.param(bias.clone()));
        let y = tape.edge_mean(o, q, b, Rc::from(e.targets()), Rc::from(e.sources())).unwrap();
        let s = tape.reduce_mean(y, None).unwrap();
        tape.backward(s).unwrap();
        let value = tape.value(y).data().to_vec();
        let grads: Vec<f64> = [o, q, b].iter().flat_map(|&v| tape.grad(v).unwrap().data().to_vec()).collect();
        (value, grads)
    };
    let (v1, g1) = run(&edges);
    let (v2, g2) = run(&shuffled);
    for (a, b) in v1.iter().zip(&v2).chain(g1.iter().zip(&g2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_points_permutes_displacements() {
    for seed in 0..10 {
        let (dx, df) = permutation_errors(seed, 40);
        assert!(dx <= 1e-5 && df <= 1e-5, "seed {seed}: {dx:e} {df:e}");
    }
}

#[test]
fn condition_changes_the_prediction() {
    let mut rng = Rng::new(3);
    let config = small_model();
    let weights = dense_weights(&config, &mut rng, 0.5);
    let cloud = random_cloud(&mut rng, 20, 20.0);
    let a = Condition::new([10.0, 10.0, 0.0], [10.0, 10.0, -1.0]).unwrap();
    let b = Condition::new([10.0, 10.0, 0.0], [10.0, 10.0, -3.0]).unwrap();
    let (da, fa) = cgnn_forward(&cloud, &a, &weights, &config).unwrap();
    let (db, fb) = cgnn_forward(&cloud, &b, &weights, &config).unwrap();
    assert_ne!(da, db);
    assert_ne!(fa, fb);
    let (da2, fa2) = cgnn_forward(&cloud, &a, &weights, &config).unwrap();
    assert_eq!((da, fa), (da2, fa2));
}

#[test]
fn knn_matches_oracle_on_random_clouds() {
    let compared = knn_agreement(1, 25).unwrap();
    assert!(compared >= 2 * 25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tree_equals_scan(n in 65usize..200, k in 1usize..8, seed in any::<u64>(), lattice in any::<bool>()) {
        let mut rng = Rng::new(seed);
        // Integer lattices produce many exact distance ties.
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let mut p = [rng.uniform_range(0.0, 10.0), rng.uniform_range(0.0, 10.0), rng.uniform_range(0.0, 10.0)];
                if lattice {
                    p = p.map(f64::floor);
                }
                p
            })
            .collect();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let fast = knn_graph(&flat, n, 3, k).unwrap();
        prop_assert_eq!(&fast, &knn_graph_brute_force(&flat, n, 3, k).unwrap());
        for (i, want) in knn_oracle(&points, k).iter().enumerate() {
            prop_assert_eq!(fast.neighbours(i), want.as_slice());
        }
    }

    #[test]
    fn every_node_has_k_plus_one_in_edges(n in 2usize..120, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let k = 1 + rng.below(n - 1);
        let points = random_cloud(&mut rng, n, 5.0).into_points();
        let g = knn_graph_points(&points, k).unwrap();
        prop_assert_eq!(g.len(), n * (k + 1));
        for i in 0..n {
            prop_assert_eq!(g.neighbours(i).len(), k + 1);
            prop_assert!(g.neighbours(i).contains(&i));
        }
    }
}
