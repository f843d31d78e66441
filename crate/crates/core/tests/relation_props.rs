//! Class relation graphs and the relation loss against brute-force
//! recomputation and algebraic properties.

use ctta_core::relation::{
    crp_loss, crp_loss_from_edges, estimate_target_graph, graph_from_prototypes, ClassRelationGraph,
};
use ctta_core::Matrix;
use proptest::prelude::*;

/// Group by label, average, normalise, dot. `None` for absent classes.
fn brute_force_edges(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<Option<f64>>> {
    let dim = features[0].len();
    let mut unit: Vec<Option<Vec<f64>>> = Vec::new();
    for c in 0..classes {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == c)
            .map(|(f, _)| f)
            .collect();
        if members.is_empty() {
            unit.push(None);
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|k| members.iter().map(|f| f[k]).sum::<f64>() / members.len() as f64)
            .collect();
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        unit.push(if n > 0.0 {
            Some(mean.iter().map(|x| x / n).collect())
        } else {
            None
        });
    }
    (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| match (&unit[i], &unit[j]) {
                    (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x * y).sum()),
                    _ => None,
                })
                .collect()
        })
        .collect()
}

fn matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows[0].len(), rows.iter().map(|r| r.as_slice())).unwrap()
}

fn graph(vertices: &[Vec<f64>]) -> ClassRelationGraph {
    ClassRelationGraph::from_vertices(vertices.iter().cloned().map(Some).collect())
}

fn labelled_features() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..5, 1usize..6).prop_flat_map(|(classes, dim)| {
        proptest::collection::vec((proptest::collection::vec(-3.0f64..3.0, dim), 0..classes), 1..30).prop_map(
            move |rows| {
                let (f, mut y): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                // Pin the class count by naming the last class once.
                y[0] = classes - 1;
                (f, y)
            },
        )
    })
}

fn vertex_sets(c: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, dim), c).prop_filter("non-zero vertices", |vs| {
        vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn target_graph_matches_brute_force((features, labels) in labelled_features()) {
        let classes = labels.iter().max().unwrap() + 1;
        let est = estimate_target_graph(&matrix(&features), &labels, classes).unwrap().unwrap();
        let expected = brute_force_edges(&features, &labels, classes);
        let g = est.graph();
        for i in 0..classes {
            for j in 0..classes {
                match expected[i][j] {
                    Some(s) => prop_assert!((g.edges().get(i, j) - s).abs() < 1e-12),
                    None => prop_assert!(!(g.is_present(i) && g.is_present(j))),
                }
            }
            if g.is_present(i) {
                let n: f64 = g.vertex(i).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
                prop_assert!((g.edges().get(i, i) - 1.0).abs() < 1e-12);
            }
        }
        for i in 0..classes {
            for j in 0..classes {
                prop_assert_eq!(g.edges().get(i, j), g.edges().get(j, i));
                prop_assert!(g.edges().get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn loss_is_scale_invariant_and_bounded(
        (a, b) in (2usize..6, 1usize..5).prop_flat_map(|(c, d)| (vertex_sets(c, d), vertex_sets(c, d))),
        scale in 1e-3f64..1e3,
    ) {
        let (ga, gb) = (graph(&a), graph(&b));
        let c = a.len();
        let mask = vec![true; c];
        let base = crp_loss(&ga, &gb).unwrap().value;
        let mut scaled = gb.edges().clone();
        scaled.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        let l = crp_loss_from_edges(ga.edges(), &scaled, &mask).unwrap().value;
        prop_assert!((l - base).abs() < 1e-10);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        // Symmetric in its arguments.
        prop_assert!((crp_loss(&gb, &ga).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn loss_is_permutation_invariant(
        (a, b, perm) in (2usize..6, 1usize..5).prop_flat_map(|(c, d)| {
            (vertex_sets(c, d), vertex_sets(c, d), Just((0..c).collect::<Vec<usize>>()).prop_shuffle())
        }),
    ) {
        let base = crp_loss(&graph(&a), &graph(&b)).unwrap().value;
        let pa: Vec<Vec<f64>> = perm.iter().map(|&k| a[k].clone()).collect();
        let pb: Vec<Vec<f64>> = perm.iter().map(|&k| b[k].clone()).collect();
        let l = crp_loss(&graph(&pa), &graph(&pb)).unwrap().value;
        prop_assert!((l - base).abs() < 1e-12);
    }
}

#[test]
fn worked_values() {
    let s = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap();
    let id = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mask = [true, true];
    let hand = -2.0 / 5f64.sqrt();
    assert!((crp_loss_from_edges(&s, &id, &mask).unwrap().value - hand).abs() < 1e-10);
    assert!((crp_loss_from_edges(&s, &s, &mask).unwrap().value + 1.0).abs() < 1e-10);
    let mut triple = s.clone();
    triple.as_mut_slice().iter_mut().for_each(|v| *v *= 3.0);
    assert!((crp_loss_from_edges(&s, &triple, &mask).unwrap().value + 1.0).abs() < 1e-10);
}

#[test]
fn minus_one_only_for_proportional_edges() {
    let g1 = graph(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let g2 = graph(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![1.0, 1.0]]);
    assert!((crp_loss(&g1, &g1).unwrap().value + 1.0).abs() < 1e-12);
    assert!(crp_loss(&g1, &g2).unwrap().value > -1.0 + 1e-6);
}

#[test]
fn centroid_examples() {
    let f = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let g = estimate_target_graph(&f, &[1, 1], 2).unwrap().unwrap();
    let v = g.graph().vertex(1).unwrap();
    assert!((v[0] - 0.707_106_781_186_547_5).abs() < 1e-12 && (v[1] - v[0]).abs() < 1e-15);
    assert!(!g.graph().is_present(0));

    let single = matrix(&[vec![3.0, 4.0]]);
    let g = estimate_target_graph(&single, &[0], 2).unwrap().unwrap();
    assert_eq!(g.graph().vertex(0).unwrap(), &[0.6, 0.8]);

    let orth = graph(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(orth.edges().get(0, 1), 0.0);

    assert!(estimate_target_graph(&Matrix::zeros(0, 2), &[], 2).unwrap().is_none());
    // A zero centroid marks the class absent.
    let zero = matrix(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 2.0]]);
    let g = estimate_target_graph(&zero, &[0, 0, 1], 2).unwrap().unwrap();
    assert!(!g.graph().is_present(0) && g.graph().is_present(1));
}

#[test]
fn fewer_than_two_shared_classes_is_zero() {
    let full = graph(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let one = ClassRelationGraph::from_vertices(vec![Some(vec![1.0, 0.2]), None, None]);
    let l = crp_loss(&full, &one).unwrap();
    assert_eq!(l.value, 0.0);
    assert!(l.edge_grad.as_slice().iter().all(|&g| g == 0.0));
}

#[test]
fn prototypes_need_every_class() {
    let f = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(graph_from_prototypes(&f, &[0, 0], 2).is_err());
    let g = graph_from_prototypes(&f, &[0, 1], 2).unwrap();
    assert_eq!(g.present_count(), 2);
}

/// Loss as a function of raw features, differentiated numerically through
/// the class mean and the normalisation.
#[test]
fn feature_gradient_matches_finite_differences() {
    let intrinsic = graph(&[vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![-0.4, 0.3, 1.0]]);
    let feats = vec![
        vec![0.3, -0.8, 0.5],
        vec![1.2, 0.1, -0.3],
        vec![-0.5, 0.9, 0.2],
        vec![0.4, 0.4, 0.9],
        vec![0.7, -0.2, -0.6],
    ];
    let labels = [0, 1, 2, 0, 1];
    let loss = |f: &[Vec<f64>]| {
        let g = estimate_target_graph(&matrix(f), &labels, 3).unwrap().unwrap();
        crp_loss(&intrinsic, g.graph()).unwrap()
    };
    let target = estimate_target_graph(&matrix(&feats), &labels, 3).unwrap().unwrap();
    let analytic = target.feature_grad(&loss(&feats).edge_grad);
    let h = 1e-5;
    for n in 0..feats.len() {
        for k in 0..3 {
            let mut plus = feats.clone();
            plus[n][k] += h;
            let mut minus = feats.clone();
            minus[n][k] -= h;
            let numeric = (loss(&plus).value - loss(&minus).value) / (2.0 * h);
            let a = analytic.get(n, k);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "({n},{k}) {a} vs {numeric}");
        }
    }
}
