mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use remp::data::{Episode, EpisodeShape, Rng};
use remp::numerics::{Matrix, Metric};
use remp::objective::{predict, propagate_episode, ObjectiveConfig, Reduction, ScheduleArm};
use remp::propagation::{MinScope, PropagationConfig, RepulsionTarget, SoftmaxAxis};

fn variants() -> Vec<(String, PropagationConfig, ObjectiveConfig, usize)> {
    let mut out = Vec::new();
    for axis in [SoftmaxAxis::Column, SoftmaxAxis::Row] {
        for target in [RepulsionTarget::QueryScores, RepulsionTarget::Attention] {
            for scope in [MinScope::Global, MinScope::Row] {
                for relu in [false, true] {
                    let prop = PropagationConfig {
                        softmax_axis: axis,
                        repulsion_target: target,
                        min_scope: scope,
                        projection_relu: relu,
                        ..Default::default()
                    };
                    out.push((format!("{axis}/{target}/{scope}/relu={relu}"), prop, ObjectiveConfig::default(), 1));
                }
            }
        }
    }
    let base = PropagationConfig::default();
    out.push((
        "propagated queries".into(),
        base.clone(),
        ObjectiveConfig {
            propagated_queries: true,
            ..Default::default()
        },
        1,
    ));
    out.push((
        "cosine everywhere, temperature 0.5".into(),
        PropagationConfig {
            metric: Metric::Cosine,
            ..base.clone()
        },
        ObjectiveConfig {
            local_metric: Metric::Cosine,
            temperature: 0.5,
            ..Default::default()
        },
        1,
    ));
    out.push((
        "unsquared euclidean".into(),
        PropagationConfig {
            metric: Metric::NegEuclidean,
            ..base.clone()
        },
        ObjectiveConfig {
            local_metric: Metric::NegEuclidean,
            ..Default::default()
        },
        1,
    ));
    out.push((
        "no repulsion".into(),
        PropagationConfig {
            repulsion_enabled: false,
            ..base.clone()
        },
        ObjectiveConfig::default(),
        1,
    ));
    out.push(("one projection per layer".into(), base, ObjectiveConfig::default(), 10));
    out
}

#[test]
fn predict_matches_scalar_reference() {
    for (name, prop, obj, n_proj) in variants() {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let params = random_params(4, &[6], 3, 5, n_proj, &mut rng);
            let ep = random_episode(EpisodeShape::new(3, 2, 3), 4, &mut rng);
            let got = predict(&params, &ep, &prop, &obj).unwrap();
            let want = reference_predict(&params, &ep, &prop, &obj);
            let err = max_abs_diff(&want, &got.probs);
            assert!(err <= 1e-10, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn training_stack_matches_scalar_reference() {
    for (name, prop, _, n_proj) in variants() {
        let mut rng = Rng::new(7);
        let params = random_params(4, &[5], 3, 4, n_proj, &mut rng);
        let ep = random_episode(EpisodeShape::new(4, 1, 2), 4, &mut rng);
        let trace = propagate_episode(&params, &ep, &prop, prop.layers_train, true).unwrap();
        let reference = reference_propagate(&params, &ep, &prop, prop.layers_train, true);
        for l in 0..=prop.layers_train {
            let err = max_abs_diff(&reference.prototypes[l], trace.prototypes(l));
            assert!(err <= 1e-10, "{name} layer {l}: {err:e}");
            let err = max_abs_diff(&reference.queries[l], &trace.query_embeddings(l));
            assert!(err <= 1e-10, "{name} layer {l} queries: {err:e}");
        }
        for (l, layer) in trace.layers.iter().enumerate() {
            let err = max_abs_diff(&reference.attention[l], &layer.step.attention_masked);
            assert!(err <= 1e-12, "{name} attention {l}: {err:e}");
        }
    }
}

#[test]
fn block_means_match_scalar_loop() {
    let mut rng = Rng::new(3);
    let z = random_rows(12, 5, 1.0, &mut rng);
    let c = remp::propagation::initial_prototypes(&z, 3, 4).unwrap();
    for n in 0..3 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..4 {
                s += z[(n * 4 + k, j)];
            }
            assert!((c[(n, j)] - s / 4.0).abs() <= 1e-12);
        }
    }
}

/// Reorders the class blocks so new class `i` is old class `perm[i]`.
fn relabel(ep: &Episode, perm: &[usize]) -> Episode {
    let s = ep.shape;
    let reorder = |m: &Matrix, per: usize| {
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for (i, &old) in perm.iter().enumerate() {
            for r in 0..per {
                out.row_mut(i * per + r).copy_from_slice(m.row(old * per + r));
            }
        }
        out
    };
    Episode::from_blocks(s, reorder(&ep.support, s.k_shot), reorder(&ep.query, s.m_query)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prediction_is_equivariant_to_relabeling(
        seed in any::<u64>(),
        n_way in 2usize..6,
        k_shot in 1usize..4,
        m_query in 1usize..4,
        relu in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let params = random_params(4, &[6], 3, 3, 1, &mut rng);
        let shape = EpisodeShape::new(n_way, k_shot, m_query);
        let ep = random_episode(shape, 4, &mut rng);
        let mut perm: Vec<usize> = (0..n_way).collect();
        perm.shuffle(&mut rng);
        let prop = PropagationConfig { projection_relu: relu, ..Default::default() };
        let obj = ObjectiveConfig::default();

        let base = predict(&params, &ep, &prop, &obj).unwrap();
        let moved = predict(&params, &relabel(&ep, &perm), &prop, &obj).unwrap();
        for (i, &old) in perm.iter().enumerate() {
            for m in 0..m_query {
                let new_row = i * m_query + m;
                let old_row = old * m_query + m;
                for (j, &old_j) in perm.iter().enumerate() {
                    let diff = (moved.probs[(new_row, j)] - base.probs[(old_row, old_j)]).abs();
                    prop_assert!(diff <= 1e-9, "row {new_row} class {j}: {diff:e}");
                }
            }
        }
    }
}

/// Finds a fixture seed whose perturbations cross no kink, then checks it.
fn check(prop: &PropagationConfig, obj: &ObjectiveConfig, arm: ScheduleArm) -> GradCheck {
    for seed in 0..200 {
        let (params, ep) = tiny_fixture(seed);
        if let Some(g) = gradcheck(&params, &ep, prop, obj, arm, 1e-4, 1e-4, 1e-7) {
            if !g.kink {
                return g;
            }
        }
    }
    panic!("no kink-free fixture seed");
}

#[test]
fn gradients_of_configuration_variants() {
    let mut cases: Vec<(&str, PropagationConfig, ObjectiveConfig)> = Vec::new();
    let base = PropagationConfig::default();
    cases.push((
        "propagated queries",
        base.clone(),
        ObjectiveConfig {
            propagated_queries: true,
            ..Default::default()
        },
    ));
    cases.push((
        "row softmax",
        PropagationConfig {
            softmax_axis: SoftmaxAxis::Row,
            ..base.clone()
        },
        ObjectiveConfig::default(),
    ));
    cases.push((
        "literal repulsion",
        PropagationConfig {
            repulsion_target: RepulsionTarget::Attention,
            ..base.clone()
        },
        ObjectiveConfig::default(),
    ));
    cases.push((
        "row min scope",
        PropagationConfig {
            min_scope: MinScope::Row,
            ..base.clone()
        },
        ObjectiveConfig::default(),
    ));
    cases.push((
        "projection relu",
        PropagationConfig {
            projection_relu: true,
            ..base.clone()
        },
        ObjectiveConfig::default(),
    ));
    cases.push((
        "sum reduction, temperature 2",
        base.clone(),
        ObjectiveConfig {
            reduction: Reduction::Sum,
            temperature: 2.0,
            ..Default::default()
        },
    ));
    cases.push((
        "raw prototypes",
        base.clone(),
        ObjectiveConfig {
            local_on_raw_prototypes: true,
            ..Default::default()
        },
    ));
    cases.push((
        "unsquared euclidean",
        PropagationConfig {
            metric: Metric::NegEuclidean,
            ..base
        },
        ObjectiveConfig {
            local_metric: Metric::NegEuclidean,
            ..Default::default()
        },
    ));
    for (name, prop, obj) in cases {
        for arm in [ScheduleArm::Cooperative, ScheduleArm::LocalOnly] {
            let g = check(&prop, &obj, arm);
            assert!(g.passes(), "{name} {arm}: {g:?}");
        }
    }
}
