use super::*;
use crate::rng::stream_rng;
use rand::Rng;

fn graph64() -> Graph<f64> {
    Graph::new()
}

#[test]
fn matmul_identity() {
    let mut g = graph64();
    let a = g.input(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.input(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let mut g = graph64();
    let a = g.input(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = g.input(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = graph64();
    let a = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.input(vec![2, 2], vec![0.0; 4]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn layer_norm_constant_vector_is_zero() {
    let mut g = graph64();
    let x = g.input(vec![1, 4], vec![3.5; 4]).unwrap();
    let gamma = g.input(vec![4], vec![1.0; 4]).unwrap();
    let beta = g.input(vec![4], vec![0.0; 4]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    for &v in g.data(y) {
        assert!(v.abs() < 1e-9, "constant input must normalize to zero, got {v}");
    }
}

#[test]
fn layer_norm_two_point_symmetry() {
    let mut g = graph64();
    let x = g.input(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let gamma = g.input(vec![2], vec![1.0, 1.0]).unwrap();
    let beta = g.input(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-5);
    assert!((g.data(y)[1] - 1.0).abs() < 1e-5);
}

#[test]
fn relu_and_gelu_values() {
    let mut g = graph64();
    let x = g.input(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
    let r = g.relu(x);
    assert_eq!(g.data(r), &[0.0, 2.0, 0.0]);
    let ge = g.gelu(x);
    assert_eq!(g.data(ge)[2], 0.0, "GELU(0) = 0");
    assert!(g.data(ge)[1] > 1.9, "GELU(2) close to 2");
}

#[test]
fn max_reduce_values_and_permutation() {
    let mut g = graph64();
    let x = g.input(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
    let (v, arg) = g.max_reduce(x).unwrap();
    assert_eq!(g.data(v), &[3.0, 5.0]);
    assert_eq!(arg, vec![1, 0]);

    // permuted point order: identical values
    let xp = g.input(vec![2, 2], vec![3.0, 2.0, 1.0, 5.0]).unwrap();
    let (vp, _) = g.max_reduce(xp).unwrap();
    assert_eq!(g.data(v), g.data(vp));
}

#[test]
fn max_reduce_tie_breaks_to_lowest_index() {
    let mut g = graph64();
    let x = g.input(vec![3, 1], vec![7.0, 7.0, 7.0]).unwrap();
    let (_, arg) = g.max_reduce(x).unwrap();
    assert_eq!(arg, vec![0]);
}

#[test]
fn max_reduce_empty_axis_errors() {
    let mut g = graph64();
    let x = g.input(vec![0, 3], vec![]).unwrap();
    assert!(matches!(
        g.max_reduce(x),
        Err(TensorError::EmptyAxis { .. })
    ));
}

#[test]
fn concat_feature_axis_and_empty() {
    let mut g = graph64();
    let t = 4;
    let a = g.input(vec![t, 128], vec![1.0; t * 128]).unwrap();
    let b = g.input(vec![t, 128], vec![2.0; t * 128]).unwrap();
    let c = g.concat(a, b, 1).unwrap();
    assert_eq!(g.shape(c), &[t, 256]);

    let empty = g.input(vec![t, 0], vec![]).unwrap();
    let c2 = g.concat(a, empty, 1).unwrap();
    assert_eq!(g.data(c2), g.data(a));
}

#[test]
fn concat_gradient_partitions_upstream() {
    let mut g = graph64();
    let a = g.param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = g.param(vec![2, 1], vec![5.0, 6.0]).unwrap();
    let c = g.concat(a, b, 1).unwrap();
    let w = g
        .input(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    let p = g.mul(c, w).unwrap();
    let loss = g.sum_all(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
    assert_eq!(g.grad(b).unwrap(), &[3.0, 6.0]);
}

#[test]
fn cross_entropy_uniform_logits() {
    let mut g = graph64();
    let x = g.input(vec![8], vec![0.25; 8]).unwrap();
    let loss = g.softmax_cross_entropy(x, 2).unwrap();
    assert!((g.data(loss)[0] - (8f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_extreme_logits_stable() {
    let mut g = graph64();
    let mut logits = vec![-1000.0; 8];
    logits[4] = 1000.0;
    let x = g.input(vec![8], logits).unwrap();
    let loss = g.softmax_cross_entropy(x, 4).unwrap();
    let v = g.data(loss)[0];
    assert!(v.is_finite() && v.abs() < 1e-9, "got {v}");
}

#[test]
fn cross_entropy_matches_direct_formula() {
    // Direct-formula oracle: -log(softmax[label]) computed the naive way in
    // f64, independent of the log-sum-exp route.
    let mut rng = stream_rng(99, "ce-oracle", 0);
    for trial in 0..20 {
        let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let label = trial % 8;
        let exps: Vec<f64> = logits.iter().map(|&l| l.exp()).collect();
        let z: f64 = exps.iter().sum();
        let expected = -(exps[label] / z).ln();

        let mut g = graph64();
        let x = g.input(vec![8], logits).unwrap();
        let loss = g.softmax_cross_entropy(x, label).unwrap();
        assert!((g.data(loss)[0] - expected).abs() < 1e-10);
    }
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g = graph64();
    let x = g.input(vec![8], vec![0.0; 8]).unwrap();
    assert!(matches!(
        g.softmax_cross_entropy(x, 8),
        Err(TensorError::LabelOutOfRange { label: 8, classes: 8 })
    ));
}

#[test]
fn backward_sum_gives_ones() {
    let mut g = graph64();
    let x = g.param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_sum_of_squares_gives_2x() {
    let mut g = graph64();
    let data = vec![1.0, -2.0, 3.0, 0.5];
    let x = g.param(vec![4], data.clone()).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for (gi, xi) in grad.iter().zip(&data) {
        assert!((gi - 2.0 * xi).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = graph64();
    let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
    let loss = g.sum_all(x);
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(TensorError::DoubleBackward)));
}

#[test]
fn backward_non_scalar_errors() {
    let mut g = graph64();
    let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(
        g.backward(x),
        Err(TensorError::NonScalarLoss { .. })
    ));
}

#[test]
fn backward_detached_errors() {
    let mut g = graph64();
    let x = g.input(vec![2], vec![1.0, 2.0]).unwrap();
    let loss = g.sum_all(x);
    assert!(matches!(g.backward(loss), Err(TensorError::Detached)));
}

#[test]
fn forward_backward_deterministic_bitwise() {
    let run = || {
        let mut rng = stream_rng(7, "det", 1);
        let mut g: Graph<f32> = Graph::new();
        let a_data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = g.param(vec![3, 4], a_data).unwrap();
        let b = g.param(vec![4, 2], b_data).unwrap();
        let y = g.matmul(a, b).unwrap();
        let y = g.gelu(y);
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        (
            g.data(loss).to_vec(),
            g.grad(a).unwrap().to_vec(),
            g.grad(b).unwrap().to_vec(),
        )
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert_eq!(l1[0].to_bits(), l2[0].to_bits());
    assert!(ga1.iter().zip(&ga2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gb1.iter().zip(&gb2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn finite_difference_matmul_4x3_3x2() {
    let mut rng = stream_rng(5, "fd-matmul", 0);
    let theta: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = check::check_fn("matmul", &theta, 1e-5, |g, t| {
        let a = g.param(vec![4, 3], t[..12].to_vec())?;
        let b = g.param(vec![3, 2], t[12..].to_vec())?;
        let y = g.matmul(a, b)?;
        let loss = g.mean_all(y);
        Ok((vec![a, b], loss))
    });
    assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn max_reduce_permutation_invariant(
            vals in proptest::collection::vec(-1e3f64..1e3, 24),
            seed in 0u64..1000
        ) {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(vec![8, 3], vals.clone()).unwrap();
            let (v, _) = g.max_reduce(x).unwrap();
            let base = g.data(v).to_vec();

            // permute the 8 points
            let mut order: Vec<usize> = (0..8).collect();
            let mut rng = stream_rng(seed, "prop-perm", 0);
            for i in (1..8).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut shuffled = vec![0.0; 24];
            for (newi, &oldi) in order.iter().enumerate() {
                shuffled[newi * 3..newi * 3 + 3]
                    .copy_from_slice(&vals[oldi * 3..oldi * 3 + 3]);
            }
            let xp = g.input(vec![8, 3], shuffled).unwrap();
            let (vp, _) = g.max_reduce(xp).unwrap();
            prop_assert_eq!(base, g.data(vp).to_vec());
        }

        #[test]
        fn concat_then_split_roundtrips(
            a in proptest::collection::vec(-1e3f64..1e3, 12),
            b in proptest::collection::vec(-1e3f64..1e3, 8)
        ) {
            let mut g: Graph<f64> = Graph::new();
            let ta = g.input(vec![4, 3], a.clone()).unwrap();
            let tb = g.input(vec![4, 2], b.clone()).unwrap();
            let c = g.concat(ta, tb, 1).unwrap();
            let cd = g.data(c);
            for r in 0..4 {
                prop_assert_eq!(&cd[r * 5..r * 5 + 3], &a[r * 3..r * 3 + 3]);
                prop_assert_eq!(&cd[r * 5 + 3..r * 5 + 5], &b[r * 2..r * 2 + 2]);
            }
        }
    }
}
