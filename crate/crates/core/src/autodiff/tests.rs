use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(rows, cols, 1.0, rng)
}

fn check<F>(f: F, params: &[Tensor<f64>]) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, AutodiffError>,
{
    finite_diff_check(f, params, 1e-6).unwrap().max_rel_error
}

#[test]
fn matmul_identity_and_hand_product() {
    let tape = Tape::new();
    let m = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
    let i = tape.constant(Tensor::identity(3));
    let out = i.matmul(tape.constant(m.clone())).unwrap();
    assert_eq!(out.value(), m);

    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(t(&[&[1.0], &[1.0]]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    let err = a.matmul(b).unwrap_err();
    assert!(err.to_string().contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = [random(3, 4, &mut rng), random(4, 2, &mut rng)];
    let err = check(|_, v| Ok(v[0].matmul(v[1])?.sum_all()), &params);
    assert!(err < 1e-7, "{err}");
}

#[test]
fn leaky_relu_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::row(&[0.0, -1.0, 5.0]));
    assert_eq!(x.leaky_relu(0.2).unwrap().value().data(), &[0.0, -0.2, 5.0]);
    assert_eq!(x.leaky_relu(0.7).unwrap().value().data()[2], 5.0);
    assert!(matches!(x.leaky_relu(-0.1), Err(AutodiffError::NegativeSlope(_))));
}

#[test]
fn leaky_relu_subgradient_at_zero_is_one() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[0.0, -2.0]));
    x.leaky_relu(0.2).unwrap().sum_all().backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.2]);
}

#[test]
fn segment_softmax_hand_values() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::column(&[0.0, 3f64.ln()]));
    let y = x.segment_softmax(&[0, 0], 1).unwrap().value();
    assert!((y.data()[0] - 0.25).abs() < 1e-15);
    assert!((y.data()[1] - 0.75).abs() < 1e-15);

    let eq = tape.constant(Tensor::column(&[1.5; 5]));
    let y = eq.segment_softmax(&[0; 5], 1).unwrap().value();
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn segment_softmax_shift_invariance() {
    let tape = Tape::<f64>::new();
    let base = Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.5], &[-0.7, 0.1], &[1.1, 1.1]]);
    let seg = [0, 0, 1, 1];
    let y0 = tape.constant(base.clone()).segment_softmax(&seg, 2).unwrap().value();
    let y1 = tape
        .constant(base.map(|x| x + 1000.0))
        .segment_softmax(&seg, 2)
        .unwrap()
        .value();
    assert!(y0.max_abs_diff(&y1) < 1e-12);
}

#[test]
fn segment_ops_reject_bad_ids() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(2, 1));
    assert!(matches!(
        x.segment_softmax(&[0, 3], 2),
        Err(AutodiffError::IndexOutOfRange { index: 3, .. })
    ));
    assert!(x.segment_reduce(&[0, 2], 2, ReduceMode::Sum).is_err());
    assert!(x.segment_reduce(&[0], 2, ReduceMode::Sum).is_err());
    assert!(x.gather_rows(&[2]).is_err());
}

#[test]
fn segment_reduce_sum_and_empty() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::column(&[1.0, 2.0, 3.0]));
    assert_eq!(
        v.segment_reduce(&[0, 0, 0], 1, ReduceMode::Sum).unwrap().value().data(),
        &[6.0]
    );
    for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
        let out = v.segment_reduce(&[0, 0, 2], 3, mode).unwrap().value();
        assert_eq!(out.data()[1], 0.0, "{mode:?}");
    }
}

#[test]
fn segment_sum_matches_naive_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let e = rng.random_range(1..40);
        let n = rng.random_range(1..10);
        let d = rng.random_range(1..5);
        let vals = random(e, d, &mut rng);
        let seg: Vec<usize> = (0..e).map(|_| rng.random_range(0..n)).collect();
        let mut naive = Tensor::zeros(n, d);
        for (row, &s) in seg.iter().enumerate() {
            for k in 0..d {
                naive.set(s, k, naive.get(s, k) + vals.get(row, k));
            }
        }
        let tape = Tape::new();
        let out = tape
            .constant(vals)
            .segment_reduce(&seg, n, ReduceMode::Sum)
            .unwrap()
            .value();
        assert_eq!(out, naive);
    }
}

#[test]
fn segment_max_routes_gradient_to_first_maximum() {
    let tape = Tape::new();
    let x = tape.param(Tensor::column(&[1.0, 4.0, 4.0, 2.0]));
    x.segment_reduce(&[0, 0, 0, 1], 2, ReduceMode::Max)
        .unwrap()
        .sum_all()
        .backward()
        .unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn gather_identity_and_accumulation() {
    let tape = Tape::new();
    let m = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    assert_eq!(tape.constant(m.clone()).gather_rows(&[0, 1, 2]).unwrap().value(), m);

    let x = tape.param(Tensor::column(&[5.0, 6.0]));
    let weights = tape.constant(Tensor::column(&[1.0, 2.0]));
    x.gather_rows(&[0, 0])
        .unwrap()
        .mul(weights)
        .unwrap()
        .sum_all()
        .backward()
        .unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 0.0]);
}

#[test]
fn gather_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = [random(4, 3, &mut rng), random(6, 3, &mut rng)];
    let err = check(
        |_, v| Ok(v[0].gather_rows(&[3, 0, 0, 2, 1, 3])?.mul(v[1])?.sum_all()),
        &params,
    );
    assert!(err < 1e-7, "{err}");
}

#[test]
fn elementwise_identities() {
    let tape = Tape::new();
    let m = t(&[&[1.0, -2.0], &[3.0, 0.5]]);
    let mv = tape.constant(m.clone());
    let ones = tape.constant(Tensor::ones(2, 1));
    assert_eq!(mv.scale_rows(ones).unwrap().value(), m);
    let zero_row = tape.constant(Tensor::zeros(1, 2));
    assert_eq!(mv.add(zero_row).unwrap().value(), m);
    let bad = tape.constant(Tensor::zeros(3, 1));
    assert!(mv.scale_rows(bad).is_err());
    assert!(mv.add(bad).is_err());
}

#[test]
fn scale_rows_gradient_wrt_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = [random(5, 3, &mut rng), random(5, 1, &mut rng), random(5, 3, &mut rng)];
    let err = check(|_, v| Ok(v[0].scale_rows(v[1])?.mul(v[2])?.sum_all()), &params);
    assert!(err < 1e-7, "{err}");
}

#[test]
fn reduce_op_examples() {
    let tape = Tape::new();
    let x = tape.constant(t(&[&[1.0, 3.0]]));
    assert_eq!(x.mean_over_columns().value().data(), &[2.0]);
    assert_eq!(x.sum_over_columns().value().data(), &[4.0]);
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().item(), 0.5);
    assert!(matches!(
        tape.constant(Tensor::row(&[1.0, 0.0])).log(),
        Err(AutodiffError::NonPositiveLog(_))
    ));

    let p = tape.param(Tensor::zeros(2, 3));
    p.sum_all().backward().unwrap();
    assert_eq!(tape.grad(p).unwrap(), Tensor::ones(2, 3));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, 2.0, 3.0]));
    x.sum_all().backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[3.0]));
    let frozen = tape.constant(Tensor::row(&[2.0]));
    x.mul(x).unwrap().mul(frozen).unwrap().sum_all().backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
    assert!(tape.grad(frozen).is_none());
}

#[test]
fn backward_is_single_shot_and_scalar_only() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(x.backward(), Err(AutodiffError::NonScalarLoss([1, 2]))));
    let loss = x.sum_all();
    loss.backward().unwrap();
    assert_eq!(loss.backward(), Err(AutodiffError::AlreadyBackpropagated));
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let tape = Tape::new();
    let used = tape.param(Tensor::row(&[1.0]));
    let unused = tape.param(Tensor::row(&[1.0, 1.0]));
    used.sum_all().backward().unwrap();
    assert_eq!(tape.grad(unused).unwrap(), Tensor::zeros(1, 2));
}

#[test]
fn finite_diff_check_examples() {
    let report = finite_diff_check(
        |_, v: &[Var<'_, f64>]| v[0].mul(v[0]).map(|y| y.sum_all()),
        &[Tensor::row(&[3.0])],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);

    let report = finite_diff_check(
        |tape, _v: &[Var<'_, f64>]| Ok::<_, AutodiffError>(tape.constant(Tensor::scalar(4.0))),
        &[Tensor::row(&[1.0, -1.0])],
        1e-6,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);

    let bad = finite_diff_check(
        |_, v: &[Var<'_, f64>]| Ok::<_, AutodiffError>(v[0].sum_all()),
        &[Tensor::row(&[1.0])],
        0.0,
    );
    assert_eq!(bad.unwrap_err(), AutodiffError::BadStep);
}

#[test]
fn finite_diff_check_rejects_non_finite() {
    let err = finite_diff_check(
        |_, v: &[Var<'_, f64>]| Ok::<_, AutodiffError>(v[0].scale(f64::INFINITY).sum_all()),
        &[Tensor::row(&[1.0])],
        1e-6,
    )
    .unwrap_err();
    assert_eq!(err, AutodiffError::NonFinite);
}

#[test]
fn works_in_single_precision() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::row(&[3.0f32]));
    x.mul(x).unwrap().sum_all().backward().unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0f32]);
}

fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_smooth_op_passes_gradient_check(
        a in arb_matrix(4, 3),
        b in arb_matrix(4, 3),
        row in arb_matrix(1, 3),
        col in arb_matrix(4, 1),
    ) {
        let seg = [0usize, 1, 1, 1];
        let params = [a, b, row, col];
        let err = check(
            |_, v| {
                let x = v[0].mul(v[1])?.add(v[2])?.scale_rows(v[3])?;
                let y = x.sigmoid().add(x.softplus())?.add(x.exp().scale(0.1))?;
                let z = y.segment_softmax(&seg, 2)?.mul(v[1])?;
                let w = z.softmax_rows().add(y.log_softmax_rows())?;
                let m = w.segment_reduce(&seg, 3, ReduceMode::Mean)?;
                let r = v[1].mul(v[2])?.offset(5.0).log()?.sum_over_columns();
                let d = v[0].offset(5.0).div(v[1].offset(4.0))?.mean_over_columns();
                let q = v[0].sub(v[1])?.gather_rows(&[2, 2, 0])?;
                m.sum_all()
                    .add(r.sum_all())?
                    .add(d.mul(v[3])?.sum_all())?
                    .add(q.mul(q)?.sum_all())
            },
            &params,
        );
        prop_assert!(err < 1e-5, "rel err {}", err);
    }

    #[test]
    fn kinked_ops_pass_gradient_check_away_from_kinks(a in arb_matrix(5, 2)) {
        prop_assume!(a.data().iter().all(|x| x.abs() > 1e-3));
        let err = check(
            |_, v| {
                let y = v[0].leaky_relu(0.2)?.add(v[0].relu())?;
                Ok(y.segment_reduce(&[0, 1, 0, 1, 1], 2, ReduceMode::Max)?.sum_all())
            },
            &[a],
        );
        prop_assert!(err < 1e-5, "rel err {}", err);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment(
        logits in arb_matrix(8, 3),
        seg in prop::collection::vec(0usize..4, 8),
    ) {
        let tape = Tape::new();
        let y = tape.constant(logits.map(|x| x * 20.0)).segment_softmax(&seg, 4).unwrap().value();
        for s in 0..4 {
            for k in 0..3 {
                let rows: Vec<usize> = (0..8).filter(|&e| seg[e] == s).collect();
                if rows.is_empty() { continue; }
                let total: f64 = rows.iter().map(|&e| y.get(e, k)).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(rows.iter().all(|&e| y.get(e, k) > 0.0 && y.get(e, k) <= 1.0));
            }
        }
    }
}
