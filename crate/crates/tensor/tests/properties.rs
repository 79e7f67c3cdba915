use lasernv_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 ^ seed) % 97) as f64 - 48.0).collect();
        let tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::new(vec![rows, cols], data)).softmax().value();
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_expansion(a in tensor(vec![3, 1, 4]), b in tensor(vec![2, 1])) {
        let tape = Tape::<f64>::new();
        let out = tape.constant(a.clone()).add(tape.constant(b.clone())).value();
        prop_assert_eq!(out.shape(), &[3, 2, 4]);
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    let expect = a.data()[i * 4 + k] + b.data()[j];
                    prop_assert_eq!(out.data()[(i * 2 + j) * 4 + k], expect);
                }
            }
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity(m in tensor(vec![3, 3])) {
        let mut m = m;
        for i in 0..3 {
            m.data_mut()[i * 4] += 10.0;
        }
        let tape = Tape::<f64>::new();
        let a = tape.constant(m);
        let prod = a.inverse().matmul(a).value();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((prod.data()[i * 3 + j] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_is_shift_and_scale_invariant(x in tensor(vec![2, 5]), shift in -5.0f64..5.0, scale in 0.5f64..4.0) {
        prop_assume!(x.data()[..5].iter().any(|&v| (v - x.data()[0]).abs() > 0.1));
        prop_assume!(x.data()[5..].iter().any(|&v| (v - x.data()[5]).abs() > 0.1));
        let tape = Tape::<f64>::new();
        let base = tape.constant(x.clone()).layer_norm(1e-12).value();
        let moved = tape.constant(x.map(|v| v * scale + shift)).layer_norm(1e-12).value();
        prop_assert!(base.max_abs_diff(&moved) < 1e-8);
    }
}
