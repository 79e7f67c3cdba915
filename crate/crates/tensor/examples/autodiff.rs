//! Reverse-mode gradients of a small attention-style expression, checked
//! against central differences.
//!
//! `cargo run --release -p lasernv-tensor --example autodiff`

use lasernv_tensor::gradcheck::{max_rel_err, numerical_gradient};
use lasernv_tensor::{Tape, Tensor};

/// `sum(softmax(q k^T / sqrt(d)) v * w)` for q, k, v of shape `[3, 4]`.
fn score(x: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let tape = Tape::<f64>::new();
    let q = tape.var(Tensor::new(vec![3, 4], x[..12].to_vec()));
    let k = tape.var(Tensor::new(vec![3, 4], x[12..24].to_vec()));
    let v = tape.var(Tensor::new(vec![3, 4], x[24..].to_vec()));
    let att = q.matmul(k.permute(&[1, 0])).scale(0.5).softmax();
    let w = tape.constant(Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.7).sin()));
    let y = att.matmul(v).mul(w).sum();
    let mut grad = Vec::new();
    if want_grad {
        let g = y.backward();
        for t in [q, k, v] {
            grad.extend(g.wrt(t).expect("leaf gradient").to_f64_vec());
        }
    }
    (y.item(), grad)
}

fn main() {
    let x: Vec<f64> = (0..36).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let (value, analytic) = score(&x, true);
    let numeric = numerical_gradient(&mut |p| score(p, false).0, &x, 1e-6);
    println!("value {value:.6}");
    println!("d/dq[0..4] analytic {:.6?}", &analytic[..4]);
    println!("d/dq[0..4] numeric  {:.6?}", &numeric[..4]);
    println!("max relative error over all 36 inputs: {:.2e}", max_rel_err(&analytic, &numeric, 1e-8));
}
