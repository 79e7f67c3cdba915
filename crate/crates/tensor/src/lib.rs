//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! ```
//! use lasernv_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.var(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]));
//! let y = x.square().sum();
//! let grads = y.backward();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use params::{ParamId, ParamTree};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
