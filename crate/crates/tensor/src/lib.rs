//! Dense 64-bit tensors and a tape-based reverse-mode differentiation engine.
//!
//! Only the primitives a convolutional diffusion denoiser needs are provided:
//! grouped 2-D convolution with zero or reflect padding, GELU/SiLU/sigmoid,
//! softmax, L2 normalization, matrix products, reshaping and slicing,
//! reductions, nearest upsampling and whole-tensor standardization.
//!
//! ```
//! use r2h_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let x = tape.constant(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap());
//! let wx = tape.mul(w, x).unwrap();
//! let loss = tape.sum(wx).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, 6.0]);
//! ```

mod conv;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::{conv_output_len, Conv2dOptions, PadMode};
pub use error::{Result, TensorError};
pub use tape::{gelu, normal_cdf, sigmoid, silu, Activation, Gradients, Tape, Var};
pub use tensor::{Parameter, Tensor};
