//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The op set is deliberately small: it covers what a causal transformer
//! decoder with cross-attention and a Gaussian variational objective need,
//! and nothing more.
//!
//! ```
//! use lap_numgrad::{Tape, Tensor};
//!
//! let x = Tensor::scalar(3.0).with_grad();
//! let mut tape = Tape::new();
//! let xv = tape.leaf(&x).unwrap();
//! let y = tape.square(xv).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(xv).unwrap(), &[6.0]);
//! ```

mod checkpoint;
mod error;
mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;
