//! Tensor arithmetic and reverse-mode differentiation.

mod seed;
pub mod tape;
pub mod tensor;

pub use seed::derive_seed;
pub use tape::{finite_difference_grad, rope_frequencies, sigmoid, Tape, Var};
pub use tensor::{cosine_distance, matmul, softmax_rows, Tensor};
