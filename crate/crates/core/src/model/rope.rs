use crate::error::Result;
use crate::numcore::{Tape, Tensor};

/// Rotate interleaved pairs `(2i, 2i+1)` of each row by `m·base^(-2i/d)`,
/// where `m` is that row's position.
pub fn apply_rope(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let b = tape.scalar_constant(base);
    let y = tape.rope(xv, positions, b)?;
    Ok(tape.value(y).clone())
}
