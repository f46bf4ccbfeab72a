//! Token sequences with supervised positions, shared by training,
//! evaluation and the influence probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlabError, Result};
use crate::model::{ForwardOptions, Model};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `(position, target)`: the logits at `position` should predict `target`.
    pub targets: Vec<(usize, usize)>,
}

impl Example {
    /// Every position predicts the next token.
    pub fn next_token(tokens: Vec<usize>) -> Self {
        let targets = tokens.windows(2).enumerate().map(|(i, w)| (i, w[1])).collect();
        Example { tokens, targets }
    }
}

/// Sum of negative log-likelihoods over an example's targets, and how many
/// targets there were.
pub fn example_nll(logits: &Tensor, targets: &[(usize, usize)]) -> Result<(f64, usize)> {
    let (rows, cols) = logits.dims2()?;
    let mut total = 0.0;
    for &(r, t) in targets {
        if r >= rows || t >= cols {
            return Err(GlabError::Input(format!(
                "target ({r}, {t}) outside logits of shape [{rows}, {cols}]"
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total, targets.len()))
}

/// Mean cross-entropy over every target in `batch`. Examples run in
/// parallel; the sum is taken in index order.
pub fn mean_loss(model: &Model, batch: &[Example], opts: &ForwardOptions) -> Result<f64> {
    if batch.is_empty() {
        return Err(GlabError::Input("evaluation batch is empty".into()));
    }
    let parts: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|ex| {
            let trace = model.forward_with(&ex.tokens, opts)?;
            example_nll(&trace.logits, &ex.targets)
        })
        .collect::<Result<_>>()?;
    let (mut total, mut count) = (0.0, 0);
    for (s, n) in parts {
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(GlabError::Input("evaluation batch has no targets".into()));
    }
    Ok(total / count as f64)
}
