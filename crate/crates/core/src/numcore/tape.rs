//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. A node records
//! its backward rule only when at least one input requires a gradient, so a
//! pure inference pass keeps values and nothing else. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the inputs.
//!
//! A tape is built for one forward pass and dropped afterwards. Concurrent
//! evaluations each own a private tape.

use crate::error::{GlabError, Result};
use crate::numcore::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, softmax_slice, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a · bᵀ
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    /// Scalar var times tensor.
    MulByScalar {
        x: Var,
        s: Var,
    },
    Sigmoid {
        x: Var,
    },
    /// Gradient passes only where the input was already inside `[lo, hi]`.
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Silu {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        rows: usize,
        cols: usize,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        base: Var,
        positions: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        rows: usize,
        in_cols: usize,
        out_cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient stored on a node by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor {
            shape,
            data,
            requires_grad: rg,
            grad: None,
        };
        self.push(value, if rg { op } else { Op::Leaf })
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(GlabError::Shape(format!("{what}: {:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn scalar_of(&self, v: Var, what: &str) -> Result<f64> {
        let t = self.value(v);
        if !t.is_scalar() {
            return Err(GlabError::Shape(format!(
                "{what} expects a scalar, got shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    // ── linear algebra ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(GlabError::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push_op(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ`; with `b` stored as `[out, in]` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(GlabError::Shape(format!(
                "matmul_nt inner dimensions disagree: {:?} x {:?}ᵀ",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        Ok(self.push_op(vec![m, n], out, &[a, b], Op::MatMulNt { a, b, m, k, n }))
    }

    // ── elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(shape, out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(shape, out, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.value(a).shape.clone();
        Ok(self.push_op(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        self.push_op(shape, out, &[x], Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|v| v + c).collect());
        self.push_op(shape, out, &[x], Op::AddScalar { x })
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn mul_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_by_scalar")?;
        let t = self.value(x);
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|v| v * sv).collect());
        Ok(self.push_op(shape, out, &[x, s], Op::MulByScalar { x, s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|&v| sigmoid(v)).collect());
        self.push_op(shape, out, &[x], Op::Sigmoid { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|v| v.clamp(lo, hi)).collect());
        self.push_op(shape, out, &[x], Op::Clamp { x, lo, hi })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data.iter().map(|&v| v * sigmoid(v)).collect();
        let shape = t.shape.clone();
        self.push_op(shape, out, &[x], Op::Silu { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(GlabError::NumericDomain(format!("sqrt of {bad}")));
        }
        let (shape, out) = (t.shape.clone(), t.data.iter().map(|v| v.sqrt()).collect());
        Ok(self.push_op(shape, out, &[x], Op::Sqrt { x }))
    }

    // ── structured ───────────────────────────────────────────────

    /// Row softmax. With `causal`, row `i` only attends to columns `0..=i`
    /// and the masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if causal && rows != cols {
            return Err(GlabError::Shape(format!(
                "causal softmax needs a square score matrix, got {rows}x{cols}"
            )));
        }
        let data = &self.value(x).data;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(GlabError::NumericDomain(format!(
                "softmax input contains non-finite value {bad}"
            )));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let width = if causal { r + 1 } else { cols };
            let base = r * cols;
            softmax_slice(&data[base..base + width], &mut out[base..base + width]);
        }
        Ok(self.push_op(vec![rows, cols], out, &[x], Op::SoftmaxRows { x, rows, cols }))
    }

    /// Root-mean-square normalization of each row, times a per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let g = self.value(gain);
        if g.numel() != cols {
            return Err(GlabError::Shape(format!(
                "rms_norm gain of shape {:?} for rows of width {cols}",
                g.shape
            )));
        }
        let xd = &self.value(x).data;
        let gd = &g.data;
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let ms = dot(row, row) / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * gd[c];
            }
        }
        Ok(self.push_op(
            vec![rows, cols],
            out,
            &[x, gain],
            Op::RmsNorm {
                x,
                gain,
                rows,
                cols,
                inv_rms,
            },
        ))
    }

    /// Rotary position encoding with interleaved pairs `(2i, 2i+1)`.
    ///
    /// Row `r` sits at position `positions[r]` and pair `i` turns by
    /// `positions[r] * base^(-2i/d)`. Differentiable in both `x` and `base`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if cols % 2 != 0 {
            return Err(GlabError::Config(format!("rope needs an even head width, got {cols}")));
        }
        if positions.len() != rows {
            return Err(GlabError::Shape(format!(
                "rope got {} positions for {rows} rows",
                positions.len()
            )));
        }
        let b = self.scalar_of(base, "rope base")?;
        if !(b > 0.0) || !b.is_finite() {
            return Err(GlabError::NumericDomain(format!("rope base {b}")));
        }
        let freqs = rope_frequencies(b, cols);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let m = positions[r] as f64;
            for (i, f) in freqs.iter().enumerate() {
                let (sin, cos) = (m * f).sin_cos();
                let (x0, x1) = (xd[r * cols + 2 * i], xd[r * cols + 2 * i + 1]);
                out[r * cols + 2 * i] = x0 * cos - x1 * sin;
                out[r * cols + 2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
        Ok(self.push_op(
            vec![rows, cols],
            out,
            &[x, base],
            Op::Rope {
                x,
                base,
                positions: positions.to_vec(),
                rows,
                cols,
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, in_cols) = self.dims2(x)?;
        if start + len > in_cols {
            return Err(GlabError::Shape(format!(
                "column slice {start}..{} out of range for width {in_cols}",
                start + len
            )));
        }
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * in_cols + start..r * in_cols + start + len]);
        }
        Ok(self.push_op(
            vec![rows, len],
            out,
            &[x],
            Op::SliceCols {
                x,
                start,
                rows,
                in_cols,
                out_cols: len,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GlabError::Shape("concat of zero tensors".into()))?;
        let (rows, _) = self.dims2(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(GlabError::Shape(format!("concat_cols row mismatch: {r} vs {rows}")));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p).data[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push_op(vec![rows, total], out, parts, Op::ConcatCols { parts: widths, rows }))
    }

    /// Gather rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(GlabError::Input(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        let td = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        Ok(self.push_op(
            vec![ids.len(), dim],
            out,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
        ))
    }

    /// Mean negative log-likelihood over `(row, target)` pairs of a logits
    /// matrix. Returns a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits)?;
        if targets.is_empty() {
            return Err(GlabError::Input("cross entropy over zero targets".into()));
        }
        if let Some(&(r, t)) = targets.iter().find(|&&(r, t)| r >= rows || t >= cols) {
            return Err(GlabError::Input(format!(
                "target ({r}, {t}) outside logits of shape [{rows}, {cols}]"
            )));
        }
        let ld = &self.value(logits).data;
        let mut total = 0.0;
        for &(r, t) in targets {
            total += log_sum_exp(&ld[r * cols..(r + 1) * cols]) - ld[r * cols + t];
        }
        let loss = total / targets.len() as f64;
        Ok(self.push_op(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                cols,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push_op(vec![1], vec![s], &[x], Op::Sum { x })
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        let out = self.value(x).mean_rows()?;
        Ok(self.push_op(vec![1, cols], out, &[x], Op::MeanRows { x, rows, cols }))
    }

    // ── backward ─────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every reachable
    /// node that requires one and add up across fan-out. Gradients from a
    /// previous call are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(GlabError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if self.nodes.is_empty() {
            return Err(GlabError::Contract("backward on an empty tape".into()));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(&node.op, &node.value.data, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (n, g) in self.nodes.iter_mut().zip(grads) {
            if n.value.requires_grad {
                n.value.grad = g;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value.data };
        let numel = |v: Var| self.nodes[v.0].value.data.len();

        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA = g · Bᵀ
                    let da = slot(grads, *a, m * k);
                    matmul_nt_into(g, val(*b), da, m, n, k);
                }
                if rg(*b) {
                    // dB = Aᵀ · g
                    let db = slot(grads, *b, k * n);
                    matmul_tn_into(val(*a), g, db, m, k, n);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    // dA = g · B
                    let da = slot(grads, *a, m * k);
                    matmul_into(g, val(*b), da, m, n, k);
                }
                if rg(*b) {
                    // dB = gᵀ · A
                    let db = slot(grads, *b, n * k);
                    matmul_tn_into(g, val(*a), db, m, n, k);
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    let db = slot(grads, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = val(*b);
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = slot(grads, *x, g.len());
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c);
            }
            Op::AddScalar { x } => add_into(slot(grads, *x, g.len()), g),
            Op::MulByScalar { x, s } => {
                let sv = val(*s)[0];
                if rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * sv);
                }
                if rg(*s) {
                    let xv = val(*x);
                    let ds = dot(g, xv);
                    slot(grads, *s, 1)[0] += ds;
                }
            }
            Op::Sigmoid { x } => {
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Silu { x } => {
                let xv = val(*x);
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let s = sigmoid(xv[i]);
                    dx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                }
            }
            Op::Sqrt { x } => {
                let dx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    dx[i] += g[i] * 0.5 / out[i];
                }
            }
            Op::SoftmaxRows { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let dx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let inner = dot(y, gr);
                    for c in 0..cols {
                        dx[r * cols + c] += y[c] * (gr[c] - inner);
                    }
                }
            }
            Op::RmsNorm {
                x,
                gain,
                rows,
                cols,
                inv_rms,
            } => {
                let (rows, cols) = (*rows, *cols);
                let xv = val(*x);
                let gv = val(*gain);
                if rg(*gain) {
                    let dgain = slot(grads, *gain, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dgain[c] += g[r * cols + c] * xv[r * cols + c] * inv_rms[r];
                        }
                    }
                }
                if rg(*x) {
                    let dx = slot(grads, *x, rows * cols);
                    let mut u = vec![0.0; cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let xr = &xv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            u[c] = g[r * cols + c] * gv[c];
                        }
                        // d/dx (x·inv) = inv·(u − x·inv²·mean(u·x))
                        let proj = dot(&u, xr) / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] += inv * (u[c] - xr[c] * inv * inv * proj);
                        }
                    }
                }
            }
            Op::Rope {
                x,
                base,
                positions,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let b = val(*base)[0];
                let freqs = rope_frequencies(b, cols);
                if rg(*x) {
                    let dx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        let m = positions[r] as f64;
                        for (i, f) in freqs.iter().enumerate() {
                            let (sin, cos) = (m * f).sin_cos();
                            let (g0, g1) = (g[r * cols + 2 * i], g[r * cols + 2 * i + 1]);
                            dx[r * cols + 2 * i] += g0 * cos + g1 * sin;
                            dx[r * cols + 2 * i + 1] += -g0 * sin + g1 * cos;
                        }
                    }
                }
                if rg(*base) {
                    // angle = m·b^(−2i/d) ⇒ ∂angle/∂b = angle·(−2i/d)/b
                    let mut acc = 0.0;
                    for r in 0..rows {
                        let m = positions[r] as f64;
                        for (i, f) in freqs.iter().enumerate() {
                            let (y0, y1) = (out[r * cols + 2 * i], out[r * cols + 2 * i + 1]);
                            let (g0, g1) = (g[r * cols + 2 * i], g[r * cols + 2 * i + 1]);
                            let dangle = -g0 * y1 + g1 * y0;
                            let expo = -2.0 * i as f64 / cols as f64;
                            acc += dangle * m * f * expo / b;
                        }
                    }
                    slot(grads, *base, 1)[0] += acc;
                }
            }
            Op::SliceCols {
                x,
                start,
                rows,
                in_cols,
                out_cols,
            } => {
                let dx = slot(grads, *x, rows * in_cols);
                for r in 0..*rows {
                    for c in 0..*out_cols {
                        dx[r * in_cols + start + c] += g[r * out_cols + c];
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if rg(p) {
                        let dp = slot(grads, p, rows * c);
                        for r in 0..*rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Embedding { table, ids, dim } => {
                let dim = *dim;
                let dt = slot(grads, *table, numel(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        dt[id * dim + c] += g[r * dim + c];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, cols } => {
                let cols = *cols;
                let lv = val(*logits);
                let scale = g[0] / targets.len() as f64;
                let dl = slot(grads, *logits, lv.len());
                let mut p = vec![0.0; cols];
                for &(r, t) in targets {
                    softmax_slice(&lv[r * cols..(r + 1) * cols], &mut p);
                    for c in 0..cols {
                        dl[r * cols + c] += scale * p[c];
                    }
                    dl[r * cols + t] -= scale;
                }
            }
            Op::Sum { x } => {
                let dx = slot(grads, *x, numel(*x));
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::MeanRows { x, rows, cols } => {
                let dx = slot(grads, *x, rows * cols);
                let inv = 1.0 / *rows as f64;
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] += g[c] * inv;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// `base^(-2i/d)` for each pair `i` of a width-`d` head.
pub fn rope_frequencies(base: f64, d: usize) -> Vec<f64> {
    (0..d / 2).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect()
}

/// Central-difference gradient estimate of a scalar function.
///
/// Element `i` is `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    probe.grad = None;
    let mut out = Tensor::zeros(x.shape.clone());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (fp - fm) / (2.0 * h);
    }
    out
}
