//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! the output value and references to its input nodes. Nodes only ever
//! reference earlier nodes, so the recording order is already topological
//! and [`Tape::backward`] is a single reverse sweep that visits each node
//! exactly once.
//!
//! Tapes are single-threaded by design; independent tapes may run on
//! different threads against shared read-only parameter data.

use std::cell::{Cell, Ref, RefCell};

use crate::scalar::{lit, Scalar};
use crate::tensor::kernels::{log_sum_exp, mm_nn, mm_nt, mm_tn, softmax_row_inplace};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Score assigned to attention cells above the diagonal. Finite so the
/// softmax stability checks still hold, yet small enough that the masked
/// probabilities underflow to exactly zero.
const MASKED_SCORE: f64 = -1e9;

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,n] + [n]`, broadcasting the vector over rows.
    AddRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: F,
    },
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    Min(Var, Var),
    Clip(Var, F, F),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    SumAll(Var),
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Recorded computation graph. Create one per forward/backward cycle.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    backward_done: Cell<bool>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor. Gradients flow into it iff
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&self, tensor: Tensor<F>) -> Var {
        self.push(Op::Leaf, tensor)
    }

    /// Records a constant input that never receives gradient.
    pub fn constant(&self, mut tensor: Tensor<F>) -> Var {
        if tensor.requires_grad() {
            tensor = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
                .expect("shape preserved");
        }
        self.push(Op::Leaf, tensor)
    }

    /// Borrows the value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.0].value)
    }

    /// Copies the gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<F>> {
        self.nodes.borrow()[v.0].value.grad().map(|g| g.to_vec())
    }

    fn push(&self, op: Op<F>, value: Tensor<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    fn push_flow(&self, op: Op<F>, mut value: Tensor<F>, flows: bool) -> Var {
        if flows {
            value = value.requiring_grad();
        }
        self.push(op, value)
    }

    fn flows(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].value.requires_grad()
    }

    fn tensor(&self, v: Var, f: impl FnOnce(&Tensor<F>) -> Tensor<F>) -> Tensor<F> {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties propagate gradient to the first operand.
    pub fn min(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_elementwise(
            "min",
            a,
            b,
            |x, y| if y < x { y } else { x },
            Op::Min(a, b),
        )
    }

    fn zip_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        let flows = self.flows(a) || self.flows(b);
        Ok(self.push_flow(op, out, flows))
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.tensor(a, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect())
                .expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::Scale(a, c), out, flows)
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let out = self.tensor(a, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x + c).collect())
                .expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::AddScalar(a, c), out, flows)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.tensor(a, |t| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x.exp()).collect())
                .expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::Exp(a), out, flows)
    }

    /// `ln(1 + e^x)`, computed without overflow for large |x|.
    pub fn softplus(&self, a: Var) -> Var {
        let out = self.tensor(a, |t| {
            let data = t.data().iter().map(|&x| softplus(x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::Softplus(a), out, flows)
    }

    /// Clamps values into `[lo, hi]`. Gradient passes only where the input
    /// lies inside the interval.
    pub fn clip(&self, a: Var, lo: F, hi: F) -> Var {
        let out = self.tensor(a, |t| {
            let data = t
                .data()
                .iter()
                .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
                .collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::Clip(a, lo, hi), out, flows)
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.tensor(a, |t| {
            let data = t.data().iter().map(|&x| gelu(x)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        let flows = self.flows(a);
        self.push_flow(Op::Gelu(a), out, flows)
    }

    // ---- matrix ops ----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, ka) = ta.as_matrix("matmul")?;
            let (kb, n) = tb.as_matrix("matmul")?;
            if ka != kb {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut data = vec![F::zero(); m * n];
            mm_nn(ta.data(), tb.data(), m, ka, n, &mut data);
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(a) || self.flows(b);
        Ok(self.push_flow(Op::MatMul(a, b), out, flows))
    }

    /// `a * b^T`; used for attention scores and tied output embeddings.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, ka) = ta.as_matrix("matmul_nt")?;
            let (n, kb) = tb.as_matrix("matmul_nt")?;
            if ka != kb {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_nt",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut data = vec![F::zero(); m * n];
            mm_nt(ta.data(), tb.data(), m, ka, n, &mut data);
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(a) || self.flows(b);
        Ok(self.push_flow(Op::MatMulNT(a, b), out, flows))
    }

    /// Adds a `[n]` bias vector to every row of a `[m,n]` matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[bias.0].value);
            let (m, n) = ta.as_matrix("add_row")?;
            if tb.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for (x, &b) in ta.data()[i * n..(i + 1) * n].iter().zip(tb.data()) {
                    data.push(*x + b);
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(a) || self.flows(bias);
        Ok(self.push_flow(Op::AddRow(a, bias), out, flows))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = ta.as_matrix("slice_rows")?;
            if start + len > m {
                return Err(TensorError::SliceOutOfRange {
                    op: "slice_rows",
                    start,
                    len,
                    dim: m,
                });
            }
            let data = ta.data()[start * n..(start + len) * n].to_vec();
            Tensor::new(vec![len, n], data)?
        };
        let flows = self.flows(a);
        Ok(self.push_flow(Op::SliceRows(a, start), out, flows))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = ta.as_matrix("slice_cols")?;
            if start + len > n {
                return Err(TensorError::SliceOutOfRange {
                    op: "slice_cols",
                    start,
                    len,
                    dim: n,
                });
            }
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
            }
            Tensor::new(vec![m, len], data)?
        };
        let flows = self.flows(a);
        Ok(self.push_flow(Op::SliceCols(a, start), out, flows))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let (m, _) = nodes[parts[0].0].value.as_matrix("concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (mp, np) = nodes[p.0].value.as_matrix("concat_cols")?;
                if mp != m {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[parts[0].0].value.shape().to_vec(),
                        rhs: nodes[p.0].value.shape().to_vec(),
                    });
                }
                widths.push(np);
            }
            let n: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let flows = parts.iter().any(|&p| self.flows(p));
        Ok(self.push_flow(Op::ConcatCols(parts.to_vec()), out, flows))
    }

    // ---- neural-net primitives ------------------------------------------

    /// Row-wise softmax with max subtraction. Rejects NaN input.
    pub fn softmax_rows(&self, a: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = ta.as_matrix("softmax_rows")?;
            if ta.data().iter().any(|x| x.is_nan()) {
                return Err(TensorError::NonFinite { op: "softmax_rows" });
            }
            let mut data = ta.data().to_vec();
            for i in 0..m {
                softmax_row_inplace(&mut data[i * n..(i + 1) * n]);
            }
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(a);
        Ok(self.push_flow(Op::SoftmaxRows(a), out, flows))
    }

    /// Replaces entries above the diagonal of a square score matrix with a
    /// large negative constant, so a following softmax zeroes them.
    pub fn causal_mask(&self, a: Var) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let (m, n) = ta.as_matrix("causal_mask")?;
            if m != n {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_mask",
                    lhs: ta.shape().to_vec(),
                    rhs: ta.shape().to_vec(),
                });
            }
            let mut data = ta.data().to_vec();
            let masked = lit::<F>(MASKED_SCORE);
            for i in 0..m {
                for x in data[i * n + i + 1..(i + 1) * n].iter_mut() {
                    *x = masked;
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(a);
        Ok(self.push_flow(Op::CausalMask(a), out, flows))
    }

    /// Per-row layer normalization with affine gain/bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let (m, n) = tx.as_matrix("layer_norm")?;
            if tg.shape() != [n] || tb.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: tg.shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(m * n);
            let inv_n = F::one() / lit::<F>(n as f64);
            for i in 0..m {
                let row = &tx.data()[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<F>() * inv_n;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<F>()
                    * inv_n;
                let inv_std = F::one() / (var + eps).sqrt();
                for ((&v, &g), &b) in row.iter().zip(tg.data()).zip(tb.data()) {
                    data.push((v - mean) * inv_std * g + b);
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let flows = self.flows(x) || self.flows(gain) || self.flows(bias);
        Ok(self.push_flow(Op::LayerNorm { x, gain, bias, eps }, out, flows))
    }

    /// Gathers rows of `table` at `ids`: the embedding lookup.
    pub fn embed(&self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let tt = &nodes[table.0].value;
            let (rows, n) = tt.as_matrix("embed")?;
            let mut data = Vec::with_capacity(ids.len() * n);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "embed",
                        index: id,
                        size: rows,
                    });
                }
                data.extend_from_slice(&tt.data()[id * n..(id + 1) * n]);
            }
            Tensor::new(vec![ids.len(), n], data)?
        };
        let flows = self.flows(table);
        Ok(self.push_flow(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
            flows,
        ))
    }

    /// Per-token negative log-probabilities `-log softmax(logits)[t, targets[t]]`
    /// at masked-in positions; zero elsewhere. Output shape `[T]`.
    pub fn cross_entropy_per_token(
        &self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let out = {
            let nodes = self.nodes.borrow();
            let tl = &nodes[logits.0].value;
            let (t_len, vocab) = tl.as_matrix("cross_entropy_per_token")?;
            if targets.len() != t_len || mask.len() != t_len {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy_per_token",
                    lhs: vec![t_len],
                    rhs: vec![targets.len(), mask.len()],
                });
            }
            let mut data = vec![F::zero(); t_len];
            for t in 0..t_len {
                if !mask[t] {
                    continue;
                }
                if targets[t] >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy_per_token",
                        index: targets[t],
                        size: vocab,
                    });
                }
                let row = &tl.data()[t * vocab..(t + 1) * vocab];
                let lse = log_sum_exp(row);
                // Mathematically >= 0; clamp the odd -1 ulp rounding.
                data[t] = (lse - row[targets[t]]).max(F::zero());
            }
            Tensor::new(vec![t_len], data)?
        };
        let flows = self.flows(logits);
        Ok(self.push_flow(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            out,
            flows,
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&self, a: Var) -> Var {
        let out = self.tensor(a, |t| Tensor::scalar(t.data().iter().copied().sum()));
        let flows = self.flows(a);
        self.push_flow(Op::SumAll(a), out, flows)
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `d root / d node` into every gradient-requiring node.
    ///
    /// `root` must be a scalar (`[1]`); calling backward twice on the same
    /// tape is an error.
    pub fn backward(&self, root: Var) -> Result<(), TensorError> {
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: nodes[root.0].value.shape().to_vec(),
            });
        }
        nodes[root.0].value.grad_mut()[0] = F::one();

        for i in (0..nodes.len()).rev() {
            let (before, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.value.requires_grad() || node.value.grad().is_none() {
                continue;
            }
            let grad = node.value.grad().expect("checked above").to_vec();
            backprop(&node.op, &node.value, &grad, before);
        }
        Ok(())
    }
}

/// Applies one node's backward rule, accumulating into earlier nodes.
fn backprop<F: Scalar>(op: &Op<F>, value: &Tensor<F>, g: &[F], before: &mut [Node<F>]) {
    let needs = |nodes: &[Node<F>], v: Var| nodes[v.0].value.requires_grad();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [a, b] {
                if needs(before, v) {
                    accumulate(&mut before[v.0].value, g, |x| x);
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(before, *a) {
                accumulate(&mut before[a.0].value, g, |x| x);
            }
            if needs(before, *b) {
                accumulate(&mut before[b.0].value, g, |x| -x);
            }
        }
        Op::Mul(a, b) => {
            if needs(before, *a) {
                let bd = before[b.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(&bd) {
                    *o += gv * bv;
                }
            }
            if needs(before, *b) {
                let ad = before[a.0].value.data().to_vec();
                let gb = before[b.0].value.grad_mut();
                for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(&ad) {
                    *o += gv * av;
                }
            }
        }
        Op::AddRow(a, bias) => {
            if needs(before, *a) {
                accumulate(&mut before[a.0].value, g, |x| x);
            }
            if needs(before, *bias) {
                let n = before[bias.0].value.len();
                let gb = before[bias.0].value.grad_mut();
                for (j, &gv) in g.iter().enumerate() {
                    gb[j % n] += gv;
                }
            }
        }
        Op::Scale(a, c) => {
            if needs(before, *a) {
                accumulate(&mut before[a.0].value, g, |x| x * *c);
            }
        }
        Op::AddScalar(a, _) => {
            if needs(before, *a) {
                accumulate(&mut before[a.0].value, g, |x| x);
            }
        }
        Op::Exp(a) => {
            if needs(before, *a) {
                let out = value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(&out) {
                    *o += gv * y;
                }
            }
        }
        Op::Softplus(a) => {
            if needs(before, *a) {
                let xs = before[a.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(&xs) {
                    *o += gv * sigmoid(x);
                }
            }
        }
        Op::Min(a, b) => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            if needs(before, *a) {
                let ga = before[a.0].value.grad_mut();
                for (i, (o, &gv)) in ga.iter_mut().zip(g).enumerate() {
                    if av[i] <= bv[i] {
                        *o += gv;
                    }
                }
            }
            if needs(before, *b) {
                let gb = before[b.0].value.grad_mut();
                for (i, (o, &gv)) in gb.iter_mut().zip(g).enumerate() {
                    if bv[i] < av[i] {
                        *o += gv;
                    }
                }
            }
        }
        Op::Clip(a, lo, hi) => {
            if needs(before, *a) {
                let xs = before[a.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                for (i, (o, &gv)) in ga.iter_mut().zip(g).enumerate() {
                    if xs[i] >= *lo && xs[i] <= *hi {
                        *o += gv;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if needs(before, *a) {
                let xs = before[a.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(&xs) {
                    *o += gv * gelu_grad(x);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = before[a.0].value.as_matrix("matmul").expect("checked");
            let (_, n) = before[b.0].value.as_matrix("matmul").expect("checked");
            if needs(before, *a) {
                let bd = before[b.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                mm_nt(g, &bd, m, n, k, ga);
            }
            if needs(before, *b) {
                let ad = before[a.0].value.data().to_vec();
                let gb = before[b.0].value.grad_mut();
                mm_tn(&ad, g, m, k, n, gb);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = before[a.0].value.as_matrix("matmul_nt").expect("checked");
            let (n, _) = before[b.0].value.as_matrix("matmul_nt").expect("checked");
            if needs(before, *a) {
                let bd = before[b.0].value.data().to_vec();
                let ga = before[a.0].value.grad_mut();
                mm_nn(g, &bd, m, n, k, ga);
            }
            if needs(before, *b) {
                let ad = before[a.0].value.data().to_vec();
                let gb = before[b.0].value.grad_mut();
                mm_tn(g, &ad, m, n, k, gb);
            }
        }
        Op::SliceRows(a, start) => {
            if needs(before, *a) {
                let (_, n) = before[a.0].value.as_matrix("slice_rows").expect("checked");
                let ga = before[a.0].value.grad_mut();
                for (j, &gv) in g.iter().enumerate() {
                    ga[start * n + j] += gv;
                }
            }
        }
        Op::SliceCols(a, start) => {
            if needs(before, *a) {
                let (_, n) = before[a.0].value.as_matrix("slice_cols").expect("checked");
                let len = value.shape()[1];
                let ga = before[a.0].value.grad_mut();
                for (idx, &gv) in g.iter().enumerate() {
                    let (i, j) = (idx / len, idx % len);
                    ga[i * n + start + j] += gv;
                }
            }
        }
        Op::ConcatCols(parts) => {
            let m = value.shape()[0];
            let n = value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let w = before[p.0].value.shape()[1];
                if needs(before, p) {
                    let gp = before[p.0].value.grad_mut();
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * n + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SoftmaxRows(a) => {
            if needs(before, *a) {
                let (m, n) = value.as_matrix("softmax_rows").expect("checked");
                let y = value.data();
                let ga = before[a.0].value.grad_mut();
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv * gv)
                        .sum::<F>();
                    for (j, o) in ga[i * n..(i + 1) * n].iter_mut().enumerate() {
                        *o += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::CausalMask(a) => {
            if needs(before, *a) {
                let (m, n) = value.as_matrix("causal_mask").expect("checked");
                let ga = before[a.0].value.grad_mut();
                for i in 0..m {
                    for j in 0..=i.min(n - 1) {
                        ga[i * n + j] += g[i * n + j];
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (m, n) = before[x.0].value.as_matrix("layer_norm").expect("checked");
            let xd = before[x.0].value.data().to_vec();
            let gd = before[gain.0].value.data().to_vec();
            let inv_n = F::one() / lit::<F>(n as f64);
            // Recompute per-row statistics; cheaper than storing them.
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let mean = row.iter().copied().sum::<F>() * inv_n;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<F>()
                    * inv_n;
                let inv_std = F::one() / (var + *eps).sqrt();
                let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                if needs(before, *gain) {
                    let gg = before[gain.0].value.grad_mut();
                    for j in 0..n {
                        gg[j] += gr[j] * xhat[j];
                    }
                }
                if needs(before, *bias) {
                    let gb = before[bias.0].value.grad_mut();
                    for j in 0..n {
                        gb[j] += gr[j];
                    }
                }
                if needs(before, *x) {
                    let dy: Vec<F> = (0..n).map(|j| gr[j] * gd[j]).collect();
                    let mean_dy = dy.iter().copied().sum::<F>() * inv_n;
                    let mean_dy_xhat = dy
                        .iter()
                        .zip(&xhat)
                        .map(|(&d, &h)| d * h)
                        .sum::<F>()
                        * inv_n;
                    let gx = before[x.0].value.grad_mut();
                    for j in 0..n {
                        gx[i * n + j] +=
                            (dy[j] - mean_dy - xhat[j] * mean_dy_xhat) * inv_std;
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            if needs(before, *table) {
                let (_, n) = before[table.0].value.as_matrix("embed").expect("checked");
                let gt = before[table.0].value.grad_mut();
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[id * n + j] += g[t * n + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
        } => {
            if needs(before, *logits) {
                let (t_len, vocab) = before[logits.0]
                    .value
                    .as_matrix("cross_entropy_per_token")
                    .expect("checked");
                let ld = before[logits.0].value.data().to_vec();
                let gl = before[logits.0].value.grad_mut();
                for t in 0..t_len {
                    if !mask[t] || g[t] == F::zero() {
                        continue;
                    }
                    let mut probs = ld[t * vocab..(t + 1) * vocab].to_vec();
                    softmax_row_inplace(&mut probs);
                    for (j, &p) in probs.iter().enumerate() {
                        let indicator = if j == targets[t] { F::one() } else { F::zero() };
                        gl[t * vocab + j] += g[t] * (p - indicator);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if needs(before, *a) {
                let gv = g[0];
                let ga = before[a.0].value.grad_mut();
                for o in ga.iter_mut() {
                    *o += gv;
                }
            }
        }
    }
}

fn accumulate<F: Scalar>(t: &mut Tensor<F>, g: &[F], f: impl Fn(F) -> F) {
    let buf = t.grad_mut();
    for (o, &gv) in buf.iter_mut().zip(g) {
        *o += f(gv);
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu<F: Scalar>(x: F) -> F {
    let half = lit::<F>(0.5);
    half * x * (F::one() + gelu_inner(x).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = lit::<F>(0.5);
    let c = lit::<F>(0.7978845608028654); // sqrt(2/pi)
    let a = lit::<F>(0.044715);
    let three = lit::<F>(3.0);
    let t = gelu_inner(x).tanh();
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn gelu_inner<F: Scalar>(x: F) -> F {
    let c = lit::<F>(0.7978845608028654);
    let a = lit::<F>(0.044715);
    c * (x + a * x * x * x)
}
