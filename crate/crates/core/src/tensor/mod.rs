//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node
//! holding its output values and enough context to run its backward rule.
//! [`Graph::backward`] traverses the tape in exact reverse execution order
//! and accumulates gradients into every node that requires them. Tapes are
//! rebuilt each forward pass and confined to one thread; distinct graphs may
//! run on distinct threads.
//!
//! The element type is generic: `f32` for training, `f64` as the wide mode
//! used by gradient checks (see [`check`]).

pub mod check;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the element type.
#[inline]
pub fn real<E: Real>(x: f64) -> E {
    E::from_f64(x).expect("constant representable")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty axis in shape {shape:?}")]
    EmptyAxis { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this graph; build a fresh graph")]
    DoubleBackward,
    #[error("loss is not connected to any gradient-requiring tensor")]
    Detached,
    #[error("tensor id {id} does not belong to this graph")]
    MissingNode { id: usize },
}

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// Recorded operation, with whatever context its backward rule needs.
enum Op<E: Real> {
    Leaf,
    /// `a @ b`; `batch` leading matrices, rhs broadcast when `b_batched` is false.
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    /// `a @ b^T` for 2-D operands; the layout used by linear layers.
    MatMulNT {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// `[rows, d] + [d]`
    AddBias {
        x: usize,
        bias: usize,
        d: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    MulScalar {
        x: usize,
        c: E,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    /// Max over the point axis of `[batch, n, d]`; winners recorded per (batch, d).
    MaxReduce {
        x: usize,
        batch: usize,
        n: usize,
        d: usize,
        argmax: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Transpose2D {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    /// Per-row softmax cross-entropy of `[rows, c]` against one class label.
    CeRows {
        logits: usize,
        label: usize,
        c: usize,
        softmax: Vec<E>,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
        n: usize,
    },
}

struct Node<E: Real> {
    data: Vec<E>,
    shape: Vec<usize>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Define-by-run computation tape.
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Op<E>) -> TensorRef {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    /// Insert a leaf that does not receive gradients.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<TensorRef, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    /// Insert a leaf that accumulates gradients (a parameter binding).
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<TensorRef, TensorError> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, true, Op::Leaf))
    }

    fn node(&self, t: TensorRef) -> Result<&Node<E>, TensorError> {
        self.nodes.get(t.0).ok_or(TensorError::MissingNode { id: t.0 })
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorRef) -> &[E] {
        &self.nodes[t.0].data
    }

    /// Gradient of a tensor, populated by [`Graph::backward`].
    pub fn grad(&self, t: TensorRef) -> Option<&[E]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn requires(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// Matrix product. Supports `[m,k] @ [k,n]`, `[b,m,k] @ [b,k,n]` and the
    /// broadcast form `[b,m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, b_batched) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], sb[1], true)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2], true)
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[1], false)
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![E::zero(); batch * m * n];
        {
            let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            for bi in 0..batch {
                let a_sl = &da[bi * m * k..(bi + 1) * m * k];
                let b_sl = if b_batched && sb.len() == 3 {
                    &db[bi * k * n..(bi + 1) * k * n]
                } else {
                    &db[..]
                };
                mm_nn(a_sl, b_sl, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
            }
        }
        let out_shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_batched: sb.len() == 3,
            },
        ))
    }

    /// `a @ b^T` with `a: [m,k]`, `b: [n,k]`. Matches the `[out, in]` weight
    /// layout of linear layers without materializing a transpose.
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![E::zero(); m * n];
        mm_nt(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            vec![m, n],
            rg,
            Op::MatMulNT {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, sa, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast a bias vector over the rows of a matrix: `[rows, d] + [d]`.
    pub fn add_bias(&mut self, x: TensorRef, bias: TensorRef) -> Result<TensorRef, TensorError> {
        let (sx, sb) = (self.node(x)?.shape.clone(), self.node(bias)?.shape.clone());
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let bdata = self.nodes[bias.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&bdata).map(|(&v, &b)| v + b))
            .collect();
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(
            data,
            sx,
            rg,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                d,
            },
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, sa, rg, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn mul_scalar(&mut self, x: TensorRef, c: E) -> TensorRef {
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let (shape, rg) = (self.nodes[x.0].shape.clone(), self.requires(x));
        self.push(data, shape, rg, Op::MulScalar { x: x.0, c })
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > E::zero() { v } else { E::zero() })
            .collect();
        let (shape, rg) = (self.nodes[x.0].shape.clone(), self.requires(x));
        self.push(data, shape, rg, Op::Relu { x: x.0 })
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
    pub fn gelu(&mut self, x: TensorRef) -> TensorRef {
        let data = self.nodes[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let (shape, rg) = (self.nodes[x.0].shape.clone(), self.requires(x));
        self.push(data, shape, rg, Op::Gelu { x: x.0 })
    }

    /// Max over the point axis: `[n, d]` or `[batch, n, d]` → `[d]` / `[batch, d]`.
    ///
    /// Ties break toward the lowest point index; gradients flow only to the
    /// winning entries. Also returns the winner indices per (batch, feature).
    pub fn max_reduce(&mut self, x: TensorRef) -> Result<(TensorRef, Vec<usize>), TensorError> {
        let sx = self.node(x)?.shape.clone();
        let (batch, n, d) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "max_reduce",
                    lhs: sx,
                    rhs: vec![],
                })
            }
        };
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "max_reduce",
                shape: sx,
            });
        }
        let mut values = vec![E::zero(); batch * d];
        let mut argmax = vec![0usize; batch * d];
        {
            let data = &self.nodes[x.0].data;
            for bi in 0..batch {
                let base = bi * n * d;
                for j in 0..d {
                    let mut best = data[base + j];
                    let mut best_i = 0usize;
                    for i in 1..n {
                        let v = data[base + i * d + j];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    values[bi * d + j] = best;
                    argmax[bi * d + j] = best_i;
                }
            }
        }
        let out_shape = if sx.len() == 2 {
            vec![d]
        } else {
            vec![batch, d]
        };
        let rg = self.requires(x);
        let t = self.push(
            values,
            out_shape,
            rg,
            Op::MaxReduce {
                x: x.0,
                batch,
                n,
                d,
                argmax: argmax.clone(),
            },
        );
        Ok((t, argmax))
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(
        &mut self,
        a: TensorRef,
        b: TensorRef,
        axis: usize,
    ) -> Result<TensorRef, TensorError> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        let mismatch = || TensorError::ShapeMismatch {
            op: "concat",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(mismatch());
        }
        for i in 0..sa.len() {
            if i != axis && sa[i] != sb[i] {
                return Err(mismatch());
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * (a_inner + b_inner));
        {
            let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            for o in 0..outer {
                data.extend_from_slice(&da[o * a_inner..(o + 1) * a_inner]);
                data.extend_from_slice(&db[o * b_inner..(o + 1) * b_inner]);
            }
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::Concat {
                a: a.0,
                b: b.0,
                outer,
                a_inner,
                b_inner,
            },
        ))
    }

    /// Transpose a 2-D tensor.
    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef, TensorError> {
        let sx = self.node(x)?.shape.clone();
        if sx.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![E::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.requires(x);
        Ok(self.push(
            data,
            vec![cols, rows],
            rg,
            Op::Transpose2D {
                x: x.0,
                rows,
                cols,
            },
        ))
    }

    /// Reinterpret the shape; element count must be preserved.
    pub fn reshape(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef, TensorError> {
        let sx = self.node(x)?.shape.clone();
        if sx.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: sx,
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        Ok(self.push(data, shape, rg, Op::Reshape { x: x.0 }))
    }

    /// Layer normalization over the last axis, then affine scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: E,
    ) -> Result<TensorRef, TensorError> {
        let sx = self.node(x)?.shape.clone();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                shape: sx,
            });
        }
        let (sg, sb) = (self.node(gamma)?.shape.clone(), self.node(beta)?.shape.clone());
        if sg != [d] || sb != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sg,
                rhs: vec![d],
            });
        }
        let rows = sx.iter().product::<usize>() / d;
        let mut data = vec![E::zero(); rows * d];
        let mut means = vec![E::zero(); rows];
        let mut inv_stds = vec![E::zero(); rows];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gamma.0].data;
            let b = &self.nodes[beta.0].data;
            let nd = real::<E>(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<E>() / nd;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<E>()
                    / nd;
                let inv_std = E::one() / (var + eps).sqrt();
                means[r] = mean;
                inv_stds[r] = inv_std;
                for j in 0..d {
                    data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            data,
            sx,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                d,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// Numerically stable softmax cross-entropy against one class label.
    ///
    /// Accepts `[c]` (one scalar loss) or `[rows, c]` (mean over rows, the
    /// per-time-step average used in training). Uses the log-sum-exp form.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorRef,
        label: usize,
    ) -> Result<TensorRef, TensorError> {
        let sl = self.node(logits)?.shape.clone();
        let (rows, c) = match sl.len() {
            1 => (1, sl[0]),
            2 => (sl[0], sl[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: sl,
                    rhs: vec![],
                })
            }
        };
        if c < 2 {
            return Err(TensorError::EmptyAxis {
                op: "softmax_cross_entropy",
                shape: sl,
            });
        }
        if label >= c {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let mut losses = vec![E::zero(); rows];
        let mut softmax = vec![E::zero(); rows * c];
        {
            let ld = &self.nodes[logits.0].data;
            for r in 0..rows {
                let row = &ld[r * c..(r + 1) * c];
                let m = row.iter().copied().fold(E::neg_infinity(), E::max);
                let mut s = E::zero();
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    softmax[r * c + j] = e;
                    s = s + e;
                }
                for j in 0..c {
                    softmax[r * c + j] = softmax[r * c + j] / s;
                }
                losses[r] = s.ln() + m - row[label];
            }
        }
        let rg = self.requires(logits);
        let per_row = self.push(
            losses,
            vec![rows],
            rg,
            Op::CeRows {
                logits: logits.0,
                label,
                c,
                softmax,
            },
        );
        Ok(self.mean_all(per_row))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let s = self.nodes[x.0].data.iter().copied().sum::<E>();
        let rg = self.requires(x);
        self.push(vec![s], vec![], rg, Op::SumAll { x: x.0 })
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&mut self, x: TensorRef) -> TensorRef {
        let n = self.nodes[x.0].data.len();
        let s = self.nodes[x.0].data.iter().copied().sum::<E>() / real::<E>(n as f64);
        let rg = self.requires(x);
        self.push(vec![s], vec![], rg, Op::MeanAll { x: x.0, n })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode gradient accumulation from a scalar loss.
    ///
    /// Populates `grad` on every `requires_grad` node on the path from the
    /// leaves to `loss`. Running twice on one graph is an error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<(), TensorError> {
        let n = self.node(loss)?;
        if n.data.len() != 1 || !n.shape.is_empty() {
            return Err(TensorError::NonScalarLoss {
                shape: n.shape.clone(),
            });
        }
        if self.backward_done {
            return Err(TensorError::DoubleBackward);
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;

        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![E::zero(); node.data.len()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = E::one();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let upstream = self.nodes[id].grad.take().unwrap();
            self.propagate(id, &upstream);
            self.nodes[id].grad = Some(upstream);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, up: &[E]) {
        // The op is taken out of the node while its backward rule runs so
        // input data and grads can be borrowed from `self.nodes`.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (a, b, batch, m, k, n, b_batched) = (*a, *b, *batch, *m, *k, *n, *b_batched);
                if self.nodes[a].requires_grad {
                    let b_data = self.nodes[b].data.clone();
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    for bi in 0..batch {
                        let b_sl = if b_batched {
                            &b_data[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &b_data[..]
                        };
                        mm_nt(
                            &up[bi * m * n..(bi + 1) * m * n],
                            b_sl,
                            m,
                            n,
                            k,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.nodes[b].requires_grad {
                    let a_data = self.nodes[a].data.clone();
                    let gb = self.nodes[b].grad.as_mut().unwrap();
                    for bi in 0..batch {
                        let g_sl = if b_batched {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut gb[..]
                        };
                        mm_tn(
                            &a_data[bi * m * k..(bi + 1) * m * k],
                            &up[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            g_sl,
                        );
                    }
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].requires_grad {
                    let b_data = self.nodes[b].data.clone();
                    let ga = self.nodes[a].grad.as_mut().unwrap();
                    mm_nn(up, &b_data, m, n, k, ga);
                }
                if self.nodes[b].requires_grad {
                    let a_data = self.nodes[a].data.clone();
                    let gb = self.nodes[b].grad.as_mut().unwrap();
                    mm_tn(up, &a_data, m, n, k, gb);
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if let Some(g) = self.nodes[t].grad.as_mut() {
                        for (gi, &u) in g.iter_mut().zip(up) {
                            *gi = *gi + u;
                        }
                    }
                }
            }
            Op::AddBias { x, bias, d } => {
                let (x, bias, d) = (*x, *bias, *d);
                if let Some(g) = self.nodes[x].grad.as_mut() {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi = *gi + u;
                    }
                }
                if let Some(g) = self.nodes[bias].grad.as_mut() {
                    for row in up.chunks_exact(d) {
                        for (gi, &u) in g.iter_mut().zip(row) {
                            *gi = *gi + u;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].data.clone();
                    let g = self.nodes[a].grad.as_mut().unwrap();
                    for i in 0..up.len() {
                        g[i] = g[i] + up[i] * bd[i];
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].data.clone();
                    let g = self.nodes[b].grad.as_mut().unwrap();
                    for i in 0..up.len() {
                        g[i] = g[i] + up[i] * ad[i];
                    }
                }
            }
            Op::MulScalar { x, c } => {
                let (x, c) = (*x, *c);
                if let Some(g) = self.nodes[x].grad.as_mut() {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi = *gi + u * c;
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let xd = self.nodes[x].data.clone();
                    let g = self.nodes[x].grad.as_mut().unwrap();
                    for i in 0..up.len() {
                        if xd[i] > E::zero() {
                            g[i] = g[i] + up[i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let xd = self.nodes[x].data.clone();
                    let g = self.nodes[x].grad.as_mut().unwrap();
                    for i in 0..up.len() {
                        g[i] = g[i] + up[i] * gelu_deriv(xd[i]);
                    }
                }
            }
            Op::MaxReduce {
                x,
                batch,
                n,
                d,
                argmax,
            } => {
                let (x, batch, n, d) = (*x, *batch, *n, *d);
                if let Some(g) = self.nodes[x].grad.as_mut() {
                    for bi in 0..batch {
                        for j in 0..d {
                            let win = argmax[bi * d + j];
                            let idx = bi * n * d + win * d + j;
                            g[idx] = g[idx] + up[bi * d + j];
                        }
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let (a, b, outer, a_inner, b_inner) = (*a, *b, *outer, *a_inner, *b_inner);
                let stride = a_inner + b_inner;
                if let Some(g) = self.nodes[a].grad.as_mut() {
                    for o in 0..outer {
                        let src = &up[o * stride..o * stride + a_inner];
                        let dst = &mut g[o * a_inner..(o + 1) * a_inner];
                        for (gi, &u) in dst.iter_mut().zip(src) {
                            *gi = *gi + u;
                        }
                    }
                }
                if let Some(g) = self.nodes[b].grad.as_mut() {
                    for o in 0..outer {
                        let src = &up[o * stride + a_inner..(o + 1) * stride];
                        let dst = &mut g[o * b_inner..(o + 1) * b_inner];
                        for (gi, &u) in dst.iter_mut().zip(src) {
                            *gi = *gi + u;
                        }
                    }
                }
            }
            Op::Transpose2D { x, rows, cols } => {
                let (x, rows, cols) = (*x, *rows, *cols);
                if let Some(g) = self.nodes[x].grad.as_mut() {
                    // upstream has shape [cols, rows]
                    for c in 0..cols {
                        for r in 0..rows {
                            g[r * cols + c] = g[r * cols + c] + up[c * rows + r];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(g) = self.nodes[*x].grad.as_mut() {
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi = *gi + u;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let rows = up.len() / d;
                let xd = self.nodes[x].data.clone();
                let gd = self.nodes[gamma].data.clone();
                let nd = real::<E>(d as f64);
                if self.nodes[x].requires_grad {
                    let g = self.nodes[x].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        let mut sum_g = E::zero();
                        let mut sum_gx = E::zero();
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mu) * is;
                            let gj = up[r * d + j] * gd[j];
                            sum_g = sum_g + gj;
                            sum_gx = sum_gx + gj * xh;
                        }
                        let mg = sum_g / nd;
                        let mgx = sum_gx / nd;
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mu) * is;
                            let gj = up[r * d + j] * gd[j];
                            g[r * d + j] = g[r * d + j] + is * (gj - mg - xh * mgx);
                        }
                    }
                }
                if self.nodes[gamma].requires_grad {
                    let g = self.nodes[gamma].grad.as_mut().unwrap();
                    for r in 0..rows {
                        let (mu, is) = (mean[r], inv_std[r]);
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mu) * is;
                            g[j] = g[j] + up[r * d + j] * xh;
                        }
                    }
                }
                if self.nodes[beta].requires_grad {
                    let g = self.nodes[beta].grad.as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] = g[j] + up[r * d + j];
                        }
                    }
                }
            }
            Op::CeRows {
                logits,
                label,
                c,
                softmax,
            } => {
                let (logits, label, c) = (*logits, *label, *c);
                if let Some(g) = self.nodes[logits].grad.as_mut() {
                    let rows = up.len();
                    for r in 0..rows {
                        for j in 0..c {
                            let ind = if j == label { E::one() } else { E::zero() };
                            g[r * c + j] = g[r * c + j] + up[r] * (softmax[r * c + j] - ind);
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(g) = self.nodes[*x].grad.as_mut() {
                    for gi in g.iter_mut() {
                        *gi = *gi + up[0];
                    }
                }
            }
            Op::MeanAll { x, n } => {
                let scale = up[0] / real::<E>(*n as f64);
                if let Some(g) = self.nodes[*x].grad.as_mut() {
                    for gi in g.iter_mut() {
                        *gi = *gi + scale;
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }
}

#[inline]
fn gelu_val<E: Real>(x: E) -> E {
    let k = real::<E>(0.7978845608028654);
    let a = real::<E>(0.044715);
    let half = real::<E>(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

#[inline]
fn gelu_deriv<E: Real>(x: E) -> E {
    let k = real::<E>(0.7978845608028654);
    let a = real::<E>(0.044715);
    let half = real::<E>(0.5);
    let three = real::<E>(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * k * (E::one() + three * a * x * x)
}

// ── Matrix kernels ─────────────────────────────────────────────────────
//
// All kernels accumulate into `out` and keep a fixed summation order
// (ascending k), so results are bit-stable regardless of caller threading.

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn mm_nn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`.
pub(crate) fn mm_nt<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            *o = *o + dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub(crate) fn mm_tn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed combine order).
#[inline]
fn dot<E: Real>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests;
