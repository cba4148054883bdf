//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns an arena of nodes recorded during the forward pass;
//! [`Tensor`] is a cheap handle into that arena. Calling
//! [`Tensor::backward`] on a scalar replays the recorded operations in
//! reverse and accumulates adjoints into every gradient-requiring node.
//!
//! The engine is deliberately single-threaded: one tape per training step,
//! one independent engine instance per concurrent run.

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use ops::Op;
pub(crate) use ops::{desc_perm, matmul_raw, softmax_rows, softplus_val};

/// Denominators and log arguments are clamped below at this value so the
/// KL-style losses stay finite and differentiable at the boundary.
pub const EPS_CLAMP: f64 = 1e-10;

pub(crate) struct Node {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recording arena. Cloning the handle shares the underlying tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Tensor {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Register a leaf tensor.
    pub fn leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Non-differentiable constant.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], vec![1], false)
    }
}

/// Handle to one tensor on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow()[self.id].data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.inner.borrow()[self.id].data.clone()
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.inner.borrow();
        let node = &nodes[self.id];
        assert_eq!(node.data.len(), 1, "item() on non-scalar {:?}", node.shape);
        node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, if a backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow()[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.tape.inner.borrow_mut()[self.id].grad = None;
    }

    fn rows_cols(&self) -> (usize, usize) {
        let shape = self.shape();
        match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("expected 1-D or 2-D tensor, got {shape:?}"),
        }
    }

    fn same_tape(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "tensors live on different tapes"
        );
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn try_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other);
        let (m, k) = self.rows_cols();
        let (bk, n) = other.rows_cols();
        if k != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = {
            let nodes = self.tape.inner.borrow();
            ops::matmul_raw(&nodes[self.id].data, &nodes[other.id].data, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            data,
            vec![m, n],
            rg,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.try_matmul(other).unwrap()
    }

    /// self[m×k] · otherᵀ where other is [n×k].
    pub fn matmul_tb(&self, other: &Tensor) -> Tensor {
        self.same_tape(other);
        let (m, k) = self.rows_cols();
        let (n, bk) = other.rows_cols();
        assert_eq!(
            k,
            bk,
            "matmul_tb: inner dims {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = {
            let nodes = self.tape.inner.borrow();
            ops::matmul_tb_raw(&nodes[self.id].data, &nodes[other.id].data, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok::<_, Error>(self.tape.push(
            data,
            vec![m, n],
            rg,
            Op::MatmulTb {
                a: self.id,
                b: other.id,
            },
        ))
        .unwrap()
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Tensor {
        self.same_tape(other);
        assert_eq!(
            self.shape(),
            other.shape(),
            "{name}: shapes {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = {
            let nodes = self.tape.inner.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(&nodes[other.id].data)
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(data, self.shape(), rg, op)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(
            other,
            "add",
            |a, b| a + b,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(
            other,
            "sub",
            |a, b| a - b,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(
            other,
            "mul",
            |a, b| a * b,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary_same_shape(
            other,
            "div",
            |a, b| a / b,
            Op::Div {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Broadcast-add a bias row vector over every row.
    pub fn add_row_vec(&self, v: &Tensor) -> Tensor {
        self.same_tape(v);
        let (rows, cols) = self.rows_cols();
        assert_eq!(v.numel(), cols, "add_row_vec: bias length mismatch");
        let data = {
            let nodes = self.tape.inner.borrow();
            let (a, b) = (&nodes[self.id].data, &nodes[v.id].data);
            let mut out = a.clone();
            for r in 0..rows {
                for j in 0..cols {
                    out[r * cols + j] += b[j];
                }
            }
            out
        };
        let rg = self.requires_grad() || v.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::AddRowVec {
                a: self.id,
                v: v.id,
            },
        )
    }

    /// Broadcast-multiply by a row vector over every row.
    pub fn mul_row_vec(&self, v: &Tensor) -> Tensor {
        self.same_tape(v);
        let (rows, cols) = self.rows_cols();
        assert_eq!(v.numel(), cols, "mul_row_vec: vector length mismatch");
        let data = {
            let nodes = self.tape.inner.borrow();
            let (a, b) = (&nodes[self.id].data, &nodes[v.id].data);
            let mut out = a.clone();
            for r in 0..rows {
                for j in 0..cols {
                    out[r * cols + j] *= b[j];
                }
            }
            out
        };
        let rg = self.requires_grad() || v.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::MulRowVec {
                a: self.id,
                v: v.id,
            },
        )
    }

    /// Scale each row `r` by `s[r]`.
    pub fn scale_rows(&self, s: &Tensor) -> Tensor {
        self.same_tape(s);
        let (rows, cols) = self.rows_cols();
        assert_eq!(s.numel(), rows, "scale_rows: scale length mismatch");
        let data = {
            let nodes = self.tape.inner.borrow();
            let (a, sv) = (&nodes[self.id].data, &nodes[s.id].data);
            let mut out = a.clone();
            for r in 0..rows {
                for j in 0..cols {
                    out[r * cols + j] *= sv[r];
                }
            }
            out
        };
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::ScaleRows {
                a: self.id,
                s: s.id,
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v * c).collect();
        self.tape
            .push(data, self.shape(), self.requires_grad(), Op::Scale { a: self.id, c })
    }

    /// Elementwise multiply by a scalar tensor (broadcast).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Tensor {
        self.same_tape(s);
        assert_eq!(s.numel(), 1, "mul_scalar_t: scalar expected");
        let sv = s.item();
        let data = self.data().iter().map(|&v| v * sv).collect();
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::MulScalarT {
                a: self.id,
                s: s.id,
            },
        )
    }

    /// Elementwise divide by a scalar tensor (broadcast).
    pub fn div_scalar_t(&self, s: &Tensor) -> Tensor {
        self.same_tape(s);
        assert_eq!(s.numel(), 1, "div_scalar_t: scalar expected");
        let sv = s.item();
        let data = self.data().iter().map(|&v| v / sv).collect();
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::DivScalarT {
                a: self.id,
                s: s.id,
            },
        )
    }

    /// Elementwise add a scalar tensor (broadcast).
    pub fn add_scalar_t(&self, s: &Tensor) -> Tensor {
        self.same_tape(s);
        assert_eq!(s.numel(), 1, "add_scalar_t: scalar expected");
        let sv = s.item();
        let data = self.data().iter().map(|&v| v + sv).collect();
        let rg = self.requires_grad() || s.requires_grad();
        self.tape.push(
            data,
            self.shape(),
            rg,
            Op::AddScalarT {
                a: self.id,
                s: s.id,
            },
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        self.tape.push(data, self.shape(), self.requires_grad(), op)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp { a: self.id })
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, Op::Ln { a: self.id })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu { a: self.id })
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(softplus_val, Op::Softplus { a: self.id })
    }

    pub fn clamp_min(&self, min: f64) -> Tensor {
        self.unary(|v| v.max(min), Op::ClampMin { a: self.id, min })
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        self.tape
            .push(vec![s], vec![1], self.requires_grad(), Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Tensor {
        let d = self.data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.tape
            .push(vec![s], vec![1], self.requires_grad(), Op::Mean { a: self.id })
    }

    /// Sum a 2-D tensor over one axis: 0 collapses rows, 1 collapses columns.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        assert!(axis < 2, "sum_axis: axis {axis}");
        let (rows, cols) = self.rows_cols();
        let d = self.data();
        let (data, shape) = if axis == 0 {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for j in 0..cols {
                    out[j] += d[r * cols + j];
                }
            }
            (out, vec![cols])
        } else {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                out[r] = d[r * cols..(r + 1) * cols].iter().sum();
            }
            (out, vec![rows])
        };
        self.tape
            .push(data, shape, self.requires_grad(), Op::SumAxis { a: self.id, axis })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        assert!(axis < 2, "mean_axis: axis {axis}");
        let (rows, cols) = self.rows_cols();
        let denom = if axis == 0 { rows } else { cols } as f64;
        let summed = self.sum_axis(axis);
        // Re-record as a dedicated op so the adjoint divides once.
        let data: Vec<f64> = summed.data().iter().map(|&v| v / denom).collect();
        let shape = summed.shape();
        self.tape.push(
            data,
            shape,
            self.requires_grad(),
            Op::MeanAxis { a: self.id, axis },
        )
    }

    // ── structured ops ───────────────────────────────────────────────

    /// Row-wise softmax with max-subtraction. A 1-D tensor is one row.
    pub fn try_softmax(&self) -> Result<Tensor> {
        let d = self.data();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
        let (rows, cols) = self.rows_cols();
        let data = softmax_rows(&d, rows, cols);
        Ok(self
            .tape
            .push(data, self.shape(), self.requires_grad(), Op::Softmax { a: self.id }))
    }

    pub fn softmax(&self) -> Tensor {
        self.try_softmax().unwrap()
    }

    /// Descending sort of a 1-D tensor. Ties keep the lower original index
    /// first. Returns the sorted tensor and the permutation mapping output
    /// position to source index; the adjoint scatters back through it.
    pub fn sort_descending(&self) -> (Tensor, Vec<usize>) {
        assert_eq!(self.shape().len(), 1, "sort_descending expects 1-D");
        let d = self.data();
        let perm = desc_perm(&d);
        let data: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
        let t = self.tape.push(
            data,
            self.shape(),
            self.requires_grad(),
            Op::SortDesc {
                a: self.id,
                perm: perm.clone(),
            },
        );
        (t, perm)
    }

    /// Descending sort applied independently to each row of a 2-D tensor.
    pub fn sort_rows_descending(&self) -> Tensor {
        let (rows, cols) = self.rows_cols();
        assert_eq!(self.shape().len(), 2, "sort_rows_descending expects 2-D");
        let d = self.data();
        let mut perms = Vec::with_capacity(rows * cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let p = desc_perm(row);
            data.extend(p.iter().map(|&i| row[i]));
            perms.extend(p);
        }
        self.tape.push(
            data,
            self.shape(),
            self.requires_grad(),
            Op::SortRowsDesc { a: self.id, perms },
        )
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let cols = parts[0].rows_cols().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            parts[0].same_tape(p);
            let (r, c) = p.rows_cols();
            assert_eq!(c, cols, "concat_rows: column mismatch");
            data.extend(p.data());
            rows += r;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            data,
            vec![rows, cols],
            rg,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        )
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let rows = parts[0].rows_cols().0;
        let cols: usize = parts.iter().map(|p| p.rows_cols().1).sum();
        let mut data = vec![0.0; rows * cols];
        let mut col0 = 0;
        for p in parts {
            parts[0].same_tape(p);
            let (r, c) = p.rows_cols();
            assert_eq!(r, rows, "concat_cols: row mismatch");
            let pd = p.data();
            for i in 0..r {
                data[i * cols + col0..i * cols + col0 + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            data,
            vec![rows, cols],
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.id).collect(),
            },
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let (rows, cols) = self.rows_cols();
        assert!(start < end && end <= rows, "slice_rows out of range");
        let d = self.data();
        let data = d[start * cols..end * cols].to_vec();
        self.tape.push(
            data,
            vec![end - start, cols],
            self.requires_grad(),
            Op::SliceRows { a: self.id, start },
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (rows, cols) = self.rows_cols();
        assert!(start < end && end <= cols, "slice_cols out of range");
        let d = self.data();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&d[r * cols + start..r * cols + end]);
        }
        self.tape.push(
            data,
            vec![rows, w],
            self.requires_grad(),
            Op::SliceCols {
                a: self.id,
                start,
                end,
            },
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape: numel mismatch"
        );
        self.tape
            .push(self.data(), shape, self.requires_grad(), Op::Reshape { a: self.id })
    }

    /// Gather rows by index (duplicates allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (rows, cols) = self.rows_cols();
        let d = self.data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            data.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        self.tape.push(
            data,
            vec![idx.len(), cols],
            self.requires_grad(),
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Scatter-add rows of self into a zero tensor with `out_rows` rows:
    /// `out[idx[i], :] += self[i, :]`.
    pub fn scatter_add_rows(&self, idx: &[usize], out_rows: usize) -> Tensor {
        let (rows, cols) = self.rows_cols();
        assert_eq!(idx.len(), rows, "scatter_add_rows: index length mismatch");
        let d = self.data();
        let mut data = vec![0.0; out_rows * cols];
        for (i, &dst) in idx.iter().enumerate() {
            assert!(dst < out_rows, "scatter_add_rows: index {dst} out of {out_rows}");
            for j in 0..cols {
                data[dst * cols + j] += d[i * cols + j];
            }
        }
        self.tape.push(
            data,
            vec![out_rows, cols],
            self.requires_grad(),
            Op::ScatterAddRows {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Gather scalar elements by flat index into a 1-D tensor.
    pub fn gather_elems(&self, idx: &[usize]) -> Tensor {
        let d = self.data();
        let data: Vec<f64> = idx
            .iter()
            .map(|&i| {
                assert!(i < d.len(), "gather_elems: index {i} out of {}", d.len());
                d[i]
            })
            .collect();
        self.tape.push(
            data,
            vec![idx.len()],
            self.requires_grad(),
            Op::GatherElems {
                a: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// For each row `t` of `rows`, stack `shared` on top of that row:
    /// output is [(T·(S+1)) × C] with block `t` = vstack(shared, rows[t]).
    pub fn stack_blocks(shared: &Tensor, rows: &Tensor) -> Tensor {
        shared.same_tape(rows);
        let (s_rows, cols) = shared.rows_cols();
        let (t, rcols) = rows.rows_cols();
        assert_eq!(cols, rcols, "stack_blocks: column mismatch");
        let sd = shared.data();
        let rd = rows.data();
        let block = (s_rows + 1) * cols;
        let mut data = vec![0.0; t * block];
        for b in 0..t {
            data[b * block..b * block + s_rows * cols].copy_from_slice(&sd);
            data[b * block + s_rows * cols..(b + 1) * block]
                .copy_from_slice(&rd[b * cols..(b + 1) * cols]);
        }
        let rg = shared.requires_grad() || rows.requires_grad();
        shared.tape.push(
            data,
            vec![t * (s_rows + 1), cols],
            rg,
            Op::StackBlocks {
                shared: shared.id,
                rows: rows.id,
            },
        )
    }

    /// Left-multiply every consecutive `dim`-row block by the constant
    /// matrix `adj` [dim×dim].
    pub fn block_apply(&self, adj: &Rc<Vec<f64>>, dim: usize) -> Tensor {
        let (rows, cols) = self.rows_cols();
        assert_eq!(rows % dim, 0, "block_apply: rows not divisible by block dim");
        assert_eq!(adj.len(), dim * dim, "block_apply: adjacency size mismatch");
        let d = self.data();
        let blocks = rows / dim;
        let mut data = vec![0.0; rows * cols];
        for b in 0..blocks {
            let base = b * dim * cols;
            for i in 0..dim {
                let orow = &mut data[base + i * cols..base + (i + 1) * cols];
                for j in 0..dim {
                    let w = adj[i * dim + j];
                    if w == 0.0 {
                        continue;
                    }
                    let hrow = &d[base + j * cols..base + (j + 1) * cols];
                    for c in 0..cols {
                        orow[c] += w * hrow[c];
                    }
                }
            }
        }
        self.tape.push(
            data,
            self.shape(),
            self.requires_grad(),
            Op::BlockApply {
                adj: Rc::clone(adj),
                dim,
                h: self.id,
            },
        )
    }

    /// Per row: select the K largest entries (ties to the lower index) and
    /// renormalize them to sum to 1. Returns the [rows×k] gate tensor and
    /// the selected indices in descending-weight order, row-major.
    pub fn topk_renorm(&self, k: usize) -> (Tensor, Vec<usize>) {
        let (rows, cols) = self.rows_cols();
        assert!(k >= 1 && k <= cols, "topk_renorm: k={k} out of 1..={cols}");
        let d = self.data();
        let mut idx = Vec::with_capacity(rows * k);
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let perm = desc_perm(row);
            let sel = &perm[..k];
            let s: f64 = sel.iter().map(|&j| row[j]).sum();
            for &j in sel {
                idx.push(j);
                data.push(row[j] / s);
            }
        }
        let t = self.tape.push(
            data,
            vec![rows, k],
            self.requires_grad(),
            Op::TopKRenorm {
                a: self.id,
                idx: idx.clone(),
                k,
            },
        );
        (t, idx)
    }

    /// Row-wise standardization (x − mean) / sqrt(var + eps), no affine.
    pub fn layer_norm_rows(&self, eps: f64) -> Tensor {
        let (rows, cols) = self.rows_cols();
        let d = self.data();
        let mut data = vec![0.0; d.len()];
        for r in 0..rows {
            let x = &d[r * cols..(r + 1) * cols];
            let mu = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = (x[j] - mu) * rstd;
            }
        }
        self.tape.push(
            data,
            self.shape(),
            self.requires_grad(),
            Op::LayerNormRows { a: self.id, eps },
        )
    }

    /// Mean cross entropy of row-wise softmax against integer targets.
    /// Rows with target < 0 are ignored.
    pub fn cross_entropy(&self, targets: &[i64]) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols();
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols as i64) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {t} out of vocabulary {cols}"
            )));
        }
        let count = targets.iter().filter(|&&t| t >= 0).count();
        if count == 0 {
            return Err(Error::Contract(
                "cross_entropy: no active target positions".into(),
            ));
        }
        let d = self.data();
        let mut loss = 0.0;
        for r in 0..rows {
            if targets[r] < 0 {
                continue;
            }
            let p = softmax_rows(&d[r * cols..(r + 1) * cols], 1, cols);
            loss -= p[targets[r] as usize].max(EPS_CLAMP).ln();
        }
        loss /= count as f64;
        Ok(self.tape.push(
            vec![loss],
            vec![1],
            self.requires_grad(),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// gradient-requiring tensor reachable from this one; repeated calls
    /// without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let flush: Vec<(usize, Vec<f64>)> = {
            let nodes = self.tape.inner.borrow();
            let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
            adj[self.id] = Some(vec![1.0]);
            let mut flush = Vec::new();
            for id in (0..=self.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                node.op.backward(node, &g, &nodes, &mut adj);
                if node.requires_grad {
                    flush.push((id, g));
                }
            }
            flush
        };
        let mut nodes = self.tape.inner.borrow_mut();
        for (id, g) in flush {
            match &mut nodes[id].grad {
                Some(buf) => {
                    for (o, gv) in buf.iter_mut().zip(&g) {
                        *o += gv;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// KL divergence Σᵢ pᵢ·ln(pᵢ/qᵢ) between 1-D distributions on one tape.
///
/// `p` must be a probability vector; `q` is clamped below at [`EPS_CLAMP`].
/// Zero entries of `p` contribute exactly zero.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: p.shape(),
            rhs: q.shape(),
        });
    }
    let pd = p.data();
    let sum: f64 = pd.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "kl_divergence: p sums to {sum}, expected 1"
        )));
    }
    if pd.iter().any(|&v| v < -1e-12) {
        return Err(Error::Contract("kl_divergence: p has negative entries".into()));
    }
    let log_ratio = p
        .clamp_min(EPS_CLAMP)
        .ln()
        .sub(&q.clamp_min(EPS_CLAMP).ln());
    Ok(p.mul(&log_ratio).sum())
}

#[cfg(test)]
mod tests;
