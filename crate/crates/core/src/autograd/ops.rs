//! Primitive operations recorded on the tape, with their adjoint rules.

use std::rc::Rc;

use super::Node;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    /// [m×k]·[k×n]
    Matmul { a: usize, b: usize },
    /// [m×k]·[n×k]ᵀ → [m×n]
    MatmulTb { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// [m×n] + v[n], broadcast over rows
    AddRowVec { a: usize, v: usize },
    /// [m×n] ⊙ v[n], broadcast over rows
    MulRowVec { a: usize, v: usize },
    /// [m×n] ⊙ s[m], broadcast over columns
    ScaleRows { a: usize, s: usize },
    Scale { a: usize, c: f64 },
    /// a ⊙ s where s is a scalar tensor
    MulScalarT { a: usize, s: usize },
    /// a / s where s is a scalar tensor
    DivScalarT { a: usize, s: usize },
    /// a + s where s is a scalar tensor
    AddScalarT { a: usize, s: usize },
    Exp { a: usize },
    Ln { a: usize },
    Relu { a: usize },
    Softplus { a: usize },
    ClampMin { a: usize, min: f64 },
    Sum { a: usize },
    Mean { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    /// Row-wise softmax (a 1-D tensor is a single row).
    Softmax { a: usize },
    /// 1-D descending sort; `perm[j]` is the source index of output j.
    SortDesc { a: usize, perm: Vec<usize> },
    /// Row-wise descending sort; perms flattened row-major.
    SortRowsDesc { a: usize, perms: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize, end: usize },
    Reshape { a: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    /// out[idx[i], :] += a[i, :]; output row count fixed by the node shape
    ScatterAddRows { a: usize, idx: Vec<usize> },
    GatherElems { a: usize, idx: Vec<usize> },
    /// Per block t: vstack(shared[S×C], rows[t]) → [(T·(S+1))×C]
    StackBlocks { shared: usize, rows: usize },
    /// Per block t of R rows: adj[R×R] · block — adj is a constant
    BlockApply { adj: Rc<Vec<f64>>, dim: usize, h: usize },
    /// Per row: keep the K largest entries (ties by lower index) and
    /// renormalize them to sum to 1. `idx` is row-major [rows×k].
    TopKRenorm { a: usize, idx: Vec<usize>, k: usize },
    /// Row-wise (x − mean) / sqrt(var + eps), no affine parameters.
    LayerNormRows { a: usize, eps: f64 },
    /// Mean negative log-likelihood over rows with target >= 0.
    CrossEntropy { logits: usize, targets: Vec<i64> },
}

// ── forward kernels ──────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// A[m×k] · B[n×k]ᵀ → [m×n]
pub(crate) fn matmul_tb_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Aᵀ[k×m] · B... computes aᵀ·b for a[m×k], b[m×n] → [k×n]; used by adjoints.
pub(crate) fn matmul_ta_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for j in 0..cols {
            let e = (row[j] - m).exp();
            orow[j] = e;
            s += e;
        }
        for v in orow.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Indices of `row` sorted by value descending, ties broken by lower index.
pub(crate) fn desc_perm(row: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..row.len()).collect();
    perm.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap().then(i.cmp(&j)));
    perm
}

pub(crate) fn softplus_val(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── backward dispatch ────────────────────────────────────────────────

/// Accumulate `f`'s contribution into the adjoint of node `id`, skipping
/// subtrees that cannot reach a gradient-requiring leaf.
fn acc<F: FnOnce(&mut [f64])>(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: F,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = adj[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]);
    f(buf);
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected 1-D or 2-D tensor, got shape {shape:?}"),
    }
}

impl Op {
    /// Propagate the adjoint `g` of `out` into the adjoints of the inputs.
    pub(crate) fn backward(
        &self,
        out: &Node,
        g: &[f64],
        nodes: &[Node],
        adj: &mut [Option<Vec<f64>>],
    ) {
        match self {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = dims2(&nodes[*a].shape);
                let n = dims2(&nodes[*b].shape).1;
                let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
                // dA = g · Bᵀ, dB = Aᵀ · g
                let da = matmul_tb_raw(g, bd, m, n, k);
                let db = matmul_ta_raw(ad, g, m, k, n);
                acc(adj, nodes, *a, |buf| add_into(buf, &da));
                acc(adj, nodes, *b, |buf| add_into(buf, &db));
            }

            Op::MatmulTb { a, b } => {
                let (m, k) = dims2(&nodes[*a].shape);
                let n = nodes[*b].shape[0];
                let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
                // out = A·Bᵀ: dA = g·B, dB = gᵀ·A
                let da = matmul_raw(g, bd, m, n, k);
                let db = matmul_ta_raw(g, ad, m, n, k);
                acc(adj, nodes, *a, |buf| add_into(buf, &da));
                acc(adj, nodes, *b, |buf| add_into(buf, &db));
            }

            Op::Add { a, b } => {
                acc(adj, nodes, *a, |buf| add_into(buf, g));
                acc(adj, nodes, *b, |buf| add_into(buf, g));
            }

            Op::Sub { a, b } => {
                acc(adj, nodes, *a, |buf| add_into(buf, g));
                acc(adj, nodes, *b, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }

            Op::Mul { a, b } => {
                let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bd[i];
                    }
                });
                acc(adj, nodes, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ad[i];
                    }
                });
            }

            Op::Div { a, b } => {
                let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / bd[i];
                    }
                });
                acc(adj, nodes, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }

            Op::AddRowVec { a, v } => {
                let (rows, cols) = dims2(&out.shape);
                acc(adj, nodes, *a, |buf| add_into(buf, g));
                acc(adj, nodes, *v, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j];
                        }
                    }
                });
            }

            Op::MulRowVec { a, v } => {
                let (rows, cols) = dims2(&out.shape);
                let (ad, vd) = (&nodes[*a].data, &nodes[*v].data);
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * cols + j] += g[r * cols + j] * vd[j];
                        }
                    }
                });
                acc(adj, nodes, *v, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * ad[r * cols + j];
                        }
                    }
                });
            }

            Op::ScaleRows { a, s } => {
                let (rows, cols) = dims2(&out.shape);
                let (ad, sd) = (&nodes[*a].data, &nodes[*s].data);
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * cols + j] += g[r * cols + j] * sd[r];
                        }
                    }
                });
                acc(adj, nodes, *s, |buf| {
                    for r in 0..rows {
                        let mut t = 0.0;
                        for j in 0..cols {
                            t += g[r * cols + j] * ad[r * cols + j];
                        }
                        buf[r] += t;
                    }
                });
            }

            Op::Scale { a, c } => {
                acc(adj, nodes, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }

            Op::MulScalarT { a, s } => {
                let sv = nodes[*s].data[0];
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                });
                acc(adj, nodes, *s, |buf| {
                    buf[0] += g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).sum::<f64>();
                });
            }

            Op::DivScalarT { a, s } => {
                let sv = nodes[*s].data[0];
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv / sv;
                    }
                });
                acc(adj, nodes, *s, |buf| {
                    let t: f64 = g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).sum();
                    buf[0] -= t / (sv * sv);
                });
            }

            Op::AddScalarT { a, s } => {
                acc(adj, nodes, *a, |buf| add_into(buf, g));
                acc(adj, nodes, *s, |buf| {
                    buf[0] += g.iter().sum::<f64>();
                });
            }

            Op::Exp { a } => {
                let od = &out.data;
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * od[i];
                    }
                });
            }

            Op::Ln { a } => {
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / ad[i];
                    }
                });
            }

            Op::Relu { a } => {
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        if ad[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                });
            }

            Op::Softplus { a } => {
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * sigmoid(ad[i]);
                    }
                });
            }

            Op::ClampMin { a, min } => {
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for i in 0..buf.len() {
                        if ad[i] > *min {
                            buf[i] += g[i];
                        }
                    }
                });
            }

            Op::Sum { a } => {
                acc(adj, nodes, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }

            Op::Mean { a } => {
                let n = nodes[*a].data.len() as f64;
                acc(adj, nodes, *a, |buf| {
                    let gv = g[0] / n;
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }

            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (rows, cols) = dims2(&nodes[*a].shape);
                let denom = match self {
                    Op::MeanAxis { .. } => {
                        if *axis == 0 {
                            rows as f64
                        } else {
                            cols as f64
                        }
                    }
                    _ => 1.0,
                };
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            let gv = if *axis == 0 { g[j] } else { g[r] };
                            buf[r * cols + j] += gv / denom;
                        }
                    }
                });
            }

            Op::Softmax { a } => {
                let (rows, cols) = dims2(&out.shape);
                let y = &out.data;
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..cols {
                            buf[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }

            Op::SortDesc { a, perm } => {
                acc(adj, nodes, *a, |buf| {
                    for (j, &src) in perm.iter().enumerate() {
                        buf[src] += g[j];
                    }
                });
            }

            Op::SortRowsDesc { a, perms } => {
                let (rows, cols) = dims2(&out.shape);
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            let src = perms[r * cols + j];
                            buf[r * cols + src] += g[r * cols + j];
                        }
                    }
                });
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].data.len();
                    let slice = &g[offset..offset + len];
                    acc(adj, nodes, p, |buf| add_into(buf, slice));
                    offset += len;
                }
            }

            Op::ConcatCols { parts } => {
                let (rows, cols) = dims2(&out.shape);
                let mut col0 = 0;
                for &p in parts {
                    let pc = dims2(&nodes[p].shape).1;
                    acc(adj, nodes, p, |buf| {
                        for r in 0..rows {
                            for j in 0..pc {
                                buf[r * pc + j] += g[r * cols + col0 + j];
                            }
                        }
                    });
                    col0 += pc;
                }
            }

            Op::SliceRows { a, start } => {
                let cols = dims2(&out.shape).1;
                let rows = dims2(&out.shape).0;
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[(start + r) * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }

            Op::SliceCols { a, start, end } => {
                let (rows, acols) = dims2(&nodes[*a].shape);
                let w = end - start;
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..w {
                            buf[r * acols + start + j] += g[r * w + j];
                        }
                    }
                });
            }

            Op::Reshape { a } => {
                acc(adj, nodes, *a, |buf| add_into(buf, g));
            }

            Op::GatherRows { a, idx } => {
                let cols = dims2(&nodes[*a].shape).1;
                acc(adj, nodes, *a, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[src * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }

            Op::ScatterAddRows { a, idx } => {
                let cols = dims2(&out.shape).1;
                acc(adj, nodes, *a, |buf| {
                    for (r, &dst) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[r * cols + j] += g[dst * cols + j];
                        }
                    }
                });
            }

            Op::GatherElems { a, idx } => {
                acc(adj, nodes, *a, |buf| {
                    for (i, &src) in idx.iter().enumerate() {
                        buf[src] += g[i];
                    }
                });
            }

            Op::StackBlocks { shared, rows } => {
                let s_rows = nodes[*shared].shape[0];
                let cols = dims2(&nodes[*shared].shape).1;
                let t = nodes[*rows].shape[0];
                let block = (s_rows + 1) * cols;
                acc(adj, nodes, *shared, |buf| {
                    for b in 0..t {
                        let base = b * block;
                        for i in 0..s_rows * cols {
                            buf[i] += g[base + i];
                        }
                    }
                });
                acc(adj, nodes, *rows, |buf| {
                    for b in 0..t {
                        let base = b * block + s_rows * cols;
                        for j in 0..cols {
                            buf[b * cols + j] += g[base + j];
                        }
                    }
                });
            }

            Op::BlockApply { adj: a_mat, dim, h } => {
                let r = *dim;
                let cols = dims2(&out.shape).1;
                let blocks = out.shape[0] / r;
                acc(adj, nodes, *h, |buf| {
                    // dH_block = adjᵀ · g_block
                    for b in 0..blocks {
                        let base = b * r * cols;
                        for i in 0..r {
                            let grow = &g[base + i * cols..base + (i + 1) * cols];
                            for j in 0..r {
                                let w = a_mat[i * r + j];
                                if w == 0.0 {
                                    continue;
                                }
                                let brow = &mut buf[base + j * cols..base + (j + 1) * cols];
                                for c in 0..cols {
                                    brow[c] += w * grow[c];
                                }
                            }
                        }
                    }
                });
            }

            Op::TopKRenorm { a, idx, k } => {
                let rows = out.shape[0];
                let ad = &nodes[*a].data;
                let n = dims2(&nodes[*a].shape).1;
                let gates = &out.data;
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        let sel = &idx[r * k..(r + 1) * k];
                        let s: f64 = sel.iter().map(|&j| ad[r * n + j]).sum();
                        let gr = &g[r * k..(r + 1) * k];
                        let dot: f64 = gr
                            .iter()
                            .zip(&gates[r * k..(r + 1) * k])
                            .map(|(gv, ov)| gv * ov)
                            .sum();
                        for (slot, &j) in sel.iter().enumerate() {
                            buf[r * n + j] += (gr[slot] - dot) / s;
                        }
                    }
                });
            }

            Op::LayerNormRows { a, eps } => {
                let (rows, cols) = dims2(&out.shape);
                let ad = &nodes[*a].data;
                acc(adj, nodes, *a, |buf| {
                    for r in 0..rows {
                        let x = &ad[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mu = x.iter().sum::<f64>() / cols as f64;
                        let var =
                            x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let y: Vec<f64> = x.iter().map(|v| (v - mu) * rstd).collect();
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gydot =
                            gr.iter().zip(&y).map(|(gv, yv)| gv * yv).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            buf[r * cols + j] += rstd * (gr[j] - gmean - y[j] * gydot);
                        }
                    }
                });
            }

            Op::CrossEntropy { logits, targets } => {
                let (rows, cols) = dims2(&nodes[*logits].shape);
                let ld = &nodes[*logits].data;
                let count = targets.iter().filter(|&&t| t >= 0).count() as f64;
                let gs = g[0];
                acc(adj, nodes, *logits, |buf| {
                    for r in 0..rows {
                        if targets[r] < 0 {
                            continue;
                        }
                        let row = &ld[r * cols..(r + 1) * cols];
                        let p = softmax_rows(row, 1, cols);
                        for j in 0..cols {
                            let y = if j as i64 == targets[r] { 1.0 } else { 0.0 };
                            buf[r * cols + j] += gs * (p[j] - y) / count;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, gv) in buf.iter_mut().zip(g) {
        *o += gv;
    }
}
