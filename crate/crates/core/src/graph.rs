//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough saved state to run its backward rule. Graphs are built fresh for each
//! forward pass and dropped afterwards. Leaves created with `trainable = false`
//! (frozen backbone weights, token ids) never receive gradients, and nodes that
//! depend only on such leaves skip their backward rule entirely.

use std::sync::Arc;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query may attend to inside an attention group.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Bidirectional attention over the whole group.
    Full,
    /// Position `i` attends to positions `0..=i` of its group.
    Causal,
    /// Row-major `n×n` boolean mask shared by every group of size `n`.
    /// A query whose mask row is all false produces a zero output.
    Custom(Arc<Vec<bool>>),
}

/// Partition of rows into independent attention groups.
///
/// Sequence attention uses a single group of all rows. Axial attention over an
/// `(L·M)×H` memory stack uses `M` column groups or `L` row groups.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub groups: Vec<Vec<usize>>,
    pub mask: AttnMask,
}

impl AttnLayout {
    pub fn sequence(n: usize, mask: AttnMask) -> Self {
        Self {
            groups: vec![(0..n).collect()],
            mask,
        }
    }

    fn allowed(&self, i: usize, j: usize, n: usize) -> bool {
        match &self.mask {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::Custom(m) => m[i * n + j],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<f64>,
    },
    Rope {
        x: Var,
        head_dim: usize,
        table: Arc<Vec<(f64, f64)>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<Vec<f64>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    FlatView {
        x: Var,
        offset: usize,
    },
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        count: usize,
    },
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn param(&mut self, value: Arc<Matrix>, trainable: bool) -> Var {
        self.push_arc(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1x{} row", av.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_vec(
            av.rows(),
            av.cols(),
            av.data().iter().map(|&x| silu(x)).collect(),
        );
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Root-mean-square normalisation of each row, scaled by a `1×c` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        assert_eq!(gv.shape(), (1, xv.cols()), "rms_norm gain shape");
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Standard layer normalisation of each row with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert_eq!(gv.shape(), (1, xv.cols()), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, xv.cols()), "layer_norm bias shape");
        let n = xv.cols() as f64;
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mean) * inv * gv.data()[c] + bv.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            },
            ng,
        )
    }

    /// Rotary position encoding applied independently to each head of width
    /// `head_dim` (rotate-half convention). `positions[r]` is row `r`'s position.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, theta: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(positions.len(), xv.rows(), "one position per row");
        assert!(head_dim.is_multiple_of(2) && xv.cols().is_multiple_of(head_dim), "bad rope head width");
        let half = head_dim / 2;
        let mut table = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = p as f64 * freq;
                table.push((angle.cos(), angle.sin()));
            }
        }
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let src = xv.row(r);
            let dst = out.row_mut(r);
            for h in 0..xv.cols() / head_dim {
                let base = h * head_dim;
                for i in 0..half {
                    let (c, s) = table[r * half + i];
                    let (x1, x2) = (src[base + i], src[base + half + i]);
                    dst[base + i] = x1 * c - x2 * s;
                    dst[base + half + i] = x2 * c + x1 * s;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Rope {
                x,
                head_dim,
                table: Arc::new(table),
            },
            ng,
        )
    }

    /// Scaled dot-product attention with grouped key/value heads.
    ///
    /// `q` is `n×(heads·d)`, `k` and `v` are `n×(kv_heads·d)`; query head `h`
    /// reads key/value head `h / (heads / kv_heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(heads.is_multiple_of(kv_heads), "heads must be a multiple of kv_heads");
        assert_eq!(qv.cols() % heads, 0, "query width not divisible by heads");
        let d = qv.cols() / heads;
        assert_eq!(kv.cols(), kv_heads * d, "key width mismatch");
        assert_eq!(vv.cols(), kv_heads * d, "value width mismatch");
        assert_eq!(kv.rows(), qv.rows());
        assert_eq!(vv.rows(), qv.rows());
        let group_ratio = heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), qv.cols());
        let mut probs = Vec::with_capacity(layout.groups.len() * heads);
        for group in &layout.groups {
            let n = group.len();
            for h in 0..heads {
                let kvh = h / group_ratio;
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    let qi = &qv.row(group[i])[h * d..(h + 1) * d];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if layout.allowed(i, j, n) {
                            let kj = &kv.row(group[j])[kvh * d..(kvh + 1) * d];
                            let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                            p[i * n + j] = s;
                            max = max.max(s);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut total = 0.0;
                    for j in 0..n {
                        if layout.allowed(i, j, n) {
                            let e = (p[i * n + j] - max).exp();
                            p[i * n + j] = e;
                            total += e;
                        } else {
                            p[i * n + j] = 0.0;
                        }
                    }
                    let orow = &mut out.row_mut(group[i])[h * d..(h + 1) * d];
                    for j in 0..n {
                        let w = p[i * n + j] / total;
                        p[i * n + j] = w;
                        if w != 0.0 {
                            let vj = &vv.row(group[j])[kvh * d..(kvh + 1) * d];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                layout,
                probs,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::concat_rows(&mats);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    /// Reinterprets the row-major elements `offset..offset + rows·cols` of `x`
    /// as a `rows×cols` matrix.
    pub fn flat_view(&mut self, x: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert!(offset + rows * cols <= xv.len(), "flat view out of range");
        let out = Matrix::from_vec(rows, cols, xv.data()[offset..offset + rows * cols].to_vec());
        let ng = self.ng(x);
        self.push(out, Op::FlatView { x, offset }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Row `r` of the output is row `ids[r]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// Evaluates to 0 when no row is supervised.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows(), "one target slot per logit row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            count += 1;
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![value]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Runs the backward pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Matrix>], v: Var) -> &'a mut Matrix {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let slot = self.grad_slot(grads, *a);
                    gemm(false, g, true, self.value(*b), 1.0, 1.0, slot);
                }
                if self.ng(*b) {
                    let slot = self.grad_slot(grads, *b);
                    gemm(true, self.value(*a), false, g, 1.0, 1.0, slot);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Matrix::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gy, x)| gy * silu_grad(*x))
                    .collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), d));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgain = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let inv = inv_rms[r];
                    let (row, gy) = (xv.row(r), g.row(r));
                    let mut dot = 0.0;
                    for c in 0..row.len() {
                        let xhat = row[c] * inv;
                        dgain.data_mut()[c] += gy[c] * xhat;
                        dot += gy[c] * gv.data()[c] * xhat;
                    }
                    let mean = dot / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let xhat = row[c] * inv;
                        *o = inv * (gy[c] * gv.data()[c] - xhat * mean);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgain = Matrix::zeros(1, xv.cols());
                let mut dbias = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let inv = inv_std[r];
                    let (row, gy) = (xv.row(r), g.row(r));
                    let mean = row.iter().sum::<f64>() / n;
                    let mut sum_dg = 0.0;
                    let mut sum_dg_xhat = 0.0;
                    for c in 0..row.len() {
                        let xhat = (row[c] - mean) * inv;
                        let dgx = gy[c] * gv.data()[c];
                        dgain.data_mut()[c] += gy[c] * xhat;
                        dbias.data_mut()[c] += gy[c];
                        sum_dg += dgx;
                        sum_dg_xhat += dgx * xhat;
                    }
                    let (m1, m2) = (sum_dg / n, sum_dg_xhat / n);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let xhat = (row[c] - mean) * inv;
                        *o = inv * (gy[c] * gv.data()[c] - m1 - xhat * m2);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Rope { x, head_dim, table } => {
                let half = head_dim / 2;
                let mut dx = g.clone();
                for r in 0..g.rows() {
                    let src = g.row(r);
                    let dst = dx.row_mut(r);
                    for h in 0..g.cols() / head_dim {
                        let base = h * head_dim;
                        for i in 0..half {
                            let (c, s) = table[r * half + i];
                            let (d1, d2) = (src[base + i], src[base + half + i]);
                            dst[base + i] = d1 * c + d2 * s;
                            dst[base + half + i] = d2 * c - d1 * s;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                layout,
                probs,
            } => self.attention_backward(
                (*q, *k, *v),
                (*heads, *kv_heads),
                layout,
                probs,
                g,
                grads,
            ),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let cols = g.cols();
                    let slot = self.grad_slot(grads, *x);
                    let dst = &mut slot.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::FlatView { x, offset } => {
                if self.ng(*x) {
                    let slot = self.grad_slot(grads, *x);
                    let dst = &mut slot.data_mut()[*offset..offset + g.len()];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Gather { table, ids } => {
                if self.ng(*table) {
                    let slot = self.grad_slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = g.data()[0] / *count as f64;
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    d.row_mut(r)[t] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        (heads, kv_heads): (usize, usize),
        layout: &AttnLayout,
        probs: &[Vec<f64>],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols() / heads;
        let ratio = heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Matrix::zeros(qv.rows(), qv.cols());
        let mut dk = Matrix::zeros(kv.rows(), kv.cols());
        let mut dv = Matrix::zeros(vv.rows(), vv.cols());
        let mut slot = 0;
        for group in &layout.groups {
            let n = group.len();
            for h in 0..heads {
                let kvh = h / ratio;
                let p = &probs[slot];
                slot += 1;
                for i in 0..n {
                    let gi = &g.row(group[i])[h * d..(h + 1) * d];
                    // dp_ij = g_i · v_j ; ds_ij = p_ij (dp_ij − Σ_k p_ik dp_ik)
                    let mut dp = vec![0.0; n];
                    let mut weighted = 0.0;
                    for j in 0..n {
                        let pij = p[i * n + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(group[j])[kvh * d..(kvh + 1) * d];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        weighted += pij * dp[j];
                        let dvj = &mut dv.row_mut(group[j])[kvh * d..(kvh + 1) * d];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += pij * x;
                        }
                    }
                    let qi = &qv.row(group[i])[h * d..(h + 1) * d];
                    for j in 0..n {
                        let pij = p[i * n + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = pij * (dp[j] - weighted) * scale;
                        let kj = &kv.row(group[j])[kvh * d..(kvh + 1) * d];
                        let dqi = &mut dq.row_mut(group[i])[h * d..(h + 1) * d];
                        for (o, x) in dqi.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let dkj = &mut dk.row_mut(group[j])[kvh * d..(kvh + 1) * d];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}
