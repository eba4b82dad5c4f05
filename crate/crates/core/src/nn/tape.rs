//! Tape-based reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every value is a `rows × cols` matrix; scalars are `1 × 1`. Nodes are
//! appended in evaluation order, so a single reverse sweep visits every node
//! after all of its consumers.

use std::sync::Arc;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Sigmoid,
    Softplus,
    Silu,
    Tanh,
    Square,
    Recip,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a + s` with `s` a 1×1 node
    AddScalar(Var, Var),
    /// `a · s` with `s` a 1×1 node
    MulScalar(Var, Var),
    Affine(Var, T, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d(Var, Var, Var, ConvGeom),
    Unary(Var, Unary),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        rstd: Vec<T>,
    },
    Gather(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

/// Computation graph for one evaluation. Build it forward, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of every node after a reverse sweep.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var, len: usize) -> Vec<T> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![T::zero(); len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn leaf(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape");
        self.push(value, rows, cols, Op::Leaf)
    }

    pub fn constant(&mut self, c: T) -> Var {
        self.leaf(vec![c], 1, 1)
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        self.same_shape(a, b);
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(v, r, c, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let sv = self.scalar(s);
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x + sv).collect();
        self.push(v, r, c, Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let sv = self.scalar(s);
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| x * sv).collect();
        self.push(v, r, c, Op::MulScalar(a, s))
    }

    /// `scale · a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| scale * x + shift).collect();
        self.push(v, r, c, Op::Affine(a, scale, shift))
    }

    fn row_op(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.value(b).len(), c, "row operand length");
        let bv = self.value(b).to_vec();
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(&x, &y)| if mul { x * y } else { x + y }).collect::<Vec<_>>())
            .collect();
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        self.push(v, r, c, op)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.row_op(a, b, false)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.row_op(a, b, true)
    }

    fn col_op(&mut self, a: Var, b: Var, mul: bool) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.value(b).len(), r, "column operand length");
        let bv = self.value(b).to_vec();
        let v = self
            .value(a)
            .chunks(c)
            .zip(&bv)
            .flat_map(|(row, &y)| row.iter().map(|&x| if mul { x * y } else { x + y }).collect::<Vec<_>>())
            .collect();
        let op = if mul { Op::MulCol(a, b) } else { Op::AddCol(a, b) };
        self.push(v, r, c, op)
    }

    /// Adds `b[i]` to every element of row `i`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        self.col_op(a, b, false)
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.col_op(a, b, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(out, m, n, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(out, c, r, Op::Transpose(a))
    }

    /// 2-D convolution. `x` is `cin × (h·w)`, `weight` is `cout × (cin·k·k)`,
    /// `bias` has `cout` entries; the result is `cout × (out_h·out_w)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, g: ConvGeom) -> Var {
        assert_eq!(self.shape(x), (g.cin, g.h * g.w), "conv input shape");
        assert_eq!(self.shape(weight), (g.cout, g.cin * g.k * g.k), "conv weight shape");
        assert_eq!(self.value(bias).len(), g.cout, "conv bias length");
        let (ho, wo) = (g.out_h(), g.out_w());
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let kk = g.cin * g.k * g.k;
        let mut out = vec![T::zero(); g.cout * ho * wo];
        let mut col = vec![T::zero(); kk];
        for oy in 0..ho {
            for ox in 0..wo {
                im2col(xv, &g, oy, ox, &mut col);
                for co in 0..g.cout {
                    let wrow = &wv[co * kk..(co + 1) * kk];
                    let mut s = bv[co];
                    for (a, b) in wrow.iter().zip(&col) {
                        s += *a * *b;
                    }
                    out[co * ho * wo + oy * wo + ox] = s;
                }
            }
        }
        self.push(out, g.cout, ho * wo, Op::Conv2d(x, weight, bias, g))
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|&x| unary_fwd(u, x)).collect();
        self.push(v, r, c, Op::Unary(a, u))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Sum of all elements, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len());
        let s = self.sum(a);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Column sums, `1 × cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push(out, 1, c, Op::SumRows(a))
    }

    /// Row sums, `rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c).map(|row| row.iter().copied().sum()).collect();
        self.push(out, r, 1, Op::SumCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        self.push(out, r, c, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x − μ)/√(σ² + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let (r, c) = self.shape(a);
        let n = T::from_usize_lossy(c);
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in self.value(a).chunks(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mu) * rs));
            rstd.push(rs);
        }
        self.push(out, r, c, Op::LayerNormRows { x: a, rstd })
    }

    /// `out[i] = a[idx[i]]` (flat indices), shaped `rows × cols`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather shape");
        let av = self.value(a);
        let out = idx.iter().map(|&i| av[i]).collect();
        self.push(out, rows, cols, Op::Gather(a, idx))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        assert!(parts.iter().all(|&p| self.shape(p).0 == r), "concat row mismatch");
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.push(out, r, c, Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "reshape size");
        let v = self.value(a).to_vec();
        self.push(v, rows, cols, Op::Reshape(a))
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| s.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((o, &x), &y)| *o += x * y));
                acc(grads, *b, &mut |s| s.iter_mut().zip(g).zip(av).for_each(|((o, &x), &y)| *o += x * y));
            }
            Op::Div(a, b) => {
                let (bv, yv) = (self.value(*b), &node.value);
                acc(grads, *a, &mut |s| s.iter_mut().zip(g).zip(bv).for_each(|((o, &x), &d)| *o += x / d));
                acc(grads, *b, &mut |s| {
                    s.iter_mut().zip(g).zip(bv.iter().zip(yv)).for_each(|((o, &x), (&d, &y))| *o -= x * y / d)
                });
            }
            Op::AddScalar(a, sc) => {
                acc(grads, *a, &mut |s| add_into(s, g));
                let tot: T = g.iter().copied().sum();
                acc(grads, *sc, &mut |s| s[0] += tot);
            }
            Op::MulScalar(a, sc) => {
                let k = self.scalar(*sc);
                acc(grads, *a, &mut |s| s.iter_mut().zip(g).for_each(|(o, &x)| *o += x * k));
                let av = self.value(*a);
                let tot: T = g.iter().zip(av).map(|(&x, &y)| x * y).sum();
                acc(grads, *sc, &mut |s| s[0] += tot);
            }
            Op::Affine(a, scale, _) => {
                acc(grads, *a, &mut |s| s.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *scale));
            }
            Op::AddRow(a, b) => {
                let c = node.cols;
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        srow.iter_mut().zip(grow).zip(bv).for_each(|((o, &x), &y)| *o += x * y);
                    }
                });
                acc(grads, *b, &mut |s| {
                    for (grow, arow) in g.chunks(c).zip(av.chunks(c)) {
                        s.iter_mut().zip(grow).zip(arow).for_each(|((o, &x), &y)| *o += x * y);
                    }
                });
            }
            Op::AddCol(a, b) => {
                let c = node.cols;
                acc(grads, *a, &mut |s| add_into(s, g));
                acc(grads, *b, &mut |s| {
                    for (o, row) in s.iter_mut().zip(g.chunks(c)) {
                        *o += row.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MulCol(a, b) => {
                let c = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, *a, &mut |s| {
                    for ((srow, grow), &y) in s.chunks_mut(c).zip(g.chunks(c)).zip(bv) {
                        srow.iter_mut().zip(grow).for_each(|(o, &x)| *o += x * y);
                    }
                });
                acc(grads, *b, &mut |s| {
                    for ((o, grow), arow) in s.iter_mut().zip(g.chunks(c)).zip(av.chunks(c)) {
                        *o += grow.iter().zip(arow).map(|(&x, &y)| x * y).sum::<T>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G·Bᵀ
                acc(grads, *a, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            s[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                // dB = Aᵀ·G
                acc(grads, *b, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            s[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, &y)| *o += x * y);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d(x, w, b, geo) => {
                let (ho, wo) = (geo.out_h(), geo.out_w());
                let kk = geo.cin * geo.k * geo.k;
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dw = vec![T::zero(); geo.cout * kk];
                let mut dx = vec![T::zero(); xv.len()];
                let mut col = vec![T::zero(); kk];
                let mut dcol = vec![T::zero(); kk];
                for oy in 0..ho {
                    for ox in 0..wo {
                        im2col(xv, geo, oy, ox, &mut col);
                        dcol.iter_mut().for_each(|d| *d = T::zero());
                        for co in 0..geo.cout {
                            let go = g[co * ho * wo + oy * wo + ox];
                            if go == T::zero() {
                                continue;
                            }
                            let wrow = &wv[co * kk..(co + 1) * kk];
                            let dwrow = &mut dw[co * kk..(co + 1) * kk];
                            for j in 0..kk {
                                dwrow[j] += go * col[j];
                                dcol[j] += go * wrow[j];
                            }
                        }
                        col2im_add(&dcol, geo, oy, ox, &mut dx);
                    }
                }
                let db: Vec<T> = g.chunks(ho * wo).map(|r| r.iter().copied().sum()).collect();
                acc(grads, *x, &mut |s| add_into(s, &dx));
                acc(grads, *w, &mut |s| add_into(s, &dw));
                acc(grads, *b, &mut |s| add_into(s, &db));
            }
            Op::Unary(a, u) => {
                let (xv, yv) = (self.value(*a), &node.value);
                acc(grads, *a, &mut |s| {
                    for ((o, &gi), (&x, &y)) in s.iter_mut().zip(g).zip(xv.iter().zip(yv)) {
                        *o += gi * unary_grad(*u, x, y);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc(grads, *a, &mut |s| s.iter_mut().for_each(|o| *o += g0));
            }
            Op::SumRows(a) => {
                let c = node.cols;
                acc(grads, *a, &mut |s| {
                    for srow in s.chunks_mut(c) {
                        add_into(srow, g);
                    }
                });
            }
            Op::SumCols(a) => {
                let c = self.shape(*a).1;
                acc(grads, *a, &mut |s| {
                    for (srow, &gi) in s.chunks_mut(c).zip(g) {
                        srow.iter_mut().for_each(|o| *o += gi);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let yv = &node.value;
                acc(grads, *a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(yv.chunks(c)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                        for ((o, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, rstd } => {
                let c = node.cols;
                let n = T::from_usize_lossy(c);
                let yv = &node.value;
                acc(grads, *x, &mut |s| {
                    for (((srow, grow), yrow), &rs) in s.chunks_mut(c).zip(g.chunks(c)).zip(yv.chunks(c)).zip(rstd) {
                        let mg = grow.iter().copied().sum::<T>() / n;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gi), &y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += rs * (gi - mg - y * mgy);
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                acc(grads, *a, &mut |s| {
                    for (&i, &gi) in idx.iter().zip(g) {
                        s[i] += gi;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    acc(grads, p, &mut |s| {
                        for (i, srow) in s.chunks_mut(pc).enumerate() {
                            add_into(srow, &g[i * c + offset..i * c + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, &mut |s| add_into(s, g));
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, oy: usize, ox: usize, col: &mut [T]) {
    let mut j = 0;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                col[j] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                    x[ci * g.h * g.w + iy as usize * g.w + ix as usize]
                } else {
                    T::zero()
                };
                j += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(dcol: &[T], g: &ConvGeom, oy: usize, ox: usize, dx: &mut [T]) {
    let mut j = 0;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                    dx[ci * g.h * g.w + iy as usize * g.w + ix as usize] += dcol[j];
                }
                j += 1;
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn unary_fwd<T: Scalar>(u: Unary, x: T) -> T {
    match u {
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => {
            if x > T::lit(30.0) {
                x
            } else {
                x.exp().ln_1p()
            }
        }
        Unary::Silu => x * sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Square => x * x,
        Unary::Recip => T::one() / x,
        Unary::Sqrt => x.sqrt(),
    }
}

fn unary_grad<T: Scalar>(u: Unary, x: T, y: T) -> T {
    match u {
        Unary::Exp => y,
        Unary::Ln => T::one() / x,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Softplus => sigmoid(x),
        Unary::Silu => {
            let s = sigmoid(x);
            s + x * s * (T::one() - s)
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Square => T::lit(2.0) * x,
        Unary::Recip => -y * y,
        Unary::Sqrt => T::lit(0.5) / y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` around every element of `inputs`.
    fn check(inputs: &[(Vec<f64>, usize, usize)], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |vals: &[(Vec<f64>, usize, usize)]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|(v, r, c)| g.leaf(v.clone(), *r, *c)).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = eval(inputs);
        let grads = g.backward(out);
        let eps = 1e-6;
        for (k, (v, _, _)) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k], v.len());
            for i in 0..v.len() {
                let mut plus = inputs.to_vec();
                plus[k].0[i] += eps;
                let mut minus = inputs.to_vec();
                minus[k].0[i] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let fd = (gp.scalar(op) - gm.scalar(om)) / (2.0 * eps);
                let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-6);
                assert!(err < 1e-6, "input {k}[{i}]: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn pos_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.5..2.0)).collect()
    }

    /// Weighted sum with fixed weights so every output element matters.
    fn reduce(g: &mut Graph<f64>, v: Var) -> Var {
        let n = g.value(v).len();
        let (r, c) = g.shape(v);
        let w = g.leaf((0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect(), r, c);
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = (rand_vec(&mut rng, 6), 2, 3);
        let b = (pos_vec(&mut rng, 6), 2, 3);
        check(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let q = g.div(m, v[1]);
            let q = g.div(q, v[1]);
            reduce(g, q)
        });
        for u in [Unary::Exp, Unary::Sigmoid, Unary::Softplus, Unary::Silu, Unary::Tanh, Unary::Square] {
            check(std::slice::from_ref(&a), |g, v| {
                let y = g.unary(v[0], u);
                reduce(g, y)
            });
        }
        for u in [Unary::Ln, Unary::Recip, Unary::Sqrt] {
            check(std::slice::from_ref(&b), |g, v| {
                let y = g.unary(v[0], u);
                reduce(g, y)
            });
        }
    }

    #[test]
    fn broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = (rand_vec(&mut rng, 12), 3, 4);
        let row = (rand_vec(&mut rng, 4), 1, 4);
        let col = (rand_vec(&mut rng, 3), 3, 1);
        let s = (rand_vec(&mut rng, 1), 1, 1);
        check(&[a, row, col, s], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let x = g.mul_row(x, v[1]);
            let x = g.add_col(x, v[2]);
            let x = g.mul_col(x, v[2]);
            let x = g.add_scalar(x, v[3]);
            let x = g.mul_scalar(x, v[3]);
            let x = g.affine(x, 0.7, 0.1);
            reduce(g, x)
        });
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = (rand_vec(&mut rng, 6), 2, 3);
        let b = (rand_vec(&mut rng, 12), 3, 4);
        check(&[a, b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let t = g.transpose(m);
            let sr = g.sum_rows(t);
            let sc = g.sum_cols(t);
            let x = g.softmax_rows(t);
            let y = g.layer_norm_rows(x, 1e-5);
            let a = reduce(g, y);
            let b = reduce(g, sr);
            let c = reduce(g, sc);
            let ab = g.add(a, b);
            g.add(ab, c)
        });
    }

    #[test]
    fn conv_and_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geo = ConvGeom { cin: 2, h: 5, w: 6, cout: 3, k: 3, stride: 2, pad: 1 };
        let x = (rand_vec(&mut rng, 60), 2, 30);
        let w = (rand_vec(&mut rng, 54), 3, 18);
        let b = (rand_vec(&mut rng, 3), 1, 3);
        let idx = Arc::new(vec![0usize, 5, 5, 2, 8, 1]);
        check(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], geo);
            let (r, c) = g.shape(y);
            assert_eq!((r, c), (3, 9));
            let y = g.silu(y);
            let gathered = g.gather(y, idx.clone(), 2, 3);
            let re = g.reshape(y, 9, 3);
            let cat = g.concat_cols(&[re, re]);
            let a = reduce(g, gathered);
            let b = reduce(g, cat);
            let m = g.mean(y);
            let ab = g.add(a, b);
            g.add(ab, m)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let geo = ConvGeom { cin: 1, h: 3, w: 3, cout: 1, k: 3, stride: 1, pad: 0 };
        let mut g = Graph::<f64>::new();
        let x = g.leaf((1..=9).map(|v| v as f64).collect(), 1, 9);
        let w = g.leaf(vec![1.0; 9], 1, 9);
        let b = g.leaf(vec![0.5], 1, 1);
        let y = g.conv2d(x, w, b, geo);
        assert_eq!(g.value(y), &[45.5]);
    }

    #[test]
    fn unused_inputs_get_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(vec![1.0, 2.0], 1, 2);
        let b = g.leaf(vec![3.0], 1, 1);
        let s = g.sum(a);
        let grads = g.backward(s);
        assert_eq!(grads.get(b, 1), vec![0.0]);
        assert_eq!(grads.get(a, 2), vec![1.0, 1.0]);
    }
}
