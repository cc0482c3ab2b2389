//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Operations
//! are recorded in creation order so a single reverse sweep suffices.
//!
//! All kernels accumulate in a fixed index order, so one row of a batched
//! product is bitwise identical to the same row computed on its own.

use ndarray::{Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    RowNormalize(Var, f64),
    RowDot(Var, Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    ArcMargin { cos: Var, labels: Vec<usize>, margin: f64, scale: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }
}

// ---------------------------------------------------------------------------
// Deterministic kernels
// ---------------------------------------------------------------------------

/// `a · b`, accumulating each output element in increasing `k`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
    let (n, k, m) = (a.nrows(), a.ncols(), b.ncols());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Matrix::from_shape_vec((n, m), out).expect("shape")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dimensions differ");
    let (n, k, m) = (a.nrows(), a.ncols(), b.nrows());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    Matrix::from_shape_vec((n, m), out).expect("shape")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.nrows(), b.nrows(), "matmul_tn: inner dimensions differ");
    let (r, n, m) = (a.nrows(), a.ncols(), b.ncols());
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    for p in 0..r {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Matrix::from_shape_vec((n, m), out).expect("shape")
}

/// Compensated sum; result is independent of term order to within one ulp.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn row_norms(x: &Matrix) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn arc_threshold(margin: f64) -> (f64, f64) {
    let th = (std::f64::consts::PI - margin).cos();
    let mm = (std::f64::consts::PI - margin).sin() * margin;
    (th, mm)
}

const ARC_CLAMP: f64 = 1.0 - 1e-7;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let norms = row_norms(x);
        let mut value = x.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(norms) {
            let d = n.max(eps);
            row.mapv_inplace(|v| v / d);
        }
        let rg = self.rg(a);
        self.push(value, Op::RowNormalize(a, eps), rg)
    }

    /// Row-wise inner product, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_dot: shape mismatch");
        let (x, y) = (self.value(a), self.value(b));
        let n = x.nrows();
        let mut value = Matrix::zeros((n, 1));
        for i in 0..n {
            let mut acc = 0.0;
            for (p, q) in x.row(i).iter().zip(y.row(i).iter()) {
                acc += p * q;
            }
            value[[i, 0]] = acc;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::RowDot(a, b), rg)
    }

    /// Compensated sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = stable_sum(self.value(a).iter().copied());
        let rg = self.rg(a);
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// `out[i] = a[i, cols[i]]`, shape `n×1`.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), cols.len(), "pick: one column per row");
        let mut value = Matrix::zeros((cols.len(), 1));
        for (i, &c) in cols.iter().enumerate() {
            value[[i, 0]] = x[[i, c]];
        }
        let rg = self.rg(a);
        self.push(value, Op::Pick(a, cols), rg)
    }

    /// Additive angular margin logits: `scale·cos(θ + margin)` on the label
    /// column, `scale·cos θ` elsewhere. `cos` holds cosine similarities.
    pub fn arc_margin(&mut self, cos: Var, labels: Vec<usize>, margin: f64, scale: f64) -> Var {
        let c = self.value(cos);
        assert_eq!(c.nrows(), labels.len(), "arc_margin: one label per row");
        let (th, mm) = arc_threshold(margin);
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut value = c * scale;
        for (i, &y) in labels.iter().enumerate() {
            let x = c[[i, y]].clamp(-ARC_CLAMP, ARC_CLAMP);
            let phi = if x > th {
                x * cm - (1.0 - x * x).sqrt() * sm
            } else {
                x - mm
            };
            value[[i, y]] = scale * phi;
        }
        let rg = self.rg(cos);
        self.push(value, Op::ArcMargin { cos, labels, margin, scale }, rg)
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, d: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    acc(*a, matmul(g, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                acc(*a, g / y);
                acc(*b, -(g * x) / (y * y));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |dv, &xv| {
                    if xv <= 0.0 {
                        *dv = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Ln(a) => acc(*a, g / self.value(*a)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |dv, &xv| {
                    if xv < *lo || xv > *hi {
                        *dv = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::RowNormalize(a, eps) => {
                let x = self.value(*a);
                let y = &node.value;
                let norms = row_norms(x);
                let mut d = g.clone();
                for (r, n) in norms.iter().enumerate() {
                    if *n >= *eps {
                        let dot: f64 = y.row(r).iter().zip(g.row(r).iter()).map(|(p, q)| p * q).sum();
                        for c in 0..d.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / n;
                        }
                    } else {
                        d.row_mut(r).mapv_inplace(|v| v / eps);
                    }
                }
                acc(*a, d);
            }
            Op::RowDot(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let col = g.column(0).insert_axis(Axis(1)).to_owned();
                if self.rg(*a) {
                    acc(*a, y * &col);
                }
                if self.rg(*b) {
                    acc(*b, x * &col);
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                acc(*a, Matrix::from_elem(shape, g[[0, 0]]));
            }
            Op::GatherRows(a, idx) => {
                let shape = self.shape(*a);
                let mut d = Matrix::zeros(shape);
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..d.nrows() {
                    let gs: f64 = g.row(r).sum();
                    for c in 0..d.ncols() {
                        d[[r, c]] = g[[r, c]] - y[[r, c]].exp() * gs;
                    }
                }
                acc(*a, d);
            }
            Op::Pick(a, cols) => {
                let shape = self.shape(*a);
                let mut d = Matrix::zeros(shape);
                for (r, &c) in cols.iter().enumerate() {
                    d[[r, c]] += g[[r, 0]];
                }
                acc(*a, d);
            }
            Op::ArcMargin { cos, labels, margin, scale } => {
                let c = self.value(*cos);
                let (th, _) = arc_threshold(*margin);
                let (cm, sm) = (margin.cos(), margin.sin());
                let mut d = g * *scale;
                for (r, &y) in labels.iter().enumerate() {
                    let raw = c[[r, y]];
                    let x = raw.clamp(-ARC_CLAMP, ARC_CLAMP);
                    let dphi = if raw != x {
                        0.0
                    } else if x > th {
                        cm + x * sm / (1.0 - x * x).sqrt()
                    } else {
                        1.0
                    };
                    d[[r, y]] = g[[r, y]] * scale * dphi;
                }
                acc(*cos, d);
            }
        }
    }
}
