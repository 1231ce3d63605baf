//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! primitive owns one adjoint rule in [`Tape::backward`]; composite layers
//! (MLPs, attention, losses) are built from these primitives only, so the
//! adjoint surface stays small enough to audit by hand and by finite
//! differences.
//!
//! Shape errors inside the tape are programming errors and panic. Public
//! layer functions validate user-facing shapes before recording.

use super::tensor::{log_softmax_in_place, sigmoid, softmax_in_place, softplus, Tensor2};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smallest argument `ln` is evaluated at.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Minimum(Var, Var),
    Transpose(Var),
    Sum(Var),
    RowSums(Var),
    GatherRows(Var, Vec<usize>),
    MeanPool(Var, Vec<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BoxIou(Var, Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor2>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor2 {
        self.get(v).cloned().unwrap_or_else(|| Tensor2::zeros(rows, cols))
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

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

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Registers an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b)).expect("matmul_t shape");
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let rv = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape");
        let cv = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, s) in cv.iter().enumerate() {
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Natural log, evaluated at `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push(v, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        assert!(self.shape(a).1 > 0, "softmax over empty set");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        assert!(self.shape(a).1 > 0, "softmax over empty set");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            log_softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "minimum shape");
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor2::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `r x 1` column of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        self.push(Tensor2::col_vector(&v), Op::RowSums(a))
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor2::from_vec(idx.len(), c, data).expect("gather shape");
        self.push(v, Op::GatherRows(a, idx))
    }

    /// One output row per group: the mean of the group's rows of `a`.
    pub fn mean_pool(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Tensor2::zeros(groups.len(), c);
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "mean_pool over empty group");
            let inv = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &m in members {
                for (o, x) in orow.iter_mut().zip(t.row(m)) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        self.push(out, Op::MeanPool(a, groups))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.cols(), "slice_cols range");
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor2::from_vec(t.rows(), end - start, data).expect("slice shape");
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let r = self.shape(parts[0]).0;
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor2::zeros(r, c);
        for i in 0..r {
            let mut off = 0;
            for &p in &parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols rows");
                v.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
                off += t.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut r = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows cols");
            data.extend_from_slice(t.data());
            r += t.rows();
        }
        let v = Tensor2::from_vec(r, c, data).expect("concat shape");
        self.push(v, Op::ConcatRows(parts))
    }

    /// Pairwise volumetric IoU of `a` (n x 6) and `b` (m x 6) boxes laid out as
    /// `(min xyz, max xyz)`. The result is `(n·m) x 1`, row `i·m + j`.
    pub fn box_iou(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), 6, "box_iou expects 6 columns");
        assert_eq!(tb.cols(), 6, "box_iou expects 6 columns");
        let mut out = Vec::with_capacity(ta.rows() * tb.rows());
        for i in 0..ta.rows() {
            for j in 0..tb.rows() {
                out.push(iou_raw(ta.row(i), tb.row(j)).0);
            }
        }
        let n = out.len();
        self.push(Tensor2::from_vec(n, 1, out).unwrap(), Op::BoxIou(a, b))
    }

    /// Same row-major data viewed as `rows x cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size");
        let v = Tensor2::from_vec(rows, cols, t.data().to_vec()).unwrap();
        self.push(v, Op::Reshape(a))
    }

    /// Linear layer `x·w + b` with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b)).unwrap();
                    let gb = self.value(*a).t_matmul(&g).unwrap();
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b)).unwrap();
                    let gb = g.t_matmul(self.value(*a)).unwrap();
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip_map(bv, |x, y| x / y);
                    let q = node.value.zip_map(bv, |y, bb| y / bb);
                    let gb = g.zip_map(&q, |x, y| -x * y);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let gc: Vec<f64> = (0..g.rows())
                        .map(|i| super::tensor::dot(g.row(i), av.row(i)))
                        .collect();
                    let mut ga = g;
                    for i in 0..ga.rows() {
                        let s = cv.get(i, 0);
                        for x in ga.row_mut(i) {
                            *x *= s;
                        }
                    }
                    accumulate(&mut grads[col.0], Tensor2::col_vector(&gc));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|x| x * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| x * sigmoid(z));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| {
                        if z > 0.0 {
                            x
                        } else if z < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, z| if z > LOG_FLOOR { x / z } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |x, z| if z > lo && z < hi { x } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s = super::tensor::dot(g.row(i), y.row(i));
                        for j in 0..y.cols() {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - s));
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s: f64 = g.row(i).iter().sum();
                        for j in 0..y.cols() {
                            ga.set(i, j, g.get(i, j) - y.get(i, j).exp() * s);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor2::zeros(g.rows(), g.cols());
                    let mut gb = Tensor2::zeros(g.rows(), g.cols());
                    for k in 0..g.len() {
                        if av.data()[k] <= bv.data()[k] {
                            ga.data_mut()[k] = g.data()[k];
                        } else {
                            gb.data_mut()[k] = g.data()[k];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads[a.0], Tensor2::filled(r, c, g.item()));
                }
                Op::RowSums(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        let s = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x = s);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor2::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanPool(a, groups) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor2::zeros(r, c);
                    for (k, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for (o, x) in ga.row_mut(m).iter_mut().zip(g.row(k)) {
                                *o += x * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Tensor2::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let gp = Tensor2::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                            .unwrap();
                        off += r;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::BoxIou(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let m = tb.rows();
                    let mut ga = Tensor2::zeros(ta.rows(), 6);
                    let mut gb = Tensor2::zeros(m, 6);
                    for i in 0..ta.rows() {
                        for j in 0..m {
                            let gij = g.get(i * m + j, 0);
                            if gij == 0.0 {
                                continue;
                            }
                            let (da, db) = iou_raw_grad(ta.row(i), tb.row(j));
                            for k in 0..6 {
                                ga.row_mut(i)[k] += gij * da[k];
                                gb.row_mut(j)[k] += gij * db[k];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads[a.0], Tensor2::from_vec(r, c, g.into_data()).unwrap());
                }
            }
        }
        Grads { grads }
    }
}

/// IoU of two `(min, max)` boxes plus the intermediate overlap widths.
fn iou_raw(a: &[f64], b: &[f64]) -> (f64, [f64; 3]) {
    let mut w = [0.0; 3];
    let mut inter = 1.0;
    for k in 0..3 {
        w[k] = a[k + 3].min(b[k + 3]) - a[k].max(b[k]);
        inter *= w[k].max(0.0);
    }
    let va = (a[3] - a[0]) * (a[4] - a[1]) * (a[5] - a[2]);
    let vb = (b[3] - b[0]) * (b[4] - b[1]) * (b[5] - b[2]);
    let union = va + vb - inter;
    if union <= 0.0 {
        return (0.0, w);
    }
    (inter / union, w)
}

fn iou_raw_grad(a: &[f64], b: &[f64]) -> ([f64; 6], [f64; 6]) {
    let (_, w) = iou_raw(a, b);
    let ea = [a[3] - a[0], a[4] - a[1], a[5] - a[2]];
    let eb = [b[3] - b[0], b[4] - b[1], b[5] - b[2]];
    let va = ea[0] * ea[1] * ea[2];
    let vb = eb[0] * eb[1] * eb[2];
    let overlapping = w.iter().all(|&x| x > 0.0);
    let inter = if overlapping { w[0] * w[1] * w[2] } else { 0.0 };
    let union = va + vb - inter;
    let mut da = [0.0; 6];
    let mut db = [0.0; 6];
    if union <= 0.0 {
        return (da, db);
    }
    // d iou = dI (1/U + I/U²) - (I/U²)(dVa + dVb)
    let c_inter = 1.0 / union + inter / (union * union);
    let c_vol = inter / (union * union);
    for k in 0..3 {
        let (k1, k2) = ((k + 1) % 3, (k + 2) % 3);
        if overlapping {
            let di_dw = w[k1] * w[k2];
            // w_k = min(amax, bmax) - max(amin, bmin)
            if a[k + 3] <= b[k + 3] {
                da[k + 3] += c_inter * di_dw;
            } else {
                db[k + 3] += c_inter * di_dw;
            }
            if a[k] >= b[k] {
                da[k] -= c_inter * di_dw;
            } else {
                db[k] -= c_inter * di_dw;
            }
        }
        let dva = ea[k1] * ea[k2];
        let dvb = eb[k1] * eb[k2];
        da[k + 3] -= c_vol * dva;
        da[k] += c_vol * dva;
        db[k + 3] -= c_vol * dvb;
        db[k] += c_vol * dvb;
    }
    (da, db)
}
